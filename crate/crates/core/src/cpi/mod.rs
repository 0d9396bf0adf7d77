//! Class-specific prototype initialisation: frequency-aware budgets and
//! per-class clustering of patch features.

mod allocation;
mod bank;
mod kmeans;

pub use allocation::{allocate_prototypes, inverse_frequency_quotas, AllocationPlan};
pub use bank::{build_prototype_bank, BankOptions, PrototypeBank, DEFAULT_EPSILON};
pub use kmeans::{inertia, mini_batch_kmeans, KMeansOptions, KMeansResult};
