//! Training, evaluation, prototype analysis and parameter sweeps.

mod analyze;
mod sweep;
mod train;

pub use analyze::{analyze_prototypes, render_heatmap, write_analysis, PrototypeAnalysis, DEAD_FRACTION};
pub use sweep::{render_table, split_values, sweep, sweep_key, SweepRow};
pub use train::{
    bank_options, evaluate, initial_checkpoint, initialise_bank, load_label_prior, train, train_epochs, train_from,
    EpochRecord, TrainOutcome,
};
