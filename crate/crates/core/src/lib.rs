//! Multi-grained compositional visual clue learning for multi-label
//! intent recognition.

pub mod apportion;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cpi;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kv;
pub mod mcc;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pki;

pub use error::{MccError, Result};
