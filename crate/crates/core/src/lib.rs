//! Neural-network training with per-neuron freezing.
//!
//! Neurons whose outputs on a fixed probe set have stopped changing are
//! frozen: their gradients are not computed and their parameters are not
//! updated. The freeze threshold and the learning rate are both learned
//! online from hypergradients, and a FLOPs ledger reports what the skipped
//! work saved relative to an identical run with nothing frozen.
//!
//! ```no_run
//! use scotti::{run_training, TrainConfig};
//!
//! let report = run_training(&TrainConfig::default()).unwrap();
//! println!("{:.2}% FLOPs saved", report.flops_saved_percent());
//! ```

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod neq;
pub mod optimizer;
pub mod train;
pub mod verify;

pub use config::{load_config, parse_config, Mode, TrainConfig};
pub use data::{load_dataset, Dataset, DatasetSpec, Split};
pub use error::{Error, Result};
pub use flops::{FlopsLedger, FlopsReport};
pub use metrics::{compare_runs, emit_metrics, load_report};
pub use model::{Model, ModelSpec, NeuronId};
pub use neq::{FreezeMask, NeqTracker};
pub use optimizer::{EpsilonSign, HyperState};
pub use train::{run_training, RunReport};
