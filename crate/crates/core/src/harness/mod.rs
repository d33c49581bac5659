//! Three-stage training, checkpoints, evaluation and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod invariants;
pub mod mixture;
pub mod optim;
pub mod system;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{total_loss, Config, Lambdas, Stage, StageConfig};
pub use eval::{eval_cases, evaluate, EvalReport};
pub use invariants::{run_invariants, CheckResult};
pub use mixture::{Mixture, MixtureEntry};
pub use optim::{Ema, OptimizerConfig, OptimizerState};
pub use system::{Sample, System};
pub use train::{run_stage, train_stage, TrainState};
