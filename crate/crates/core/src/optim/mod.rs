//! Loss functions, update rules, learning-rate schedules and the LR range test.

pub mod loss;
pub mod lr_finder;
pub mod optimizer;
pub mod schedule;
pub mod step;

pub use loss::{cross_entropy, softmax, LossBatch};
pub use lr_finder::{lr_range_test, LrFinderConfig, LrFinderResult, LrPoint};
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerMode};
pub use schedule::{one_cycle, Schedule, ScheduleState};
pub use step::{adam_step, adamw_step, sgd_step, AdamConfig, AdamState, WeightDecay};
