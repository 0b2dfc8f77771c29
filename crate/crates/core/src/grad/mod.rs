//! Gradient verification, the optimizer, synthetic scenes and the toy training loop.

mod check;
mod optim;
mod synth;
mod train;

pub use check::{
    check_end_to_end, finite_diff_at, finite_diff_grad, gradcheck, gradcheck_all, relative_error,
    GradCheckReport, EPSILON, OPS, SAMPLES_PER_TENSOR,
};
pub use optim::{AdamW, CosineSchedule};
pub use synth::{synth_scenes, SyntheticScene};
pub use train::{train_toy, train_toy_observed, TrainConfig, TrainRun};
