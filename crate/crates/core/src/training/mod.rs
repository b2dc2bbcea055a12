//! Joint language-modeling and latent-alignment training.

pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod sequence;
pub mod step;
pub mod trainer;

pub use gradcheck::{compare_gradient, grad_check, mean_gradient, GradCheckConfig, GradCheckReport, TensorCheck};
pub use loss::{latent_loss, lm_loss, LossBreakdown};
pub use optim::{adamw_update, optimizer_step, AdamWConfig, OptimState, Schedule};
pub use sequence::TrainingSequence;
pub use step::{
    evaluate, loss_and_grad, scheduled_sampling_sequence, scheduled_sampling_step, teacher_forced_step,
    ScheduledOutput,
};
pub use trainer::{total_steps, train, LogRow, TrainConfig, TrainReport};
