//! Loss, optimizer and gradient-check utilities.

pub mod adadelta;
pub mod gradcheck;
pub mod loss;

pub use adadelta::{adadelta_step, AdadeltaConfig, AdadeltaState, OptimState};
pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error, GradCheckReport};
pub use loss::{bce_loss, LossReport, PRED_CLAMP};
