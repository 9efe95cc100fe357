//! Posterior fitting: replay buffer, RLSVI loss with its analytic gradient,
//! and the Adam optimizer.

mod adam;
mod loss;
mod replay;

pub use adam::{adam_step, AdamState};
pub use loss::{rlsvi_gradient, rlsvi_loss, rlsvi_loss_and_gradient, LossConfig};
pub use replay::{make_perturbations, ReplayBuffer, Transition};
