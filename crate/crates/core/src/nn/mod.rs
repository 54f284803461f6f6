//! Minimal neural-network core: layers, losses, Adam and gradient checking.

mod adam;
pub(crate) mod gemm;
mod gradcheck;
mod init;
mod layer;
mod loss;
mod sequential;

pub use adam::{adam_step, Adam, AdamState};
pub use gradcheck::{check_gradients, gradient_check, ParamHost, FD_STEP};
pub use layer::{concat, split, Activation, Cache, Layer, LayerSpec, Mode, Padding, ParamSet};
pub use loss::{mse_loss, softmax_cross_entropy};
pub use sequential::Sequential;
