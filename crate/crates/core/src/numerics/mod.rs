//! Minimal differentiable layer for the forecasting model: dense and sparse
//! products, ReLU, concatenation, dropout, row gathers and the MSLE loss,
//! recorded on a [`Tape`] and differentiated in reverse. [`adam_step`]
//! applies the optimizer update.

mod adam;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, add_l2_gradient, l2_penalty, AdamState, Param, ParamKind};
pub use sparse::CsrMatrix;
pub use tape::{msle_loss, Gradients, Mode, Tape, Var};
pub use tensor::{glorot_uniform, Tensor2};
