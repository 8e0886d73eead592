//! Dense 2-D tensors, a define-by-run reverse-mode tape and the Adam optimizer.

mod params;
mod tape;
mod tensor;

pub use params::{AdamState, Param, ParamId, ParamStore};
pub use tape::{elu, sigmoid, Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
