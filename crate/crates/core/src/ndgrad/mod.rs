//! Dense tensors, a reverse-mode tape and an Adam optimizer.

mod adam;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Real, Tensor};
