//! Minimal differentiable-computation substrate: dense tensors, a dynamic
//! reverse-mode tape, the Adam optimizer and the NTF1 tensor file format.
//!
//! The tape is rebuilt on every forward pass (no graph compilation). Ops are
//! the closure over what the networks in this crate need: dense layers, 3x3
//! convolutions, up/grid sampling, group normalization, pointwise
//! nonlinearities and reductions. Training runs in f32; gradient checking
//! instantiates the same code in f64.

mod adam;
mod gradcheck;
mod ntf;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{finite_diff_gradients, max_grad_error, max_rel_error, rel_error};
pub use ntf::{read_ntf, read_ntf_f32, write_ntf, NtfError};
pub use params::{Gradients, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Dtype, Element, Tensor};
