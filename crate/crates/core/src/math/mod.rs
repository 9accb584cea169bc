pub mod checkpoint;
pub mod finite_diff;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
