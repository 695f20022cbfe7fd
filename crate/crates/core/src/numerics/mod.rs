//! Dense f64 arrays, the kernels the model needs, and a reverse-mode tape.

pub mod gradcheck;
mod mask;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use mask::SeqMask;
pub use ops::{count_flops, gelu, matmul, rmsnorm, rope, softmax_lastdim, KeyMask};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor3;
