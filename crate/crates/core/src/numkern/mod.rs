//! Dense f32 numeric kernel: tensors, matmul, softmax, layer normalization,
//! GELU, a counter-based PRNG and an optional multiply-accumulate counter.
//!
//! Every reduction runs sequentially over the last axis, and transcendental
//! functions come from `libm` rather than the platform math library, so the
//! same inputs give the same bits on every platform.

mod counter;
mod dump;
mod ops;
mod prng;
mod tensor;

pub use counter::MacCounter;
pub use dump::{dump_tensor, load_tensor, TensorHeader};
pub use ops::{
    add, gelu, layernorm, matmul, matmul_sequential, scale, softmax_rows, transpose,
    LAYERNORM_EPS,
};
pub use prng::{Prng, Stream};
pub use tensor::Tensor;
