//! Dense `f64` linear algebra with hand-written backward passes.

mod adam;
pub mod gradcheck;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use ops::{
    cross_entropy, linear, linear_backward, mlp2, normalize, normalize_backward,
    softmax_cross_entropy, softmax_with_temperature, Mlp2, Mlp2Trace, SoftmaxCrossEntropy,
};
pub use tensor::{axpy, dot, l2_norm, Matrix, ParamTensor};
