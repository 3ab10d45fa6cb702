//! Dense tensors and reverse-mode differentiation over the fixed operator
//! set used by the encoder, projector, contrastive loss and classifier.

mod gradcheck;
mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use gradcheck::{gradcheck, GradCheck, GRADCHECK_EPS};
pub use graph::{Gradients, Graph, Var};
pub use ops::Padding;
pub use scalar::Scalar;
pub use tensor::Tensor;
