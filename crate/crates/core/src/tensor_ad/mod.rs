//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    check_primitives, compare_with_differences, gradient_check, relative_error, GradCheckReport,
    DEFAULT_STEP,
};
pub use graph::{Graph, RowIndex, Var, LAYER_NORM_EPS};
pub use tensor::{Real, Tensor};
