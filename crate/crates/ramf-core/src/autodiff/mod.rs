//! Dense-tensor computation with reverse-mode gradients.
//!
//! [`Tensor`] is a plain value type (shape + row-major f64 storage). A
//! [`Graph`] is a single-use tape: operations are evaluated eagerly as nodes
//! are appended, and [`Graph::backward`] walks the tape in reverse to fill
//! per-node gradients. [`Parameter`] couples a value with its gradient and
//! momentum buffers; [`sgd_step_with_schedule`] applies one cosine-annealed
//! momentum-SGD update. [`grad_check`] verifies any graph-built scalar
//! function against central finite differences.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{softmax_rows, Graph, Var};
pub use optim::{sgd_step_with_schedule, ParamId, Parameter, Schedule};
pub use tensor::Tensor;
