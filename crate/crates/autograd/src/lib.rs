//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every [`OpKind`] applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of every leaf created with [`Graph::variable`].
//!
//! ```
//! use spkguard_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.square(x).unwrap();
//! let loss = g.mean(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{backward as vjp, forward as eval_op, OpKind, STD_VARIANCE_FLOOR};
pub use tensor::Tensor;
