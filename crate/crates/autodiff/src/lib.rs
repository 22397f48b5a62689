//! Dense `f64` tensors, a reverse-mode differentiation tape, and AdamW.
//!
//! ```
//! use gwnet_autodiff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
//! let y = x.square().sum();
//! g.backward(y).unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, grad_pairs_params, rel_err};
pub use graph::{Graph, Var};
pub use optim::{AdamW, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
