//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! attention, normalisation and optimisation pieces the sign models use.
//!
//! ```
//! use signflow_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&g, x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod error;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Mask, Var};
pub use optim::{Adam, EmaState};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
