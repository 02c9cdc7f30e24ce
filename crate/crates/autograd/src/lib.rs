//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are recorded dynamically as operations run. [`grad`] walks the
//! recorded graph backwards; passing `create_graph = true` records the
//! backward pass as well, which gives gradients of gradients for the
//! operations whose rules are written in tensor form (everything except the
//! convolution and pooling kernels).
//!
//! ```
//! use aikd_autograd::{grad, Tensor};
//!
//! let x = Tensor::leaf(ndarray::arr1(&[1.0, 2.0]).into_dyn());
//! let y = x.square().sum();
//! let g = grad(&y, &[&x], true).unwrap();
//! assert_eq!(g[0].to_vec(), vec![2.0, 4.0]);
//! let gg = grad(&g[0].sum(), &[&x], false).unwrap();
//! assert_eq!(gg[0].to_vec(), vec![2.0, 2.0]);
//! ```

mod conv;
mod error;
mod grad;
mod ops;
mod tensor;

pub use error::{AutogradError, Result};
pub use grad::grad;
pub use ops::max_keepdim;
pub use tensor::{enable_grad, is_grad_enabled, no_grad, Array, GradModeGuard, Tensor};
