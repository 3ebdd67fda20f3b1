//! Differentiable primitives, implemented as methods on [`Graph`](crate::graph::Graph).

mod channels;
mod conv;
mod elementwise;
mod loss;
mod reduce;

pub use conv::conv2d_tensor;
pub use loss::{LossMode, CHARBONNIER_EPS};
