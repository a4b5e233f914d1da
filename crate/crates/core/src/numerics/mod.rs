//! Tensor engine: dense arrays, a differentiation tape, and AdamW.

mod attention;
pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use attention::{AttentionMask, AttnSegment};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
