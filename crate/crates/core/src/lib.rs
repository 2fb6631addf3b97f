//! Lambda layers: tensor contractions, relative position embeddings, the
//! lambda layer and its variants, hand-derived gradients, cost models and
//! the verification suites behind the `lambdakit` command line tool.

pub mod baselines;
pub mod bench;
pub mod complexity;
pub mod conv;
pub mod error;
pub mod grad;
pub mod layer;
pub mod oracle;
pub mod relpos;
pub mod rng;
pub mod scalar;
pub mod suites;
pub mod tensor;
pub mod toy;
pub mod variants;

pub use error::{LambdaError, Result};
pub use layer::{lambda_layer_forward, LambdaConfig, LambdaParams};
pub use relpos::{Boundary, Geometry};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
