//! The shared text encoder.
//!
//! [`TextEncoder`] is the seam between the encoder and everything above it:
//! multi-task heads and training only see pooled vectors, a parameter tree and
//! a backward pass, so a different encoder can be dropped in without touching
//! them. [`TransformerEncoder`] is the built-in implementation.

mod gradcheck;
pub mod ops;
mod params;
mod transformer;

use ndarray::Array2;

pub use gradcheck::{finite_difference_check, GradCheck};
pub(crate) use params::xavier as params_xavier;
pub use params::{EncoderConfig, EncoderParams, LayerNormParams, LayerParams, Pooling};
pub use transformer::{ForwardCache, TransformerEncoder};

use crate::error::Result;
use crate::params::ParamTree;
use crate::tokenization::Batch;

/// Whether dropout is active. `seed` identifies the step so that dropout
/// masks are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

pub trait TextEncoder: Clone + Send + Sync {
    type Params: ParamTree + Clone + Send + Sync;
    type Cache: Default + Send + Sync;

    /// Width of the pooled output.
    fn dim(&self) -> usize;

    fn max_seq_len(&self) -> usize;

    fn params(&self) -> &Self::Params;

    fn params_mut(&mut self) -> &mut Self::Params;

    /// A gradient tree of zeros congruent with [`TextEncoder::params`].
    fn zero_grads(&self) -> Self::Params;

    /// Pooled B×dim output plus the activations needed by `backward`.
    fn forward(&self, batch: &Batch, mode: Mode) -> Result<(Array2<f64>, Self::Cache)>;

    /// Gradients of `sum(upstream ⊙ pooled)` with respect to every parameter.
    fn backward(&self, cache: &Self::Cache, upstream: &Array2<f64>) -> Result<Self::Params>;

    /// Eval-mode pooled output.
    fn encode_batch(&self, batch: &Batch) -> Result<Array2<f64>> {
        Ok(self.forward(batch, Mode::Eval)?.0)
    }
}
