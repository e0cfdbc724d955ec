//! Dense layers with hand-written reverse-mode gradients.
//!
//! Every forward returns its output together with a cache record; the matching
//! backward consumes that record, accumulates parameter gradients into a
//! [`ParamSet`](crate::tensor::ParamSet) keyed by the same names, and returns
//! the gradient with respect to its input.

mod activation;
mod attention;
mod block;
mod linear;
mod norm;
mod patch;

pub use activation::{elu_plus_one, elu_plus_one_grad, gelu, gelu_backward, gelu_grad};
pub use attention::{attention_backward, attention_forward, AttentionCache, AttentionKind};
pub use block::{block_backward, block_forward, block_param_shapes, BlockCache, BlockDims};
pub use linear::{linear_backward, linear_forward, linear_param_shapes};
pub use norm::{layer_norm_backward, layer_norm_forward, norm_param_shapes, LayerNormCache, LN_EPS};
pub use patch::{patch_embed_backward, patch_embed_forward, patchify, PatchEmbedCache};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::Real;

pub(crate) fn ensure_finite<T: Real>(x: &Array2<T>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}
