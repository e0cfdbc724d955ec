use ndarray::Array2;

use super::activation::{gelu, gelu_backward};
use super::attention::{attention_backward, attention_forward, AttentionCache, AttentionKind};
use super::linear::{linear_backward, linear_forward, linear_param_shapes};
use super::norm::{layer_norm_backward, layer_norm_forward, norm_param_shapes, LayerNormCache};
use crate::error::Result;
use crate::tensor::{ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub attention: AttentionKind,
}

pub fn block_param_shapes(prefix: &str, d: &BlockDims) -> Vec<(String, Vec<usize>)> {
    let mut v = norm_param_shapes(&format!("{prefix}.norm1"), d.dim);
    v.extend(linear_param_shapes(&format!("{prefix}.attn.qkv"), d.dim, 3 * d.dim));
    v.extend(linear_param_shapes(&format!("{prefix}.attn.proj"), d.dim, d.dim));
    v.extend(norm_param_shapes(&format!("{prefix}.norm2"), d.dim));
    v.extend(linear_param_shapes(&format!("{prefix}.mlp.fc1"), d.dim, d.mlp_hidden));
    v.extend(linear_param_shapes(&format!("{prefix}.mlp.fc2"), d.mlp_hidden, d.dim));
    v
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    norm1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    norm2: LayerNormCache<T>,
    mlp_in: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

/// Pre-norm transformer block:
/// `x1 = x + attn(norm1(x))`, `y = x1 + fc2(gelu(fc1(norm2(x1))))`.
pub fn block_forward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    x: &Array2<T>,
    d: &BlockDims,
) -> Result<(Array2<T>, BlockCache<T>)> {
    let (a_in, norm1) = layer_norm_forward(params, &format!("{prefix}.norm1"), x)?;
    let (a_out, attn) = attention_forward(params, &format!("{prefix}.attn"), &a_in, d.heads, d.attention)?;
    let x1 = x + &a_out;
    let (mlp_in, norm2) = layer_norm_forward(params, &format!("{prefix}.norm2"), &x1)?;
    let hidden_pre = linear_forward(params, &format!("{prefix}.mlp.fc1"), &mlp_in)?;
    let hidden = hidden_pre.mapv(gelu);
    let m_out = linear_forward(params, &format!("{prefix}.mlp.fc2"), &hidden)?;
    let y = x1 + &m_out;
    Ok((
        y,
        BlockCache {
            norm1,
            attn,
            norm2,
            mlp_in,
            hidden_pre,
            hidden,
        },
    ))
}

pub fn block_backward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    cache: &BlockCache<T>,
    dy: &Array2<T>,
    grads: &mut ParamSet<T>,
) -> Result<Array2<T>> {
    let d_hidden = linear_backward(params, &format!("{prefix}.mlp.fc2"), &cache.hidden, dy, grads)?;
    let d_pre = gelu_backward(&cache.hidden_pre, &d_hidden);
    let d_mlp_in = linear_backward(params, &format!("{prefix}.mlp.fc1"), &cache.mlp_in, &d_pre, grads)?;
    let mut dx1 = layer_norm_backward(params, &format!("{prefix}.norm2"), &cache.norm2, &d_mlp_in, grads)?;
    dx1 += dy;
    let d_a_in = attention_backward(params, &format!("{prefix}.attn"), &cache.attn, &dx1, grads)?;
    let mut dx = layer_norm_backward(params, &format!("{prefix}.norm1"), &cache.norm1, &d_a_in, grads)?;
    dx += &dx1;
    Ok(dx)
}
