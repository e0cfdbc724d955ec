use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::activation::{elu_plus_one, elu_plus_one_grad};
use super::ensure_finite;
use super::linear::{linear_backward, linear_forward};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Softmax,
    Linear,
}

#[derive(Debug, Clone)]
enum HeadCache<T> {
    /// Attention probabilities.
    Softmax { probs: Array2<T> },
    /// Kernel features of queries/keys and the key-value summaries.
    Linear {
        phi_q: Array2<T>,
        phi_k: Array2<T>,
        kv: Array2<T>,
        ksum: Array1<T>,
        den: Array1<T>,
    },
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Array2<T>,
    qkv: Array2<T>,
    heads: Vec<HeadCache<T>>,
    merged: Array2<T>,
}

/// Multi-head attention over `tokens x dim`. Parameters: `{prefix}.qkv`
/// (`dim -> 3 dim`) and `{prefix}.proj` (`dim -> dim`).
///
/// `Linear` uses the kernel `phi = elu + 1`:
/// `out_i = phi(q_i)ᵀ Σ_j phi(k_j) v_jᵀ / phi(q_i)ᵀ Σ_j phi(k_j)`.
pub fn attention_forward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    x: &Array2<T>,
    heads: usize,
    kind: AttentionKind,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    let (n, dim) = x.dim();
    if n == 0 {
        return Err(Error::Config("attention needs at least one token".into()));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let qkv = linear_forward(params, &format!("{prefix}.qkv"), x)?;
    let mut merged = Array2::zeros((n, dim));
    let mut head_caches = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
        let mut out = merged.slice_mut(s![.., h * dh..(h + 1) * dh]);
        match kind {
            AttentionKind::Softmax => {
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut probs = q.dot(&k.t());
                for mut row in probs.rows_mut() {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    row.mapv_inplace(|s| ((s - m) * scale).exp());
                    let z = row.sum();
                    row.mapv_inplace(|p| p / z);
                }
                out.assign(&probs.dot(&v));
                head_caches.push(HeadCache::Softmax { probs });
            }
            AttentionKind::Linear => {
                let phi_q = q.mapv(elu_plus_one);
                let phi_k = k.mapv(elu_plus_one);
                let kv = phi_k.t().dot(&v);
                let ksum = phi_k.sum_axis(Axis(0));
                let den = phi_q.dot(&ksum);
                let num = phi_q.dot(&kv);
                out.assign(&(&num / &den.view().insert_axis(Axis(1))));
                head_caches.push(HeadCache::Linear {
                    phi_q,
                    phi_k,
                    kv,
                    ksum,
                    den,
                });
            }
        }
    }
    ensure_finite(&merged, prefix)?;
    let y = linear_forward(params, &format!("{prefix}.proj"), &merged)?;
    Ok((
        y,
        AttentionCache {
            input: x.clone(),
            qkv,
            heads: head_caches,
            merged,
        },
    ))
}

pub fn attention_backward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    cache: &AttentionCache<T>,
    dy: &Array2<T>,
    grads: &mut ParamSet<T>,
) -> Result<Array2<T>> {
    let d_merged = linear_backward(params, &format!("{prefix}.proj"), &cache.merged, dy, grads)?;
    let (n, dim) = cache.merged.dim();
    let heads = cache.heads.len();
    let dh = dim / heads;
    let mut d_qkv = Array2::zeros((n, 3 * dim));
    for (h, hc) in cache.heads.iter().enumerate() {
        let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = cache.qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
        let v = cache.qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
        let d_out = d_merged.slice(s![.., h * dh..(h + 1) * dh]);
        let (dq, dk, dv) = match hc {
            HeadCache::Softmax { probs } => {
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let dv = probs.t().dot(&d_out);
                let mut ds = d_out.dot(&v.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
                    let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    drow.zip_mut_with(&prow, |d, &p| *d = p * (*d - dot) * scale);
                }
                (ds.dot(&k), ds.t().dot(&q), dv)
            }
            HeadCache::Linear {
                phi_q,
                phi_k,
                kv,
                ksum,
                den,
            } => {
                let den_col = den.view().insert_axis(Axis(1));
                let d_num = &d_out / &den_col;
                let out = phi_q.dot(kv) / den_col;
                let d_den: Array1<T> = (&d_out * &out).sum_axis(Axis(1)) / den * (-T::one());
                let mut d_phi_q = d_num.dot(&kv.t());
                for (mut row, &dd) in d_phi_q.rows_mut().into_iter().zip(d_den.iter()) {
                    row.zip_mut_with(ksum, |a, &z| *a += dd * z);
                }
                let d_kv = phi_q.t().dot(&d_num);
                let d_ksum = phi_q.t().dot(&d_den);
                let mut d_phi_k = v.dot(&d_kv.t());
                for mut row in d_phi_k.rows_mut() {
                    row += &d_ksum;
                }
                let dv = phi_k.dot(&d_kv);
                let mut dq = d_phi_q;
                dq.zip_mut_with(&q, |d, &x| *d *= elu_plus_one_grad(x));
                let mut dk = d_phi_k;
                dk.zip_mut_with(&k, |d, &x| *d *= elu_plus_one_grad(x));
                (dq, dk, dv)
            }
        };
        d_qkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
        d_qkv.slice_mut(s![.., dim + h * dh..dim + (h + 1) * dh]).assign(&dk);
        d_qkv
            .slice_mut(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh])
            .assign(&dv);
    }
    linear_backward(params, &format!("{prefix}.qkv"), &cache.input, &d_qkv, grads)
}
