//! Global cosine loss with hard-mining gradient shrinking.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::cosine_distance;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Quantile of the batch distances below which points count as well restored.
    pub k_pct: f64,
    /// Gradient multiplier for well-restored points.
    pub shrink_factor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k_pct: 0.9,
            shrink_factor: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k_pct) {
            return Err(Error::Config(format!("k_pct {} outside [0, 1]", self.k_pct)));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor <= 1.0) {
            return Err(Error::Config(format!(
                "shrink_factor {} outside (0, 1]",
                self.shrink_factor
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation quantile (position `q (n - 1)` in sorted order).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// True where a distance is strictly below the batch's `k_pct` quantile.
pub fn hard_mining_select(distances: &[f64], k_pct: f64) -> Vec<bool> {
    if distances.is_empty() {
        return Vec::new();
    }
    let q = quantile(distances, k_pct);
    distances.iter().map(|&d| d < q).collect()
}

/// Row-wise cosine distances between two equally shaped matrices.
pub fn point_distances<T: Real>(teacher: ArrayView2<'_, T>, student: ArrayView2<'_, T>) -> Vec<f64> {
    teacher
        .rows()
        .into_iter()
        .zip(student.rows())
        .map(|(t, s)| cosine_distance(t, s))
        .collect()
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean of the per-sample losses.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of `loss` w.r.t. each student matrix, after shrinking.
    pub grads: Vec<Array2<T>>,
    pub masks: Vec<Vec<bool>>,
}

/// Mines the batch, then evaluates [`global_cosine_loss_masked`].
pub fn global_cosine_loss<T: Real>(
    teacher: &[ArrayView2<'_, T>],
    student: &[ArrayView2<'_, T>],
    config: &LossConfig,
) -> Result<LossOutput<T>> {
    config.validate()?;
    let dists: Vec<Vec<f64>> = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| point_distances(t.view(), s.view()))
        .collect();
    let flat: Vec<f64> = dists.iter().flatten().copied().collect();
    let mask_flat = hard_mining_select(&flat, config.k_pct);
    let mut masks = Vec::with_capacity(dists.len());
    let mut offset = 0;
    for d in &dists {
        masks.push(mask_flat[offset..offset + d.len()].to_vec());
        offset += d.len();
    }
    global_cosine_loss_masked(teacher, student, &masks, config.shrink_factor)
}

/// Cosine distance between each flattened teacher/student pair, averaged over
/// the batch. Rows flagged in `masks` have their gradient scaled by `shrink`;
/// the loss value itself is unaffected.
pub fn global_cosine_loss_masked<T: Real>(
    teacher: &[ArrayView2<'_, T>],
    student: &[ArrayView2<'_, T>],
    masks: &[Vec<bool>],
    shrink: f64,
) -> Result<LossOutput<T>> {
    if teacher.is_empty() || teacher.len() != student.len() || masks.len() != teacher.len() {
        return Err(Error::Config(
            "loss needs matching, non-empty teacher/student/mask lists".into(),
        ));
    }
    let b = teacher.len() as f64;
    let mut per_sample = Vec::with_capacity(teacher.len());
    let mut grads = Vec::with_capacity(teacher.len());
    for (i, (t, s)) in teacher.iter().zip(student).enumerate() {
        if t.dim() != s.dim() || masks[i].len() != t.nrows() {
            return Err(Error::Config(format!(
                "sample {i}: teacher {:?} vs student {:?}",
                t.dim(),
                s.dim()
            )));
        }
        let (mut ts, mut tt, mut ss) = (0.0_f64, 0.0_f64, 0.0_f64);
        for (&x, &y) in t.iter().zip(s.iter()) {
            let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
            ts += x * y;
            tt += x * x;
            ss += y * y;
        }
        if tt == 0.0 || ss == 0.0 {
            return Err(Error::Numeric(format!("sample {i} has a zero-norm feature vector")));
        }
        let (nt, ns) = (tt.sqrt(), ss.sqrt());
        per_sample.push(1.0 - ts / (nt * ns));
        // d/ds [1 - t.s/(|t||s|)] = -(t/(|t||s|) - (t.s) s/(|t||s|^3)), averaged over the batch.
        let a = -1.0 / (nt * ns * b);
        let c = ts / (nt * ns * ss * b);
        let mut g = Array2::<T>::zeros(t.dim());
        for (r, mut row) in g.rows_mut().into_iter().enumerate() {
            let f = if masks[i][r] { shrink } else { 1.0 };
            for (j, out) in row.iter_mut().enumerate() {
                let x = t[(r, j)].to_f64().unwrap();
                let y = s[(r, j)].to_f64().unwrap();
                *out = T::lit((a * x + c * y) * f);
            }
        }
        grads.push(g);
    }
    let loss = per_sample.iter().sum::<f64>() / b;
    Ok(LossOutput {
        loss,
        per_sample,
        grads,
        masks: masks.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quantile_example() {
        let d = [0.1, 0.2, 0.9, 1.0];
        assert!((quantile(&d, 0.5) - 0.55).abs() < 1e-15);
        assert_eq!(hard_mining_select(&d, 0.5), vec![true, true, false, false]);
        assert_eq!(hard_mining_select(&d, 0.0), vec![false; 4]);
        assert_eq!(hard_mining_select(&d, 1.0), vec![true, true, true, false]);
        assert_eq!(hard_mining_select(&[0.3; 5], 0.7), vec![false; 5]);
    }

    #[test]
    fn identical_inputs_give_zero_loss() {
        let t = array![[1.0, 2.0], [-0.5, 0.25], [3.0, 0.0]];
        let out = global_cosine_loss(&[t.view()], &[t.view()], &LossConfig::default()).unwrap();
        assert!(out.loss.abs() < 1e-12);
        let g = &out.grads[0];
        let dot: f64 = g.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_numeric_error() {
        let t = array![[1.0, 2.0]];
        let z = array![[0.0, 0.0]];
        let err = global_cosine_loss(&[t.view()], &[z.view()], &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn config_bounds() {
        assert!(LossConfig {
            k_pct: 1.5,
            shrink_factor: 0.1
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            k_pct: 0.5,
            shrink_factor: 0.0
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
