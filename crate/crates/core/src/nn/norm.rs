use ndarray::{Array1, Array2, Axis};

use crate::error::Result;
use crate::tensor::{ParamSet, Real};

pub const LN_EPS: f64 = 1e-6;

pub fn norm_param_shapes(prefix: &str, dim: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.weight"), vec![dim]),
        (format!("{prefix}.bias"), vec![dim]),
    ]
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

/// Layer norm over the channel axis of a `tokens x channels` matrix.
pub fn layer_norm_forward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    x: &Array2<T>,
) -> Result<(Array2<T>, LayerNormCache<T>)> {
    let gamma = params.vector(&format!("{prefix}.weight"))?;
    let beta = params.vector(&format!("{prefix}.bias"))?;
    let c = T::from_usize(x.ncols()).unwrap();
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / c;
        *r = T::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    Ok((y, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm_backward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    cache: &LayerNormCache<T>,
    dy: &Array2<T>,
    grads: &mut ParamSet<T>,
) -> Result<Array2<T>> {
    let gname = format!("{prefix}.weight");
    let bname = format!("{prefix}.bias");
    {
        let mut gg = grads.vector_mut(&gname)?;
        gg += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut gb = grads.vector_mut(&bname)?;
        gb += &dy.sum_axis(Axis(0));
    }
    let gamma = params.vector(&gname)?;
    let c = T::from_usize(dy.ncols()).unwrap();
    let mut dx = dy * &gamma;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / c;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&d, &h)| d * h).sum::<T>() / c;
        row.zip_mut_with(&xh, |d, &h| *d = r * (*d - mean_d - h * mean_dx));
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ArrayD, IxDyn};

    #[test]
    fn normalizes_each_row() {
        let mut p = ParamSet::new();
        p.insert("n.weight", ArrayD::from_elem(IxDyn(&[4]), 2.0));
        p.insert("n.bias", ArrayD::from_elem(IxDyn(&[4]), 1.0));
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]];
        let (y, _) = layer_norm_forward(&p, "n", &x).unwrap();
        // Row 0 has mean 2.5 and variance 1.25.
        let r = 1.0 / (1.25f64 + LN_EPS).sqrt();
        for (j, v) in [-1.5, -0.5, 0.5, 1.5].iter().enumerate() {
            assert!((y[(0, j)] - (1.0 + 2.0 * v * r)).abs() < 1e-12);
        }
        assert!(y.row(1).iter().all(|&v| v == 1.0));
    }
}
