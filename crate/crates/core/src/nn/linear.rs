use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real};

/// `(name, shape)` pairs for a linear layer: weight `[in, out]`, bias `[out]`.
pub fn linear_param_shapes(prefix: &str, input: usize, output: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.weight"), vec![input, output]),
        (format!("{prefix}.bias"), vec![output]),
    ]
}

/// `y = x W + b`.
pub fn linear_forward<T: Real>(params: &ParamSet<T>, prefix: &str, x: &Array2<T>) -> Result<Array2<T>> {
    let w = params.mat(&format!("{prefix}.weight"))?;
    let b = params.vector(&format!("{prefix}.bias"))?;
    if x.ncols() != w.nrows() {
        return Err(Error::Config(format!(
            "{prefix}: input has {} channels, weight expects {}",
            x.ncols(),
            w.nrows()
        )));
    }
    let mut y = x.dot(&w);
    y += &b;
    Ok(y)
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
pub fn linear_backward<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    x: &Array2<T>,
    dy: &Array2<T>,
    grads: &mut ParamSet<T>,
) -> Result<Array2<T>> {
    let wname = format!("{prefix}.weight");
    let bname = format!("{prefix}.bias");
    {
        let mut gw = grads.mat_mut(&wname)?;
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut gw);
    }
    {
        let mut gb = grads.vector_mut(&bname)?;
        gb += &dy.sum_axis(Axis(0));
    }
    let w = params.mat(&wname)?;
    Ok(dy.dot(&w.t()))
}
