use ndarray::Array2;

use crate::tensor::Real;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu_backward<T: Real>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &xv| *d *= gelu_grad(xv));
    dx
}

/// `elu(x) + 1`, the positive feature map of linear attention.
#[inline]
pub fn elu_plus_one<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

#[inline]
pub fn elu_plus_one_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        // Phi(1) = 0.841344746..., Phi(-2) = 0.022750131...
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-2.0f64) + 2.0 * 0.022_750_131_948_179_2).abs() < 1e-15);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elu_kernel_is_positive_and_continuous() {
        for x in [-50.0f64, -3.0, -1e-9, 0.0, 1e-9, 2.0] {
            assert!(elu_plus_one(x) > 0.0);
        }
        assert!((elu_plus_one(1e-12f64) - elu_plus_one(-1e-12f64)).abs() < 1e-11);
        assert_eq!(elu_plus_one_grad(0.0f64), 1.0);
    }
}
