//! Scalar abstraction and the named parameter container shared by every
//! network in the crate.
//!
//! Networks run in `f32` for training and inference; gradient checks run the
//! very same code in `f64`.

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};
use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Ordered map of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn mat(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        let t = self.get(name)?;
        t.view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Validation(format!("tensor `{name}` is not rank 2")))
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        let t = self.get(name)?;
        t.view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Validation(format!("tensor `{name}` is not rank 1")))
    }

    pub fn mat_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, T>> {
        let t = self.get_mut(name)?;
        t.view_mut()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Validation(format!("tensor `{name}` is not rank 2")))
    }

    pub fn vector_mut(&mut self, name: &str) -> Result<ArrayViewMut1<'_, T>> {
        let t = self.get_mut(name)?;
        t.view_mut()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Validation(format!("tensor `{name}` is not rank 1")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Subset of tensors whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Element-wise `self += other`; both sets must hold the same names and shapes.
    pub fn add_assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::Validation(format!("shape mismatch for `{name}`")));
            }
            *dst += t;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap())))
                .collect(),
        }
    }

    /// Checks that every `(name, shape)` in `expected` is present with that shape.
    pub fn validate(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}
