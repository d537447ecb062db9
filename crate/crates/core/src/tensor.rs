//! Dense row-major tensor.
//!
//! Shape conventions used across the crate:
//! - images and probability maps are channel-planar `[C, H, W]` (images have C = 1),
//! - coordinate grids and displacement/velocity fields are `[2, H, W]`
//!   (plane 0 = horizontal u component, plane 1 = vertical v component),
//! - affine parameter vectors are `[5]`, homogeneous matrix rows `[6]`,
//! - scalars are `[1]`, conv weights `[Cout, Cin, k, k]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single scalar value of a `[1]` tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    /// Interpret as `[C, H, W]`; errors when the rank is not 3.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            d => Err(Error::shape(format!("expected [C,H,W] tensor, got {:?}", d))),
        }
    }

    pub fn l2_norm(&self) -> S {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(S::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |a, &b| if b.abs() > a { b.abs() } else { a })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    /// Convert element-wise between scalar types (used to run the same
    /// fixture at both precisions).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::c(v.to_f64_lossy())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn l2_norm_matches_hand_value() {
        let t = Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap();
        assert!((t.l2_norm() - 5.0).abs() < 1e-12);
    }
}
