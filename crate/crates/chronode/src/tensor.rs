//! Dense numeric arrays in row-major order.
//!
//! All values are stored as `f64`. [`Precision::F32`] is a speed/storage mode
//! in which every recorded operation rounds its result through `f32`;
//! verification suites always run in [`Precision::F64`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric precision mode for tape computation and checkpoint payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Round a value to this precision. `F64` is the identity.
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

/// Dense array: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec".into(),
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix with `rows * cols` entries.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "item() requires a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.into(),
            })
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn require_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context: context.into(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            })
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "Tensor::add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "Tensor::sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "Tensor::mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    /// `self + c * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor, c: f64) -> Result<Tensor> {
        self.require_same_shape(other, "Tensor::add_scaled")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + c * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, other: &Tensor, c: f64) -> Result<()> {
        self.require_same_shape(other, "Tensor::axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.require_same_shape(other, "Tensor::dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Unit-norm copy; zero vectors are degenerate and rejected.
    pub fn l2_normalized(&self) -> Result<Tensor> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x / norm).collect(),
        })
    }

    /// Round every entry through the given precision.
    pub fn quantized(mut self, precision: Precision) -> Tensor {
        if precision == Precision::F32 {
            for x in &mut self.data {
                *x = *x as f32 as f64;
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_shape_data_mismatch() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn arithmetic_roundtrip() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, -1.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 1.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-2.0, 3.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, -2.0]);
        assert_eq!(a.add_scaled(&b, 2.0).unwrap().data(), &[7.0, 0.0]);
        assert_eq!(a.dot(&b).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn finite_check() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(t.check_finite("test").is_err());
        assert!(Tensor::vector(vec![1.0]).check_finite("test").is_ok());
    }

    #[test]
    fn f32_quantization_rounds() {
        let x = 0.1f64 + 1e-12;
        assert_eq!(Precision::F32.quantize(x), x as f32 as f64);
        assert_eq!(Precision::F64.quantize(x), x);
    }
}
