use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Flat real-valued array with shape metadata.
///
/// Every sample, noise draw, moment and mask in the crate travels as a `Field`.
/// Construction checks that the shape matches the data length and that every
/// entry is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Field {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err("field data length", expected, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field entry {i}")));
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional field.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![value; n],
            shape: shape.to_vec(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a different shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(self.data, shape)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    /// Element-wise combination of two fields of identical shape.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Self::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            self.shape.clone(),
        )
    }

    pub fn check_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "field shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Field::new(vec![1.0, 2.0, 3.0], vec![2, 2]).is_err());
        assert!(Field::new(vec![1.0; 4], vec![2, 2]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Field::from_vec(vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Field::from_vec(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn zip_map_requires_same_shape() {
        let a = Field::zeros(&[2, 2]);
        let b = Field::zeros(&[4]);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
        let c = a.zip_map(&Field::filled(&[2, 2], 1.5), |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[1.5; 4]);
    }
}
