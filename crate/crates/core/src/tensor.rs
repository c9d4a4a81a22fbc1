//! Shape-tagged dense `f32` storage.

use crate::error::{Error, Result};

/// Row-major dense array of `f32` with rank at most 4.
///
/// Images are rank-3 tensors laid out as `(channels, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub const MAX_RANK: usize = 4;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::invalid(format!(
                "rank {} exceeds the maximum of {MAX_RANK}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn vector(values: &[f32]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks the image invariants: rank 3, one or three channels, finite values.
    pub fn check_image(&self) -> Result<()> {
        match self.shape.as_slice() {
            [c, w, h] if (*c == 1 || *c == 3) && *w > 0 && *h > 0 => {}
            _ => {
                return Err(Error::invalid(format!(
                    "image tensors must have shape (C, W, H) with C in {{1, 3}}, got {:?}",
                    self.shape
                )))
            }
        }
        if !self.is_finite() {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(())
    }

    /// Elementwise clamp into `[lo, hi]`.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn image_checks() {
        assert!(Tensor::zeros(vec![3, 4, 4]).check_image().is_ok());
        assert!(Tensor::zeros(vec![2, 4, 4]).check_image().is_err());
        assert!(Tensor::zeros(vec![48]).check_image().is_err());
        let mut t = Tensor::zeros(vec![1, 2, 2]);
        t.data_mut()[1] = f32::NAN;
        assert!(t.check_image().is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 5]), 0);
    }
}
