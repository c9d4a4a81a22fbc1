//! Binary PPM (P6) output. Axis 1 of a `(C, W, H)` tensor is written as
//! rows; single-channel images are replicated to grey.

use std::path::Path;

use shadowcert_core::Tensor;

use crate::error::{HarnessError, Result};

fn to_byte(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, rows, cols] = image.shape() else {
        return Err(HarnessError::invalid(format!(
            "PPM needs a (C, W, H) image, got {:?}",
            image.shape()
        )));
    };
    if !(c == 1 || c == 3) {
        return Err(HarnessError::invalid(format!(
            "PPM needs 1 or 3 channels, got {c}"
        )));
    }
    let plane = rows * cols;
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    let d = image.data();
    for k in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(d[(ch % c) * plane + k]));
        }
    }
    Ok(out)
}

pub fn write(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

/// Perturbation shifted by +0.5 so that zero renders mid-grey.
pub fn perturbation_view(delta: &Tensor) -> Tensor {
    Tensor::new(
        delta.shape().to_vec(),
        delta.data().iter().map(|v| v + 0.5).collect(),
    )
    .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_pixels() {
        let img = Tensor::new(vec![3, 1, 2], vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let bytes = encode(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 128, 0]);
    }

    #[test]
    fn grey_and_perturbation_mapping() {
        let d = Tensor::new(vec![1, 1, 2], vec![0.0, -0.5]).unwrap();
        let bytes = encode(&perturbation_view(&d)).unwrap();
        assert_eq!(&bytes[11..], &[128, 128, 128, 0, 0, 0]);
        assert!(encode(&Tensor::zeros(vec![2, 2, 2])).is_err());
    }
}
