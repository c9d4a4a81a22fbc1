//! Perceptibility penalties on an image-shaped perturbation `(C, W, H)`.
//!
//! The slice kernels add `scale * gradient` into an optional buffer so the
//! attack loop can accumulate the whole objective in one pass.

use super::ChannelMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorPenalty {
    /// Sum over channels of the squared mean absolute perturbation.
    MeanAbs,
    /// Euclidean norm of the whole perturbation.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TvVariant {
    /// Sum of squared anisotropic forward differences.
    #[default]
    SquaredDifferences,
    /// Square of the total anisotropic variation.
    SquaredTotal,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn tv(
    d: &[f64],
    shape: [usize; 3],
    variant: TvVariant,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let [c, w, h] = shape;
    match variant {
        TvVariant::SquaredDifferences => {
            let mut total = 0.0;
            let mut grad = grad;
            for ch in 0..c {
                let base = ch * w * h;
                for i in 0..w {
                    for j in 0..h {
                        let k = base + i * h + j;
                        if i + 1 < w {
                            let diff = d[k + h] - d[k];
                            total += diff * diff;
                            if let Some((g, s)) = grad.as_mut() {
                                g[k + h] += 2.0 * *s * diff;
                                g[k] -= 2.0 * *s * diff;
                            }
                        }
                        if j + 1 < h {
                            let diff = d[k + 1] - d[k];
                            total += diff * diff;
                            if let Some((g, s)) = grad.as_mut() {
                                g[k + 1] += 2.0 * *s * diff;
                                g[k] -= 2.0 * *s * diff;
                            }
                        }
                    }
                }
            }
            total
        }
        TvVariant::SquaredTotal => {
            let mut t = 0.0;
            for ch in 0..c {
                let base = ch * w * h;
                for i in 0..w {
                    for j in 0..h {
                        let k = base + i * h + j;
                        if i + 1 < w {
                            t += (d[k + h] - d[k]).abs();
                        }
                        if j + 1 < h {
                            t += (d[k + 1] - d[k]).abs();
                        }
                    }
                }
            }
            if let Some((g, s)) = grad {
                let coef = 2.0 * s * t;
                for ch in 0..c {
                    let base = ch * w * h;
                    for i in 0..w {
                        for j in 0..h {
                            let k = base + i * h + j;
                            if i + 1 < w {
                                let sg = sign(d[k + h] - d[k]);
                                g[k + h] += coef * sg;
                                g[k] -= coef * sg;
                            }
                            if j + 1 < h {
                                let sg = sign(d[k + 1] - d[k]);
                                g[k + 1] += coef * sg;
                                g[k] -= coef * sg;
                            }
                        }
                    }
                }
            }
            t * t
        }
    }
}

pub(crate) fn color(
    d: &[f64],
    shape: [usize; 3],
    variant: ColorPenalty,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let [c, w, h] = shape;
    let plane = w * h;
    match variant {
        ColorPenalty::MeanAbs => {
            let means: Vec<f64> = (0..c)
                .map(|ch| {
                    d[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| v.abs())
                        .sum::<f64>()
                        / plane as f64
                })
                .collect();
            if let Some((g, s)) = grad {
                for ch in 0..c {
                    let coef = 2.0 * s * means[ch] / plane as f64;
                    for k in ch * plane..(ch + 1) * plane {
                        g[k] += coef * sign(d[k]);
                    }
                }
            }
            means.iter().map(|m| m * m).sum()
        }
        ColorPenalty::L2 => {
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if let Some((g, s)) = grad {
                if norm > 0.0 {
                    for (gk, v) in g.iter_mut().zip(d) {
                        *gk += s * v / norm;
                    }
                }
            }
            norm
        }
    }
}

pub(crate) fn dissim(
    d: &[f64],
    shape: [usize; 3],
    mode: ChannelMode,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let [c, w, h] = shape;
    if mode == ChannelMode::OneChannel || c != 3 {
        return 0.0;
    }
    let plane = w * h;
    let (r, gr, b) = (&d[..plane], &d[plane..2 * plane], &d[2 * plane..]);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let s_rg = sq(r, gr);
    let s_rb = sq(r, b);
    let s_gb = sq(gr, b);
    let norm = (s_rg * s_rg + s_rb * s_rb + s_gb * s_gb).sqrt();
    if let Some((g, s)) = grad {
        if norm > 0.0 {
            let (a_rg, a_rb, a_gb) = (s * s_rg / norm, s * s_rb / norm, s * s_gb / norm);
            for k in 0..plane {
                let (vr, vg, vb) = (r[k], gr[k], b[k]);
                g[k] += 2.0 * (a_rg * (vr - vg) + a_rb * (vr - vb));
                g[plane + k] += 2.0 * (-a_rg * (vr - vg) + a_gb * (vg - vb));
                g[2 * plane + k] += 2.0 * (-a_rb * (vr - vb) - a_gb * (vg - vb));
            }
        }
    }
    norm
}

fn image_shape(delta: &Tensor) -> Result<[usize; 3]> {
    match delta.shape() {
        &[c, w, h] => Ok([c, w, h]),
        other => Err(Error::invalid(format!(
            "penalties take a (C, W, H) perturbation, got {other:?}"
        ))),
    }
}

fn with_grad(
    delta: &Tensor,
    f: impl FnOnce(&[f64], [usize; 3], Option<(&mut [f64], f64)>) -> f64,
) -> Result<(f64, Tensor)> {
    let shape = image_shape(delta)?;
    let d = delta.to_f64();
    let mut g = vec![0.0; d.len()];
    let v = f(&d, shape, Some((&mut g, 1.0)));
    Ok((v, Tensor::from_f64(delta.shape().to_vec(), &g)?))
}

/// Sum of squared anisotropic forward differences over every channel.
pub fn tv_penalty(delta: &Tensor) -> Result<f64> {
    let shape = image_shape(delta)?;
    Ok(tv(
        &delta.to_f64(),
        shape,
        TvVariant::SquaredDifferences,
        None,
    ))
}

pub fn tv_penalty_variant(delta: &Tensor, variant: TvVariant) -> Result<f64> {
    let shape = image_shape(delta)?;
    Ok(tv(&delta.to_f64(), shape, variant, None))
}

pub fn tv_penalty_grad(delta: &Tensor, variant: TvVariant) -> Result<(f64, Tensor)> {
    with_grad(delta, |d, s, g| tv(d, s, variant, g))
}

pub fn color_penalty(delta: &Tensor, variant: ColorPenalty) -> Result<f64> {
    let shape = image_shape(delta)?;
    Ok(color(&delta.to_f64(), shape, variant, None))
}

pub fn color_penalty_grad(delta: &Tensor, variant: ColorPenalty) -> Result<(f64, Tensor)> {
    with_grad(delta, |d, s, g| color(d, s, variant, g))
}

/// `||(s_RG, s_RB, s_GB)||_2` with `s_ab = sum over pixels of (d_a - d_b)^2`;
/// identically zero in one-channel mode.
pub fn dissim_penalty(delta: &Tensor, mode: ChannelMode) -> Result<f64> {
    let shape = image_shape(delta)?;
    Ok(dissim(&delta.to_f64(), shape, mode, None))
}

pub fn dissim_penalty_grad(delta: &Tensor, mode: ChannelMode) -> Result<(f64, Tensor)> {
    with_grad(delta, |d, s, g| dissim(d, s, mode, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn tv_of_constant_is_zero() {
        let d = Tensor::from_fn(vec![3, 4, 5], |_| 0.7);
        assert_eq!(tv_penalty(&d).unwrap(), 0.0);
    }

    #[test]
    fn tv_small_cases() {
        assert_eq!(
            tv_penalty(&t(vec![1, 2, 2], &[0.0, 1.0, 0.0, 1.0])).unwrap(),
            2.0
        );
        let mut v = [0.0f32; 9];
        v[4] = 1.0;
        assert_eq!(tv_penalty(&t(vec![1, 3, 3], &v)).unwrap(), 4.0);
        // Squared total: |d| sum is 4, squared 16.
        assert_eq!(
            tv_penalty_variant(&t(vec![1, 3, 3], &v), TvVariant::SquaredTotal).unwrap(),
            16.0
        );
    }

    #[test]
    fn color_cases() {
        let zero = Tensor::zeros(vec![3, 2, 2]);
        assert_eq!(color_penalty(&zero, ColorPenalty::MeanAbs).unwrap(), 0.0);
        assert_eq!(color_penalty(&zero, ColorPenalty::L2).unwrap(), 0.0);
        let d = Tensor::from_fn(vec![3, 2, 2], |i| [0.1, 0.2, -0.2][i / 4]);
        assert!((color_penalty(&d, ColorPenalty::MeanAbs).unwrap() - 0.09).abs() < 1e-7);
        let mut v = [0.0f32; 12];
        v[3] = 3.0;
        v[7] = -4.0;
        assert_eq!(
            color_penalty(&t(vec![3, 2, 2], &v), ColorPenalty::L2).unwrap(),
            5.0
        );
    }

    #[test]
    fn dissim_cases() {
        let d = Tensor::from_fn(vec![3, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        assert_eq!(dissim_penalty(&d, ChannelMode::OneChannel).unwrap(), 0.0);
        let v = dissim_penalty(&d, ChannelMode::ThreeChannel).unwrap();
        assert!((v - 4.0 * 2f64.sqrt()).abs() < 1e-12);
        let same = Tensor::from_fn(vec![3, 2, 2], |i| (i % 4) as f32);
        assert_eq!(
            dissim_penalty(&same, ChannelMode::ThreeChannel).unwrap(),
            0.0
        );
    }

    #[test]
    fn zero_perturbation_has_zero_gradients() {
        let zero = Tensor::zeros(vec![3, 3, 3]);
        for (_, g) in [
            color_penalty_grad(&zero, ColorPenalty::MeanAbs).unwrap(),
            color_penalty_grad(&zero, ColorPenalty::L2).unwrap(),
            dissim_penalty_grad(&zero, ChannelMode::ThreeChannel).unwrap(),
            tv_penalty_grad(&zero, TvVariant::SquaredDifferences).unwrap(),
        ] {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn rank_is_checked() {
        assert!(tv_penalty(&Tensor::zeros(vec![4, 4])).is_err());
    }
}
