//! Interval bound propagation over `l_inf` input boxes.
//!
//! Boxes are carried as center/radius pairs: affine and convolution layers
//! map `(mu, r)` to `(W mu + b, |W| r)`, ReLU maps `[l, u]` to
//! `[max(l, 0), max(u, 0)]`. When the network ends in an affine layer the
//! class margins are bounded through a merged margin layer with rows
//! `w_y - w_j` (last-layer elision), which is never looser than
//! differencing per-logit bounds.

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::{Layer, Network, ParamGrads};
use crate::tensor::{argmax, Tensor};

/// Elementwise bounds with `lower <= upper`, kept in `f64` so that bounds
/// computed in double precision are not rounded inward.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTensor {
    pub shape: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntervalTensor {
    pub fn widths(&self) -> Vec<f64> {
        self.upper
            .iter()
            .zip(&self.lower)
            .map(|(u, l)| u - l)
            .collect()
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.lower.len()
            && values
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbpOutcome {
    /// Nominal argmax label being certified.
    pub label: usize,
    /// Entry `j` is a lower bound on `z_label - z_j`; the entry at `label`
    /// itself is `+inf`.
    pub margin_lower: Vec<f64>,
    pub certified: bool,
    pub eps: f64,
}

impl IbpOutcome {
    /// Smallest margin bound over the other classes.
    pub fn min_margin(&self) -> f64 {
        self.margin_lower
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != self.label)
            .map(|(_, m)| *m)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Reusable interval propagation state for one network and input shape.
#[derive(Debug, Clone)]
pub struct IntervalEvaluator<'n> {
    net: &'n Network,
    shapes: Vec<Vec<usize>>,
    geoms: Vec<Option<ConvGeom>>,
    mu: Vec<Vec<f64>>,
    rad: Vec<Vec<f64>>,
    g_mu: Vec<Vec<f64>>,
    g_rad: Vec<Vec<f64>>,
    x: Vec<f64>,
    eps: f64,
    elide: bool,
    margins: Vec<f64>,
    margin_class: usize,
    g_margin: Vec<f64>,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "eps must be finite and non-negative, got {eps}"
        )));
    }
    Ok(())
}

impl<'n> IntervalEvaluator<'n> {
    pub fn new(net: &'n Network, input_shape: &[usize]) -> Result<Self> {
        let shapes = net.shapes(input_shape)?;
        let geoms = net
            .layers()
            .iter()
            .zip(&shapes)
            .map(|(l, s)| match l {
                Layer::Conv2d(c) => c.geometry(s).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let bufs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        let classes = *bufs.last().map(Vec::len).as_ref().unwrap();
        let elide = matches!(net.layers().last(), Some(Layer::Affine(_)));
        Ok(IntervalEvaluator {
            net,
            shapes,
            geoms,
            mu: bufs.clone(),
            rad: bufs.clone(),
            g_mu: bufs.clone(),
            g_rad: bufs,
            x: Vec::new(),
            eps: 0.0,
            elide,
            margins: vec![0.0; classes],
            margin_class: 0,
            g_margin: vec![0.0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.margins.len()
    }

    /// Loads the clipped box `[max(x - eps, 0), min(x + eps, 1)]`.
    pub fn set_input(&mut self, x: &[f64], eps: f64) -> Result<()> {
        check_eps(eps)?;
        if x.len() != self.mu[0].len() {
            return Err(Error::invalid(format!(
                "input has {} entries, network expects {:?}",
                x.len(),
                self.shapes[0]
            )));
        }
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "interval inputs must lie in [0, 1], found {v}"
            )));
        }
        self.x.clear();
        self.x.extend_from_slice(x);
        self.eps = eps;
        for ((m, r), v) in self.mu[0].iter_mut().zip(self.rad[0].iter_mut()).zip(x) {
            let lo = (v - eps).max(0.0);
            let hi = (v + eps).min(1.0);
            *m = 0.5 * (lo + hi);
            *r = 0.5 * (hi - lo);
        }
        Ok(())
    }

    fn propagate(&mut self, upto: usize) {
        for i in 0..upto {
            let layer = &self.net.layers()[i];
            let (mh, mt) = self.mu.split_at_mut(i + 1);
            let (rh, rt) = self.rad.split_at_mut(i + 1);
            let (mx, rx, my, ry) = (&mh[i], &rh[i], &mut mt[0], &mut rt[0]);
            match layer {
                Layer::Affine(a) => {
                    kernels::affine::<false>(a.weight.data(), Some(a.bias.data()), mx, my);
                    kernels::affine::<true>(a.weight.data(), None, rx, ry);
                }
                Layer::Conv2d(c) => {
                    let g = self.geoms[i].as_ref().unwrap();
                    kernels::conv::<false>(c.weight.data(), Some(c.bias.data()), g, mx, my);
                    kernels::conv::<true>(c.weight.data(), None, g, rx, ry);
                }
                Layer::Relu => {
                    for (((m, r), mo), ro) in
                        mx.iter().zip(rx).zip(my.iter_mut()).zip(ry.iter_mut())
                    {
                        let lo = (m - r).max(0.0);
                        let hi = (m + r).max(0.0);
                        *mo = 0.5 * (lo + hi);
                        *ro = 0.5 * (hi - lo);
                    }
                }
                Layer::Flatten => {
                    my.copy_from_slice(mx);
                    ry.copy_from_slice(rx);
                }
            }
        }
    }

    /// Bounds on every logit over the loaded box.
    pub fn logit_bounds(&mut self) -> IntervalTensor {
        let n = self.net.layers().len();
        self.propagate(n);
        IntervalTensor {
            shape: self.shapes[n].clone(),
            lower: self.mu[n]
                .iter()
                .zip(&self.rad[n])
                .map(|(m, r)| m - r)
                .collect(),
            upper: self.mu[n]
                .iter()
                .zip(&self.rad[n])
                .map(|(m, r)| m + r)
                .collect(),
        }
    }

    /// Lower bounds on `z_y - z_j` for every `j`; the entry at `y` is `+inf`.
    pub fn margins(&mut self, y: usize) -> Result<&[f64]> {
        let classes = self.classes();
        if y >= classes {
            return Err(Error::invalid(format!(
                "class {y} out of range for {classes} classes"
            )));
        }
        let n = self.net.layers().len();
        self.margin_class = y;
        if self.elide {
            self.propagate(n - 1);
            let Layer::Affine(a) = &self.net.layers()[n - 1] else {
                unreachable!()
            };
            let (w, b) = (a.weight.data(), a.bias.data());
            let d = a.in_dim();
            let (mu, rad) = (&self.mu[n - 1], &self.rad[n - 1]);
            let wy = &w[y * d..(y + 1) * d];
            for j in 0..classes {
                if j == y {
                    self.margins[j] = f64::INFINITY;
                    continue;
                }
                let wj = &w[j * d..(j + 1) * d];
                let mut center = b[y] as f64 - b[j] as f64;
                let mut spread = 0.0;
                for i in 0..d {
                    let diff = wy[i] as f64 - wj[i] as f64;
                    center += diff * mu[i];
                    spread += diff.abs() * rad[i];
                }
                self.margins[j] = center - spread;
            }
        } else {
            self.propagate(n);
            let (mu, rad) = (&self.mu[n], &self.rad[n]);
            for j in 0..classes {
                self.margins[j] = if j == y {
                    f64::INFINITY
                } else {
                    (mu[y] - rad[y]) - (mu[j] + rad[j])
                };
            }
        }
        Ok(&self.margins)
    }

    /// Cross-entropy of the worst-case logit vector toward `target`.
    ///
    /// With elision the worst-case logits are `z_target = 0` and
    /// `z_j = -margin_j`, which differs from (lower of target, upper of the
    /// rest) only by a shift that cross-entropy ignores.
    pub fn robust_loss(&mut self, target: usize) -> Result<f64> {
        self.margins(target)?;
        let worst: Vec<f64> = self
            .margins
            .iter()
            .enumerate()
            .map(|(j, m)| if j == target { 0.0 } else { -m })
            .collect();
        let mut g = vec![0.0; worst.len()];
        let loss = crate::nn::loss::ce_with_grad(&worst, target, Some(&mut g));
        // d loss / d margin_j = -d loss / d worst_j
        for (gm, gw) in self.g_margin.iter_mut().zip(&g) {
            *gm = -gw;
        }
        self.g_margin[target] = 0.0;
        Ok(loss)
    }

    /// Backpropagates `scale * d robust_loss` from the last
    /// [`IntervalEvaluator::robust_loss`] call, writing the input gradient
    /// into `grad_x` and accumulating parameter gradients into `params`.
    pub fn backward(
        &mut self,
        grad_x: Option<&mut [f64]>,
        mut params: Option<(&mut ParamGrads, f64)>,
    ) {
        let n = self.net.layers().len();
        let y = self.margin_class;
        let classes = self.classes();
        let start = if self.elide {
            let Layer::Affine(a) = &self.net.layers()[n - 1] else {
                unreachable!()
            };
            let (w, d) = (a.weight.data(), a.in_dim());
            let gm = &mut self.g_mu[n - 1];
            let gr = &mut self.g_rad[n - 1];
            gm.fill(0.0);
            gr.fill(0.0);
            let (mu, rad) = (&self.mu[n - 1], &self.rad[n - 1]);
            let wy = &w[y * d..(y + 1) * d];
            for j in (0..classes).filter(|&j| j != y) {
                let g = self.g_margin[j];
                if g == 0.0 {
                    continue;
                }
                let wj = &w[j * d..(j + 1) * d];
                for i in 0..d {
                    let diff = wy[i] as f64 - wj[i] as f64;
                    gm[i] += g * diff;
                    gr[i] -= g * diff.abs();
                }
                if let Some((acc, scale)) = params.as_mut() {
                    let lg = &mut acc.layers[n - 1];
                    let s = *scale * g;
                    for i in 0..d {
                        let diff = wy[i] as f64 - wj[i] as f64;
                        let sgn = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let dm = s * (mu[i] - sgn * rad[i]);
                        lg.weight[y * d + i] += dm;
                        lg.weight[j * d + i] -= dm;
                    }
                    lg.bias[y] += s;
                    lg.bias[j] -= s;
                }
            }
            n - 1
        } else {
            let gm = &mut self.g_mu[n];
            let gr = &mut self.g_rad[n];
            // worst_y = mu_y - r_y, worst_j = mu_j + r_j; margins are worst_y - worst_j
            gm.fill(0.0);
            gr.fill(0.0);
            for j in (0..classes).filter(|&j| j != y) {
                let g = self.g_margin[j];
                gm[y] += g;
                gr[y] -= g;
                gm[j] -= g;
                gr[j] -= g;
            }
            n
        };
        for i in (0..start).rev() {
            let layer = &self.net.layers()[i];
            let (gmh, gmt) = self.g_mu.split_at_mut(i + 1);
            let (grh, grt) = self.g_rad.split_at_mut(i + 1);
            let (gmy, gry, gmx, grx) = (&gmt[0], &grt[0], &mut gmh[i], &mut grh[i]);
            let (mx, rx) = (&self.mu[i], &self.rad[i]);
            if let Some((acc, scale)) = params.as_mut() {
                let lg = &mut acc.layers[i];
                match layer {
                    Layer::Affine(a) => {
                        kernels::affine_weight_grad(gmy, mx, None, *scale, &mut lg.weight);
                        kernels::affine_weight_grad(
                            gry,
                            rx,
                            Some(a.weight.data()),
                            *scale,
                            &mut lg.weight,
                        );
                        for (b, g) in lg.bias.iter_mut().zip(gmy.iter()) {
                            *b += *scale * g;
                        }
                    }
                    Layer::Conv2d(c) => {
                        let g = self.geoms[i].as_ref().unwrap();
                        kernels::conv_weight_grad(g, gmy, mx, None, *scale, &mut lg.weight);
                        kernels::conv_weight_grad(
                            g,
                            gry,
                            rx,
                            Some(c.weight.data()),
                            *scale,
                            &mut lg.weight,
                        );
                        kernels::conv_bias_grad(g, gmy, *scale, &mut lg.bias);
                    }
                    _ => {}
                }
            }
            match layer {
                Layer::Affine(a) => {
                    kernels::affine_transpose::<false>(a.weight.data(), gmy, gmx);
                    kernels::affine_transpose::<true>(a.weight.data(), gry, grx);
                }
                Layer::Conv2d(c) => {
                    let g = self.geoms[i].as_ref().unwrap();
                    kernels::conv_transpose::<false>(c.weight.data(), g, gmy, gmx);
                    kernels::conv_transpose::<true>(c.weight.data(), g, gry, grx);
                }
                Layer::Relu => {
                    for k in 0..mx.len() {
                        let lo = mx[k] - rx[k];
                        let hi = mx[k] + rx[k];
                        let g_lo = if lo > 0.0 {
                            0.5 * (gmy[k] - gry[k])
                        } else {
                            0.0
                        };
                        let g_hi = if hi > 0.0 {
                            0.5 * (gmy[k] + gry[k])
                        } else {
                            0.0
                        };
                        gmx[k] = g_lo + g_hi;
                        grx[k] = g_hi - g_lo;
                    }
                }
                Layer::Flatten => {
                    gmx.copy_from_slice(gmy);
                    grx.copy_from_slice(gry);
                }
            }
        }
        if let Some(gx) = grad_x {
            let eps = self.eps;
            for k in 0..gx.len() {
                let v = self.x[k];
                let g_lo = 0.5 * (self.g_mu[0][k] - self.g_rad[0][k]);
                let g_hi = 0.5 * (self.g_mu[0][k] + self.g_rad[0][k]);
                gx[k] =
                    if v - eps > 0.0 { g_lo } else { 0.0 } + if v + eps < 1.0 { g_hi } else { 0.0 };
            }
        }
    }
}

/// Bounds on the logits over `[max(x - eps, 0), min(x + eps, 1)]`.
pub fn interval_forward(net: &Network, x: &Tensor, eps: f64) -> Result<IntervalTensor> {
    let mut ev = IntervalEvaluator::new(net, x.shape())?;
    ev.set_input(&x.to_f64(), eps)?;
    Ok(ev.logit_bounds())
}

/// Lower bounds on `z_y - z_j` over the `eps` box; `+inf` at `j = y`.
pub fn margin_bounds(net: &Network, x: &Tensor, y: usize, eps: f64) -> Result<Vec<f64>> {
    let mut ev = IntervalEvaluator::new(net, x.shape())?;
    ev.set_input(&x.to_f64(), eps)?;
    Ok(ev.margins(y)?.to_vec())
}

/// Certifies `y_pred` at radius `eps`: every margin bound must be positive.
pub fn certify_linf(net: &Network, x: &Tensor, y_pred: usize, eps: f64) -> Result<IbpOutcome> {
    let margin_lower = margin_bounds(net, x, y_pred, eps)?;
    let certified = margin_lower
        .iter()
        .enumerate()
        .all(|(j, m)| j == y_pred || *m > 0.0);
    Ok(IbpOutcome {
        label: y_pred,
        margin_lower,
        certified,
        eps,
    })
}

/// [`certify_linf`] for the nominal argmax label of `x`.
pub fn certify_point(net: &Network, x: &Tensor, eps: f64) -> Result<IbpOutcome> {
    let label = argmax(net.forward(x)?.data());
    certify_linf(net, x, label, eps)
}

/// Worst-case-logit cross-entropy toward `target` over the `eps` box.
pub fn ibp_robust_loss(net: &Network, x: &Tensor, target: usize, eps: f64) -> Result<f64> {
    let mut ev = IntervalEvaluator::new(net, x.shape())?;
    ev.set_input(&x.to_f64(), eps)?;
    ev.robust_loss(target)
}

/// Robust loss and its gradient with respect to `x`, holding the sign
/// pattern of `|W|` fixed at the current point.
pub fn ibp_robust_loss_grad(
    net: &Network,
    x: &Tensor,
    target: usize,
    eps: f64,
) -> Result<(f64, Tensor)> {
    let mut ev = IntervalEvaluator::new(net, x.shape())?;
    ev.set_input(&x.to_f64(), eps)?;
    let loss = ev.robust_loss(target)?;
    let mut gx = vec![0.0; x.len()];
    ev.backward(Some(&mut gx), None);
    Ok((loss, Tensor::from_f64(x.shape().to_vec(), &gx)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy, Affine, Architecture};

    fn identity(n: usize) -> Network {
        let w = Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        Network::new(vec![Layer::Affine(
            Affine::new(w, Tensor::zeros(vec![n])).unwrap(),
        )])
        .unwrap()
    }

    fn image(seed: u32) -> Tensor {
        Tensor::from_fn(vec![3, 8, 8], |i| {
            (((i as u32).wrapping_mul(2654435761) ^ seed) % 997) as f32 / 996.0
        })
    }

    #[test]
    fn zero_eps_collapses_to_forward() {
        let net = Network::build(Architecture::ToyCnn, &[3, 8, 8], 6, 2).unwrap();
        let x = image(3);
        let b = interval_forward(&net, &x, 0.0).unwrap();
        assert_eq!(b.lower, b.upper);
        let mut ev = crate::nn::Evaluator::new(&net, x.shape()).unwrap();
        // Point and interval kernels sum in different orders.
        for (a, l) in ev.forward_f32(x.data()).iter().zip(&b.lower) {
            assert!((a - l).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_box() {
        let net = identity(3);
        let x = Tensor::vector(&[0.2, 0.5, 0.8]);
        let b = interval_forward(&net, &x, 0.1).unwrap();
        for k in 0..3 {
            assert!((b.lower[k] - (x.data()[k] as f64 - 0.1)).abs() < 1e-7);
            assert!((b.upper[k] - (x.data()[k] as f64 + 0.1)).abs() < 1e-7);
        }
    }

    #[test]
    fn clipping_at_pixel_domain() {
        let net = identity(2);
        let b = interval_forward(&net, &Tensor::vector(&[0.0, 1.0]), 0.3).unwrap();
        assert_eq!(b.lower, vec![0.0, 0.7]);
        assert!((b.upper[0] - 0.3).abs() < 1e-12);
        assert_eq!(b.upper[1], 1.0);
    }

    #[test]
    fn constant_margin_net_certifies_at_any_eps() {
        let w = Tensor::zeros(vec![3, 4]);
        let b = Tensor::vector(&[1.0, 0.0, 0.0]);
        let net = Network::new(vec![
            Layer::Flatten,
            Layer::Affine(Affine::new(w, b).unwrap()),
        ])
        .unwrap();
        let x = Tensor::from_fn(vec![1, 2, 2], |i| i as f32 / 4.0);
        for eps in [0.0, 0.5, 10.0] {
            let out = certify_linf(&net, &x, 0, eps).unwrap();
            assert!(out.certified);
            assert_eq!(out.margin_lower[1], 1.0);
            assert_eq!(out.margin_lower[2], 1.0);
            assert_eq!(out.margin_lower[0], f64::INFINITY);
            assert_eq!(out.min_margin(), 1.0);
        }
    }

    #[test]
    fn zero_eps_margins_and_loss() {
        let net = Network::build(Architecture::ToyMlp, &[3, 8, 8], 5, 4).unwrap();
        let x = image(9);
        let logits = net.forward(&x).unwrap();
        let mut ev = crate::nn::Evaluator::new(&net, x.shape()).unwrap();
        let z = ev.forward_f32(x.data()).to_vec();
        let m = margin_bounds(&net, &x, 2, 0.0).unwrap();
        for j in 0..5 {
            if j != 2 {
                assert!((m[j] - (z[2] - z[j])).abs() < 1e-9);
            }
        }
        for t in 0..5 {
            let robust = ibp_robust_loss(&net, &x, t, 0.0).unwrap();
            assert!((robust - cross_entropy(&logits, t).unwrap()).abs() < 1e-5);
        }
        let y = logits.argmax();
        assert!(certify_linf(&net, &x, y, 0.0).unwrap().certified);
    }

    #[test]
    fn negative_eps_and_out_of_domain_inputs_are_rejected() {
        let net = identity(2);
        assert!(interval_forward(&net, &Tensor::vector(&[0.5, 0.5]), -0.1).is_err());
        assert!(interval_forward(&net, &Tensor::vector(&[1.5, 0.5]), 0.1).is_err());
        assert!(margin_bounds(&net, &Tensor::vector(&[0.5, 0.5]), 2, 0.1).is_err());
    }
}
