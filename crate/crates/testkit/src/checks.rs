//! Reusable comparisons of the library against the oracles, sized by the
//! caller so unit-scale tests and the acceptance run share one definition.

use rand::Rng;
use shadowcert_core::attack::{
    color_penalty, color_penalty_grad, dissim_penalty, dissim_penalty_grad, tv_penalty_grad,
    tv_penalty_variant, ChannelMode, ColorPenalty, TvVariant,
};
use shadowcert_core::ibp::IntervalEvaluator;
use shadowcert_core::nn::{Evaluator, Loss};
use shadowcert_core::{Network, Tensor};

use crate::nets::{random_image, random_network, rng};
use crate::{
    central_differences, clipped_box, param_difference, param_refs, param_straddles_kink,
    reference_ce, reference_interval, reference_logits, reference_margins, reference_robust_loss,
    straddles_kink,
};

/// Gradient magnitudes below this are compared as if they were this large.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Debug, Default, Clone)]
pub struct GradientReport {
    pub nets: usize,
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradientReport {
    fn record(&mut self, what: &str, analytic: f64, numeric: f64, tol: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        self.worst = self.worst.max(e);
        if !(e <= tol) && self.failures.len() < 20 {
            self.failures.push(format!(
                "{what}: analytic {analytic:e} numeric {numeric:e} rel {e:e}"
            ));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0 && self.skipped < self.checked
    }
}

/// Central difference of `f` at `t` along entry `i`, divided by the step
/// that `f32` could represent.
fn tensor_difference(t: &Tensor, i: usize, h: f64, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut probe = t.clone();
    let orig = t.data()[i] as f64;
    let (up, down) = ((orig + h) as f32, (orig - h) as f32);
    probe.data_mut()[i] = up;
    let fu = f(&probe);
    probe.data_mut()[i] = down;
    let fd = f(&probe);
    (fu - fd) / (up as f64 - down as f64)
}

/// Compares every analytic gradient of the library with central
/// differences of an oracle on `nets` random networks: input and parameter
/// gradients of cross-entropy, each penalty variant, and the IBP robust
/// loss. Points whose difference stencil crosses a kink are skipped.
pub fn gradient_suite(nets: usize, seed: u64, tol: f64) -> GradientReport {
    let mut rep = GradientReport {
        nets,
        ..Default::default()
    };
    for n in 0..nets as u64 {
        let (net, shape) = random_network(seed.wrapping_add(n));
        let x = random_image(seed ^ (0x9e37 + n), &shape, 0.05, 0.95);
        let xs = x.to_f64();
        let classes = net.num_classes(&shape).unwrap();
        let y = (n as usize) % classes;
        input_gradient(&mut rep, &net, &shape, &xs, y, tol);
        param_gradient(&mut rep, &net, &shape, &x, y, tol);
        penalty_gradients(&mut rep, seed.wrapping_add(1000 + n), &shape, tol);
        let eps = [0.01, 0.05, 0.1][n as usize % 3];
        robust_gradient(&mut rep, &net, &shape, &xs, y, eps, tol);
    }
    rep
}

fn input_gradient(
    rep: &mut GradientReport,
    net: &Network,
    shape: &[usize],
    x: &[f64],
    y: usize,
    tol: f64,
) {
    let h = 1e-5;
    let mut ev = Evaluator::new(net, shape).unwrap();
    let logits = ev.forward(x).to_vec();
    let mut gl = vec![0.0; logits.len()];
    Loss::CrossEntropy(y)
        .value_and_grad(&logits, &mut gl)
        .unwrap();
    let g = ev.backward(&gl, None).to_vec();
    let fd = central_differences(|p| reference_ce(&reference_logits(net, shape, p), y), x, h);
    for i in 0..x.len() {
        if straddles_kink(net, shape, x, i, h) {
            rep.skipped += 1;
            continue;
        }
        rep.record(&format!("grad_input[{i}]"), g[i], fd[i], tol);
    }
}

fn param_gradient(
    rep: &mut GradientReport,
    net: &Network,
    shape: &[usize],
    x: &Tensor,
    y: usize,
    tol: f64,
) {
    let h = 1e-4;
    let xs = x.to_f64();
    let (_, grads) = net.grad_params(&[x], &[Loss::CrossEntropy(y)]).unwrap();
    let refs = param_refs(net);
    // At most 60 parameters per net, spread over every layer.
    let stride = refs.len().div_ceil(60).max(1);
    for p in refs.into_iter().step_by(stride) {
        if param_straddles_kink(net, shape, &xs, p, h) {
            rep.skipped += 1;
            continue;
        }
        let g = &grads.layers[p.layer];
        let analytic = if p.bias {
            g.bias[p.index]
        } else {
            g.weight[p.index]
        };
        let numeric = param_difference(net, p, h, |n| {
            reference_ce(&reference_logits(n, shape, &xs), y)
        });
        rep.record(
            &format!("grad_params[{}:{}:{}]", p.layer, p.bias, p.index),
            analytic,
            numeric,
            tol,
        );
    }
}

fn penalty_gradients(rep: &mut GradientReport, seed: u64, shape: &[usize], tol: f64) {
    let h = 1e-3;
    let img = [3, shape[1], shape[2]];
    let mut r = rng(seed);
    let d = Tensor::new(
        img.to_vec(),
        (0..img.iter().product())
            .map(|_| r.random_range(-0.5f32..0.5))
            .collect(),
    )
    .unwrap();
    let (w, hh) = (img[1], img[2]);
    let plane = w * hh;
    // Entries whose stencil moves a forward difference or a value through 0.
    let near_difference_kink = |i: usize| {
        let (c, rest) = (i / plane, i % plane);
        let (a, b) = (rest / hh, rest % hh);
        let v = d.data()[i];
        let at = |a: usize, b: usize| d.data()[c * plane + a * hh + b];
        let mut n = Vec::new();
        if a > 0 {
            n.push(at(a - 1, b));
        }
        if a + 1 < w {
            n.push(at(a + 1, b));
        }
        if b > 0 {
            n.push(at(a, b - 1));
        }
        if b + 1 < hh {
            n.push(at(a, b + 1));
        }
        n.iter().any(|u| (u - v).abs() < 2.0 * h as f32)
    };
    for variant in [TvVariant::SquaredDifferences, TvVariant::SquaredTotal] {
        let (_, g) = tv_penalty_grad(&d, variant).unwrap();
        for i in 0..d.len() {
            if variant == TvVariant::SquaredTotal && near_difference_kink(i) {
                rep.skipped += 1;
                continue;
            }
            let fd = tensor_difference(&d, i, h, |t| tv_penalty_variant(t, variant).unwrap());
            rep.record(&format!("tv {variant:?}[{i}]"), g.data()[i] as f64, fd, tol);
        }
    }
    for variant in [ColorPenalty::MeanAbs, ColorPenalty::L2] {
        let (_, g) = color_penalty_grad(&d, variant).unwrap();
        for i in 0..d.len() {
            if variant == ColorPenalty::MeanAbs && (d.data()[i].abs() as f64) < 2.0 * h {
                rep.skipped += 1;
                continue;
            }
            let fd = tensor_difference(&d, i, h, |t| color_penalty(t, variant).unwrap());
            rep.record(
                &format!("color {variant:?}[{i}]"),
                g.data()[i] as f64,
                fd,
                tol,
            );
        }
    }
    let (_, g) = dissim_penalty_grad(&d, ChannelMode::ThreeChannel).unwrap();
    for i in 0..d.len() {
        let fd = tensor_difference(&d, i, h, |t| {
            dissim_penalty(t, ChannelMode::ThreeChannel).unwrap()
        });
        rep.record(&format!("dissim[{i}]"), g.data()[i] as f64, fd, tol);
    }
}

fn robust_gradient(
    rep: &mut GradientReport,
    net: &Network,
    shape: &[usize],
    x: &[f64],
    y: usize,
    eps: f64,
    tol: f64,
) {
    let h = 1e-6;
    let mut ev = IntervalEvaluator::new(net, shape).unwrap();
    ev.set_input(x, eps).unwrap();
    ev.robust_loss(y).unwrap();
    let mut g = vec![0.0; x.len()];
    ev.backward(Some(&mut g), None);
    let f = |p: &[f64]| reference_robust_loss(net, shape, p, eps, y);
    let base = f(x);
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let (fwd, bwd) = ((up - base) / h, (base - down) / h);
        let central = (up - down) / (2.0 * h);
        // Disagreeing one-sided slopes mark a kink inside the stencil: an
        // interval endpoint crossing a ReLU or the pixel-domain clip.
        if (fwd - bwd).abs() > 0.5 * tol * central.abs().max(MAGNITUDE_FLOOR) {
            rep.skipped += 1;
            continue;
        }
        rep.record(
            &format!("ibp_robust_loss[{i}] eps {eps}"),
            g[i],
            central,
            tol,
        );
    }
}

#[derive(Debug, Default, Clone)]
pub struct SoundnessReport {
    pub cases: usize,
    pub samples: usize,
    /// Sampled logits or margins outside the certified bounds.
    pub violations: usize,
    /// Elided margins looser than naive logit differencing.
    pub looser: usize,
    /// Library bounds that disagree with the naive interval oracle.
    pub mismatches: usize,
    /// Smallest slack between a sampled margin and its certified bound.
    pub min_slack: f64,
}

impl SoundnessReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.looser == 0 && self.mismatches == 0 && self.samples > 0
    }
}

/// Samples admissible perturbations of random inputs and checks that every
/// logit lies in the interval bounds and every margin above its elided
/// lower bound. A quarter of the samples are corners of the box.
pub fn ibp_soundness(nets: usize, samples: usize, eps_list: &[f64], seed: u64) -> SoundnessReport {
    let tol = 1e-9;
    let mut rep = SoundnessReport {
        min_slack: f64::INFINITY,
        ..Default::default()
    };
    for n in 0..nets as u64 {
        let (net, shape) = random_network(seed.wrapping_add(n));
        let x = random_image(seed ^ (0x51ed + n), &shape, 0.0, 1.0).to_f64();
        let z0 = reference_logits(&net, &shape, &x);
        let y = shadowcert_core::tensor::argmax(&z0);
        let mut ev = IntervalEvaluator::new(&net, &shape).unwrap();
        for (e, &eps) in eps_list.iter().enumerate() {
            rep.cases += 1;
            ev.set_input(&x, eps).unwrap();
            let bounds = ev.logit_bounds();
            let margins = ev.margins(y).unwrap().to_vec();
            let (blo, bhi) = clipped_box(&x, eps);
            let (nlo, nhi) = reference_interval(&net, &shape, &blo, &bhi);
            let rm = reference_margins(&net, &shape, &blo, &bhi, y);
            for j in 0..nlo.len() {
                if (bounds.lower[j] - nlo[j]).abs() > 1e-9
                    || (bounds.upper[j] - nhi[j]).abs() > 1e-9
                {
                    rep.mismatches += 1;
                }
                if j != y {
                    if margins[j] < nlo[y] - nhi[j] - tol {
                        rep.looser += 1;
                    }
                    if (margins[j] - rm[j]).abs() > 1e-9 {
                        rep.mismatches += 1;
                    }
                }
            }
            let mut r = rng(seed ^ (n << 8) ^ e as u64);
            for s in 0..samples {
                let corner = s % 4 == 0;
                let xp: Vec<f64> = x
                    .iter()
                    .map(|v| {
                        let u = if corner {
                            if r.random_bool(0.5) {
                                eps
                            } else {
                                -eps
                            }
                        } else {
                            r.random_range(-eps..=eps)
                        };
                        (v + u).clamp(0.0, 1.0)
                    })
                    .collect();
                let z = reference_logits(&net, &shape, &xp);
                rep.samples += 1;
                let mut bad = false;
                for j in 0..z.len() {
                    if z[j] < bounds.lower[j] - tol || z[j] > bounds.upper[j] + tol {
                        bad = true;
                    }
                    if j != y {
                        let slack = (z[y] - z[j]) - margins[j];
                        rep.min_slack = rep.min_slack.min(slack);
                        if slack < -tol {
                            bad = true;
                        }
                    }
                }
                if bad {
                    rep.violations += 1;
                }
            }
        }
    }
    rep
}

/// Library statistics against the bisection oracles: every `(k, n)` with
/// `n <= max_n` at each `alpha`, the all-successes closed form, and the
/// normal quantile on `grid` evenly spaced probabilities. Returns the
/// failures.
pub fn statistics_suite(max_n: u64, alphas: &[f64], grid: usize) -> Vec<String> {
    use shadowcert_core::smoothing::stats::{clopper_pearson_lower, inv_norm_cdf};
    let mut failures = Vec::new();
    for &alpha in alphas {
        for n in 1..=max_n {
            for k in 0..=n {
                let lib = clopper_pearson_lower(k, n, alpha).unwrap();
                let oracle = crate::clopper_pearson_oracle(k, n, alpha);
                if !((lib - oracle).abs() <= 1e-8) {
                    failures.push(format!(
                        "clopper_pearson_lower({k}, {n}, {alpha}) = {lib}, oracle {oracle}"
                    ));
                }
            }
            let full = clopper_pearson_lower(n, n, alpha).unwrap();
            let closed = alpha.powf(1.0 / n as f64);
            if !((full - closed).abs() <= 1e-10) {
                failures.push(format!("k = n = {n}, alpha {alpha}: {full} vs {closed}"));
            }
        }
    }
    for i in 0..grid {
        // Interior points plus both tails down to 1e-12.
        let p = match i % 3 {
            0 => (i as f64 + 0.5) / grid as f64,
            1 => 10f64.powf(-12.0 * (i as f64 + 1.0) / grid as f64),
            _ => 1.0 - 10f64.powf(-12.0 * (i as f64 + 1.0) / grid as f64),
        };
        let lib = inv_norm_cdf(p).unwrap();
        let oracle = crate::inv_phi_oracle(p);
        if !((lib - oracle).abs() <= 1e-9) {
            failures.push(format!("inv_norm_cdf({p}) = {lib}, oracle {oracle}"));
        }
    }
    failures
}

/// Abstention, radius monotonicity and the full-consensus radius of the
/// smoothing certificate. Returns the failures.
pub fn certifier_suite(sigma: f64) -> Vec<String> {
    use shadowcert_core::smoothing::{self, outcome_from_count, SmoothingOutcome, SmoothingParams};
    let mut failures = Vec::new();
    for n in [1u64, 2, 7, 30, 100, 400, 1000] {
        for alpha in [0.05, 0.01, 0.001] {
            let mut last = 0.0f64;
            for k in 0..=n {
                let out = outcome_from_count(0, k, n, alpha, sigma).unwrap();
                if 2 * k <= n && out != SmoothingOutcome::Abstain {
                    failures.push(format!(
                        "top count {k} of {n} at alpha {alpha} did not abstain"
                    ));
                }
                let r = out.radius().unwrap_or(0.0);
                if r < last {
                    failures.push(format!(
                        "radius fell from {last} to {r} at count {k} of {n}, alpha {alpha}"
                    ));
                }
                last = r;
            }
        }
    }
    let full = outcome_from_count(0, 400, 400, 0.001, sigma)
        .unwrap()
        .radius();
    let expected = sigma * crate::inv_phi_oracle(0.001f64.powf(1.0 / 400.0));
    if !full.is_some_and(|r| (r - expected).abs() <= 1e-6) {
        failures.push(format!(
            "full-consensus radius {full:?}, expected {expected}"
        ));
    }
    if !(expected < 4.0 * sigma) {
        failures.push(format!(
            "full-consensus radius {expected} is not below 4 sigma"
        ));
    }

    // End to end: a linear net whose decision boundary passes through the
    // input splits the noisy votes near evenly, so the estimation count
    // decides whether `certify` may issue a certificate.
    let (net, shape) = boundary_network();
    let x = Tensor::new(shape.clone(), vec![0.5; shape.iter().product()]).unwrap();
    for seed in 0..20u64 {
        let params = SmoothingParams::with_sigma(sigma, seed);
        let out = smoothing::certify(&net, &x, &params).unwrap();
        let sel = smoothing::sample_counts(
            &net,
            &x,
            sigma,
            params.n0,
            shadowcert_core::rng::derive_seed(seed, 0),
        )
        .unwrap();
        let est = smoothing::sample_counts(
            &net,
            &x,
            sigma,
            params.n,
            shadowcert_core::rng::derive_seed(seed, 1),
        )
        .unwrap();
        let top = est[shadowcert_core::tensor::argmax(&sel)];
        if 2 * top <= params.n && out != SmoothingOutcome::Abstain {
            failures.push(format!(
                "seed {seed}: certified with estimation count {top} of {}",
                params.n
            ));
        }
    }
    let constant = constant_network(&shape);
    let out = smoothing::certify(&constant, &x, &SmoothingParams::with_sigma(sigma, 3)).unwrap();
    if !out.radius().is_some_and(|r| (r - expected).abs() <= 1e-6) || out.label() != Some(0) {
        failures.push(format!(
            "constant net outcome {out:?}, expected radius {expected}"
        ));
    }
    failures
}

/// Two-class linear net on a `1 x 2 x 2` input with logits `+-(sum(x) - 2)`.
fn boundary_network() -> (Network, Vec<usize>) {
    use shadowcert_core::nn::{Affine, Layer};
    let w = Tensor::new(vec![2, 4], vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]).unwrap();
    let b = Tensor::vector(&[-2.0, 2.0]);
    let net = Network::new(vec![
        Layer::Flatten,
        Layer::Affine(Affine::new(w, b).unwrap()),
    ])
    .unwrap();
    (net, vec![1, 2, 2])
}

/// Net that always prefers class 0.
fn constant_network(shape: &[usize]) -> Network {
    use shadowcert_core::nn::{Affine, Layer};
    let d: usize = shape.iter().product();
    let w = Tensor::zeros(vec![3, d]);
    let b = Tensor::vector(&[1.0, 0.0, 0.0]);
    Network::new(vec![
        Layer::Flatten,
        Layer::Affine(Affine::new(w, b).unwrap()),
    ])
    .unwrap()
}
