//! Certificate-spoofing attacks.
//!
//! The shadow attack minimizes a spoofing loss toward a wrong class plus
//! weighted perceptibility penalties,
//!
//! ```text
//! L_spoof(x + delta, target) + lambda_c C(delta) + lambda_tv TV(delta) + lambda_s Dissim(delta)
//! ```
//!
//! with plain SGD on an unconstrained `delta`. The attacked image is
//! `clamp(x + delta, 0, 1)` and is certified by the same certifier the loss
//! was built for. A projected gradient baseline lives in [`pgd_attack`].

pub mod penalty;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ibp::{self, IbpOutcome, IntervalEvaluator};
use crate::nn::loss::ce_with_grad;
use crate::nn::{Evaluator, Loss, Network};
use crate::rng;
use crate::smoothing::{self, SmoothingOutcome, SmoothingParams};
use crate::tensor::Tensor;

pub use penalty::{
    color_penalty, color_penalty_grad, dissim_penalty, dissim_penalty_grad, tv_penalty,
    tv_penalty_grad, tv_penalty_variant, ColorPenalty, TvVariant,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// One greyscale plane duplicated across every image channel.
    OneChannel,
    /// An independent plane per channel; requires three-channel images.
    ThreeChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    mode: ChannelMode,
    data: Tensor,
}

impl Perturbation {
    /// `data` is `(W, H)` in one-channel mode, `(3, W, H)` in three-channel mode.
    pub fn new(mode: ChannelMode, data: Tensor) -> Result<Self> {
        let ok = match mode {
            ChannelMode::OneChannel => data.rank() == 2,
            ChannelMode::ThreeChannel => data.rank() == 3 && data.shape()[0] == 3,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "perturbation shape {:?} does not fit {mode:?}",
                data.shape()
            )));
        }
        Ok(Perturbation { mode, data })
    }

    pub fn zeros(mode: ChannelMode, image_shape: &[usize]) -> Result<Self> {
        let shape = param_shape(mode, image_shape)?;
        Perturbation::new(mode, Tensor::zeros(shape))
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// Image-shaped perturbation with `channels` channels.
    pub fn materialize(&self, channels: usize) -> Tensor {
        match self.mode {
            ChannelMode::OneChannel => {
                let plane = self.data.data();
                let mut shape = vec![channels];
                shape.extend_from_slice(self.data.shape());
                Tensor::from_fn(shape, |i| plane[i % plane.len()])
            }
            ChannelMode::ThreeChannel => self.data.clone(),
        }
    }
}

fn param_shape(mode: ChannelMode, image_shape: &[usize]) -> Result<Vec<usize>> {
    match (mode, image_shape) {
        (ChannelMode::OneChannel, &[_, w, h]) => Ok(vec![w, h]),
        (ChannelMode::ThreeChannel, &[3, w, h]) => Ok(vec![3, w, h]),
        _ => Err(Error::invalid(format!(
            "{mode:?} perturbations do not fit image shape {image_shape:?}"
        ))),
    }
}

/// Spoofing loss the attack minimizes for the IBP certifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IbpSpoofLoss {
    /// Cross-entropy of the worst-case logits over the `eps` box.
    Robust,
    /// Plain cross-entropy of the nominal logits; the baseline that ignores
    /// the certificate.
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpoofTarget {
    /// Average cross-entropy over `noise_batch` Gaussian copies with standard
    /// deviation `sigma`, redrawn every step; the result is certified with
    /// `cert`.
    Smoothing {
        sigma: f64,
        noise_batch: usize,
        cert: SmoothingParams,
    },
    /// IBP spoofing at `l_inf` radius `eps`.
    Ibp { eps: f64, loss: IbpSpoofLoss },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub lambda_tv: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub steps: usize,
    pub lr: f64,
    pub mode: ChannelMode,
    pub color_penalty: ColorPenalty,
    pub tv_variant: TvVariant,
    pub spoof: SpoofTarget,
    /// Half-width of the uniform initialization of `delta`.
    pub init_scale: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// Smoothing attack: 400 noisy copies, lambda_tv = 0.3, lambda_c = 1.0,
    /// 300 SGD steps at learning rate 0.1, one-channel.
    pub fn smoothing(cert: SmoothingParams, seed: u64) -> Self {
        AttackConfig {
            lambda_tv: 0.3,
            lambda_c: 1.0,
            lambda_s: 0.5,
            steps: 300,
            lr: 0.1,
            mode: ChannelMode::OneChannel,
            color_penalty: ColorPenalty::MeanAbs,
            tv_variant: TvVariant::SquaredDifferences,
            spoof: SpoofTarget::Smoothing {
                sigma: cert.sigma,
                noise_batch: 400,
                cert,
            },
            init_scale: 0.1,
            seed,
        }
    }

    /// IBP attack: lambda_tv = 9e-6, lambda_c = 0.02 with the global `l2`
    /// color penalty, one-channel, 300 steps.
    pub fn ibp(eps: f64, lr: f64, seed: u64) -> Self {
        AttackConfig {
            lambda_tv: 0.000009,
            lambda_c: 0.02,
            lambda_s: 0.0,
            steps: 300,
            lr,
            mode: ChannelMode::OneChannel,
            color_penalty: ColorPenalty::L2,
            tv_variant: TvVariant::SquaredDifferences,
            spoof: SpoofTarget::Ibp {
                eps,
                loss: IbpSpoofLoss::Robust,
            },
            init_scale: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_tv", self.lambda_tv),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("init_scale", self.init_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        match self.spoof {
            SpoofTarget::Smoothing {
                sigma,
                noise_batch,
                cert,
            } => {
                if noise_batch == 0 {
                    return Err(Error::config("noise batch must be at least 1"));
                }
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::config(format!(
                        "attack sigma must be non-negative, got {sigma}"
                    )));
                }
                cert.validate()
            }
            SpoofTarget::Ibp { eps, .. } => {
                if !(eps >= 0.0 && eps.is_finite()) {
                    return Err(Error::config(format!(
                        "eps must be non-negative, got {eps}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Objective terms evaluated at the start of one SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub spoof_loss: f64,
    pub tv: f64,
    pub color: f64,
    pub dissim: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CertOutcome {
    Smoothing(SmoothingOutcome),
    Ibp(IbpOutcome),
}

impl CertOutcome {
    /// Label the certifier assigns, `None` when smoothing abstains.
    pub fn label(&self) -> Option<usize> {
        match self {
            CertOutcome::Smoothing(o) => o.label(),
            CertOutcome::Ibp(o) => Some(o.label),
        }
    }

    pub fn certified(&self) -> bool {
        match self {
            CertOutcome::Smoothing(o) => o.label().is_some(),
            CertOutcome::Ibp(o) => o.certified,
        }
    }

    /// Certificate strength: smoothing radius or smallest IBP margin bound.
    pub fn strength(&self) -> f64 {
        match self {
            CertOutcome::Smoothing(o) => o.radius().unwrap_or(0.0),
            CertOutcome::Ibp(o) => o.min_margin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub delta: Perturbation,
    /// `clamp(x + materialize(delta), 0, 1)`.
    pub adv_image: Tensor,
    pub target: usize,
    pub trace: Vec<StepRecord>,
    /// The certifier labels `adv_image` as `target` and issues a certificate.
    pub success: bool,
    pub outcome: CertOutcome,
}

impl AttackResult {
    pub fn final_spoof_loss(&self) -> f64 {
        self.trace.last().map_or(f64::INFINITY, |r| r.spoof_loss)
    }
}

/// Key of step `step` in the attack noise streams.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    rng::derive_path(seed, &[1, step as u64])
}

/// Noise vector `k` of a smoothing spoof loss evaluated with `step_seed`.
pub fn spoof_noise(step_seed: u64, k: usize, sigma: f64, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    rng::fill_ziggurat(
        &mut rng::stream(rng::derive_seed(step_seed, k as u64)),
        sigma,
        &mut out,
    );
    out
}

/// Initial `delta`, uniform in `[-init_scale, init_scale]` per entry.
pub fn initial_perturbation(cfg: &AttackConfig, image_shape: &[usize]) -> Result<Perturbation> {
    let shape = param_shape(cfg.mode, image_shape)?;
    let mut stream = rng::stream(rng::derive_path(cfg.seed, &[0]));
    let s = cfg.init_scale;
    let data = Tensor::from_fn(shape, |_| {
        if s > 0.0 {
            stream.random_range(-s..=s) as f32
        } else {
            0.0
        }
    });
    Perturbation::new(cfg.mode, data)
}

struct SmoothingLoss<'n> {
    ev: Evaluator<'n>,
    noise: Vec<f64>,
    grad_logits: Vec<f64>,
}

impl<'n> SmoothingLoss<'n> {
    fn new(net: &'n Network, shape: &[usize]) -> Result<Self> {
        let ev = Evaluator::new(net, shape)?;
        let (len, k) = (ev.input_len(), ev.classes());
        Ok(SmoothingLoss {
            ev,
            noise: vec![0.0; len],
            grad_logits: vec![0.0; k],
        })
    }

    /// Mean cross-entropy toward `target` over `m` noisy copies of `point`;
    /// adds the gradient with respect to `point` into `grad` when given.
    fn eval(
        &mut self,
        point: &[f64],
        target: usize,
        sigma: f64,
        m: usize,
        step_seed: u64,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let mut total = 0.0;
        let inv = 1.0 / m as f64;
        for k in 0..m {
            let mut stream = rng::stream(rng::derive_seed(step_seed, k as u64));
            rng::fill_ziggurat(&mut stream, sigma, &mut self.noise);
            for ((d, p), e) in self.ev.input_mut().iter_mut().zip(point).zip(&self.noise) {
                *d = p + e;
            }
            let logits = self.ev.run();
            total += ce_with_grad(logits, target, Some(&mut self.grad_logits));
            if let Some(g) = grad.as_deref_mut() {
                let gx = self.ev.backward(&self.grad_logits, None);
                for (a, b) in g.iter_mut().zip(gx) {
                    *a += inv * b;
                }
            }
        }
        total * inv
    }
}

/// Average cross-entropy toward `target` over `m` Gaussian copies of
/// `x + materialize(delta)`; copy `k` uses [`spoof_noise`]`(step_seed, k, ..)`.
pub fn spoof_loss_smoothing(
    net: &Network,
    x: &Tensor,
    delta: &Perturbation,
    target: usize,
    sigma: f64,
    m: usize,
    step_seed: u64,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("noise batch must be at least 1"));
    }
    check_target(net, x, target)?;
    let d = delta.materialize(x.shape()[0]);
    if d.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            actual: d.shape().to_vec(),
        });
    }
    let point: Vec<f64> = x
        .data()
        .iter()
        .zip(d.data())
        .map(|(a, b)| *a as f64 + *b as f64)
        .collect();
    let mut loss = SmoothingLoss::new(net, x.shape())?;
    Ok(loss.eval(&point, target, sigma, m, step_seed, None))
}

fn check_target(net: &Network, x: &Tensor, target: usize) -> Result<usize> {
    x.check_image()?;
    let k = net.num_classes(x.shape())?;
    if target >= k {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {k} classes"
        )));
    }
    Ok(k)
}

enum SpoofState<'n> {
    Smoothing(SmoothingLoss<'n>),
    Robust(IntervalEvaluator<'n>, f64),
    Natural(Evaluator<'n>, Vec<f64>),
}

impl SpoofState<'_> {
    /// Spoof loss at `x + d`; adds its gradient with respect to `d` into `grad`.
    fn eval(
        &mut self,
        x: &[f64],
        d: &[f64],
        target: usize,
        cfg: &AttackConfig,
        step: usize,
        grad: &mut [f64],
    ) -> Result<f64> {
        match self {
            SpoofState::Smoothing(loss) => {
                let SpoofTarget::Smoothing {
                    sigma, noise_batch, ..
                } = cfg.spoof
                else {
                    unreachable!()
                };
                let point: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
                Ok(loss.eval(
                    &point,
                    target,
                    sigma,
                    noise_batch,
                    step_seed(cfg.seed, step),
                    Some(grad),
                ))
            }
            SpoofState::Robust(ev, eps) => {
                let (point, inside) = clamp_point(x, d);
                ev.set_input(&point, *eps)?;
                let value = ev.robust_loss(target)?;
                let mut g = vec![0.0; point.len()];
                ev.backward(Some(&mut g), None);
                for ((a, b), keep) in grad.iter_mut().zip(&g).zip(&inside) {
                    if *keep {
                        *a += b;
                    }
                }
                Ok(value)
            }
            SpoofState::Natural(ev, gl) => {
                let (point, inside) = clamp_point(x, d);
                let logits = ev.forward(&point);
                let value = ce_with_grad(logits, target, Some(gl));
                let g = ev.backward(gl, None);
                for ((a, b), keep) in grad.iter_mut().zip(g).zip(&inside) {
                    if *keep {
                        *a += b;
                    }
                }
                Ok(value)
            }
        }
    }
}

/// `clamp(x + d, 0, 1)` with a mask of entries strictly inside the domain,
/// where the clamp passes gradients through.
fn clamp_point(x: &[f64], d: &[f64]) -> (Vec<f64>, Vec<bool>) {
    x.iter()
        .zip(d)
        .map(|(a, b)| {
            let v = a + b;
            (v.clamp(0.0, 1.0), v > 0.0 && v < 1.0)
        })
        .unzip()
}

/// Targeted shadow attack toward `target`.
pub fn attack_targeted(
    net: &Network,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack_targeted_observed(net, x, target, cfg, &mut |_, _| {})
}

/// [`attack_targeted`] that hands `observer` the perturbation before every
/// step and once more after the last one (`step == cfg.steps`).
pub fn attack_targeted_observed(
    net: &Network,
    x: &Tensor,
    target: usize,
    cfg: &AttackConfig,
    observer: &mut dyn FnMut(usize, &Perturbation),
) -> Result<AttackResult> {
    cfg.validate()?;
    check_target(net, x, target)?;
    let shape = x.shape().to_vec();
    let [channels, w, h] = [shape[0], shape[1], shape[2]];
    let img_shape = [channels, w, h];
    let init = initial_perturbation(cfg, &shape)?;
    let mut delta = init.data().to_f64();
    let xs = x.to_f64();

    let mut state = match cfg.spoof {
        SpoofTarget::Smoothing { .. } => SpoofState::Smoothing(SmoothingLoss::new(net, &shape)?),
        SpoofTarget::Ibp {
            eps,
            loss: IbpSpoofLoss::Robust,
        } => SpoofState::Robust(IntervalEvaluator::new(net, &shape)?, eps),
        SpoofTarget::Ibp {
            loss: IbpSpoofLoss::Natural,
            ..
        } => {
            let ev = Evaluator::new(net, &shape)?;
            let k = ev.classes();
            SpoofState::Natural(ev, vec![0.0; k])
        }
    };

    let to_perturbation = |d: &[f64]| -> Result<Perturbation> {
        Perturbation::new(cfg.mode, Tensor::from_f64(init.data().shape().to_vec(), d)?)
    };

    let mut img_delta = vec![0.0; xs.len()];
    let mut img_grad = vec![0.0; xs.len()];
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        observer(step, &to_perturbation(&delta)?);
        materialize_into(cfg.mode, &delta, channels, &mut img_delta);
        img_grad.fill(0.0);
        let spoof = state.eval(&xs, &img_delta, target, cfg, step, &mut img_grad)?;
        let tv = penalty::tv(
            &img_delta,
            img_shape,
            cfg.tv_variant,
            Some((&mut img_grad, cfg.lambda_tv)),
        );
        let color = penalty::color(
            &img_delta,
            img_shape,
            cfg.color_penalty,
            Some((&mut img_grad, cfg.lambda_c)),
        );
        let dissim = penalty::dissim(
            &img_delta,
            img_shape,
            cfg.mode,
            Some((&mut img_grad, cfg.lambda_s)),
        );
        let objective = spoof + cfg.lambda_c * color + cfg.lambda_tv * tv + cfg.lambda_s * dissim;
        trace.push(StepRecord {
            spoof_loss: spoof,
            tv,
            color,
            dissim,
            objective,
        });
        if !objective.is_finite() || img_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::AttackDiverged { step, trace });
        }
        step_delta(cfg.mode, &mut delta, &img_grad, channels, cfg.lr);
    }
    let final_delta = to_perturbation(&delta)?;
    observer(cfg.steps, &final_delta);

    let adv_image = adversarial_image(x, &final_delta);
    let outcome = match cfg.spoof {
        SpoofTarget::Smoothing { cert, .. } => {
            CertOutcome::Smoothing(smoothing::certify(net, &adv_image, &cert)?)
        }
        SpoofTarget::Ibp { eps, .. } => CertOutcome::Ibp(ibp::certify_point(net, &adv_image, eps)?),
    };
    let success = outcome.certified() && outcome.label() == Some(target);
    Ok(AttackResult {
        delta: final_delta,
        adv_image,
        target,
        trace,
        success,
        outcome,
    })
}

/// `clamp(x + materialize(delta), 0, 1)` in `f32`.
pub fn adversarial_image(x: &Tensor, delta: &Perturbation) -> Tensor {
    let d = delta.materialize(x.shape()[0]);
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(d.data())
            .map(|(a, b)| (a + b).clamp(0.0, 1.0))
            .collect(),
    )
    .expect("shapes agree")
}

fn materialize_into(mode: ChannelMode, delta: &[f64], channels: usize, out: &mut [f64]) {
    match mode {
        ChannelMode::OneChannel => {
            for chunk in out.chunks_exact_mut(delta.len()).take(channels) {
                chunk.copy_from_slice(delta);
            }
        }
        ChannelMode::ThreeChannel => out.copy_from_slice(delta),
    }
}

fn step_delta(mode: ChannelMode, delta: &mut [f64], img_grad: &[f64], channels: usize, lr: f64) {
    match mode {
        ChannelMode::OneChannel => {
            let plane = delta.len();
            for (k, d) in delta.iter_mut().enumerate() {
                let g: f64 = (0..channels).map(|c| img_grad[c * plane + k]).sum();
                *d -= lr * g;
            }
        }
        ChannelMode::ThreeChannel => {
            for (d, g) in delta.iter_mut().zip(img_grad) {
                *d -= lr * g;
            }
        }
    }
}

/// Summary used to pick the strongest targeted run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub success: bool,
    pub strength: f64,
    pub final_loss: f64,
}

/// Index of the best candidate: the largest strength among successes, ties
/// broken by lower final loss; without any success, the lowest final loss.
/// Remaining ties go to the lowest index.
pub fn select_best(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &candidates[b];
                match (c.success, cur.success) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => {
                        c.strength > cur.strength
                            || (c.strength == cur.strength && c.final_loss < cur.final_loss)
                    }
                    (false, false) => c.final_loss < cur.final_loss,
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct UntargetedResult {
    /// Index into `runs` of the selected attack.
    pub best: usize,
    /// One targeted run per wrong class, in increasing class order.
    pub runs: Vec<AttackResult>,
}

impl UntargetedResult {
    pub fn chosen(&self) -> &AttackResult {
        &self.runs[self.best]
    }
}

/// Runs [`attack_targeted`] toward every class other than `y` and keeps the
/// strongest spoofed certificate.
pub fn attack_untargeted(
    net: &Network,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<UntargetedResult> {
    let k = check_target(net, x, y)?;
    let targets: Vec<usize> = (0..k).filter(|&t| t != y).collect();
    let runs = targets
        .par_iter()
        .map(|&t| attack_targeted(net, x, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<Candidate> = runs
        .iter()
        .map(|r| Candidate {
            success: r.success,
            strength: r.outcome.strength(),
            final_loss: r.final_spoof_loss(),
        })
        .collect();
    let best = select_best(&candidates).expect("at least one wrong class");
    Ok(UntargetedResult { best, runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    Linf,
}

/// Projected gradient ascent on `CE(., y)` within the `eps` ball around `x`
/// and the pixel domain, starting from a seeded random point in the ball.
pub fn pgd_attack(
    net: &Network,
    x: &Tensor,
    y: usize,
    eps: f64,
    norm: Norm,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Tensor> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    check_target(net, x, y)?;
    if steps == 0 {
        return Ok(x.clone());
    }
    let xs = x.to_f64();
    let mut stream = rng::stream(seed);
    let mut adv: Vec<f64> = xs
        .iter()
        .map(|v| v + stream.random_range(-eps..=eps))
        .collect();
    project(&mut adv, &xs, eps, norm);
    let mut ev = Evaluator::new(net, x.shape())?;
    let mut gl = vec![0.0; ev.classes()];
    let loss = Loss::CrossEntropy(y);
    for _ in 0..steps {
        let logits = ev.forward(&adv).to_vec();
        loss.value_and_grad(&logits, &mut gl)?;
        let g = ev.backward(&gl, None);
        match norm {
            Norm::Linf => {
                for (a, gi) in adv.iter_mut().zip(g) {
                    *a += lr * penalty_sign(*gi);
                }
            }
            Norm::L2 => {
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (a, gi) in adv.iter_mut().zip(g) {
                        *a += lr * gi / n;
                    }
                }
            }
        }
        project(&mut adv, &xs, eps, norm);
    }
    let mut out = Tensor::from_f64(x.shape().to_vec(), &adv)?;
    // Rounding to f32 must not leave the ball.
    if norm == Norm::Linf {
        for (o, c) in out.data_mut().iter_mut().zip(x.data()) {
            let (lo, hi) = ((*c as f64 - eps) as f32, (*c as f64 + eps) as f32);
            *o = o.clamp(lo.max(0.0), hi.min(1.0));
        }
    }
    Ok(out)
}

fn penalty_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(adv: &mut [f64], x: &[f64], eps: f64, norm: Norm) {
    match norm {
        Norm::Linf => {
            for (a, c) in adv.iter_mut().zip(x) {
                *a = a.clamp(c - eps, c + eps);
            }
        }
        Norm::L2 => {
            let n = adv
                .iter()
                .zip(x)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            if n > eps {
                let s = eps / n;
                for (a, c) in adv.iter_mut().zip(x) {
                    *a = c + (*a - c) * s;
                }
            }
        }
    }
    for a in adv.iter_mut() {
        *a = a.clamp(0.0, 1.0);
    }
}
