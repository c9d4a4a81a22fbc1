//! Gaussian randomized smoothing: Monte Carlo class counts, certified `l2`
//! radii and abstaining prediction.

pub mod stats;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{Evaluator, Network};
use crate::rng;
use crate::tensor::{argmax, Tensor};

pub use stats::{binom_test_half, clopper_pearson_lower, inv_norm_cdf, norm_cdf};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    /// Noise standard deviation in pixel units.
    pub sigma: f64,
    /// Draws used to pick the candidate class.
    pub n0: u64,
    /// Draws used to bound the candidate's probability.
    pub n: u64,
    /// Failure probability of the certificate.
    pub alpha: f64,
    pub seed: u64,
}

impl SmoothingParams {
    /// n0 = 32, n = 400, alpha = 0.001.
    pub fn with_sigma(sigma: f64, seed: u64) -> Self {
        SmoothingParams {
            sigma,
            n0: 32,
            n: 400,
            alpha: 0.001,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.n0 == 0 || self.n == 0 {
            return Err(Error::config("n0 and n must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothingOutcome {
    Certified {
        label: usize,
        /// Certified `l2` radius, `sigma * inv_norm_cdf(pa_lower)`.
        radius: f64,
        pa_lower: f64,
    },
    Abstain,
}

impl SmoothingOutcome {
    pub fn label(&self) -> Option<usize> {
        match self {
            SmoothingOutcome::Certified { label, .. } => Some(*label),
            SmoothingOutcome::Abstain => None,
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self {
            SmoothingOutcome::Certified { radius, .. } => Some(*radius),
            SmoothingOutcome::Abstain => None,
        }
    }
}

const CHUNK: u64 = 64;

/// Per-class counts of `argmax forward(x + eta_i)` over `count` draws
/// `eta_i ~ N(0, sigma^2 I)`. Draw `i` uses the noise stream keyed by
/// `derive_seed(seed, i)`, so counts do not depend on scheduling.
pub fn sample_counts(
    net: &Network,
    x: &Tensor,
    sigma: f64,
    count: u64,
    seed: u64,
) -> Result<Vec<u64>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let probe = Evaluator::new(net, x.shape())?;
    let classes = probe.classes();
    let base = x.to_f64();
    let chunks: Vec<u64> = (0..count.div_ceil(CHUNK)).collect();
    let partials: Vec<Vec<u64>> = chunks
        .par_iter()
        .map(|&c| {
            let mut ev = probe.clone();
            let mut noise = vec![0.0; base.len()];
            let mut counts = vec![0u64; classes];
            for i in c * CHUNK..((c + 1) * CHUNK).min(count) {
                let mut stream = rng::stream(rng::derive_seed(seed, i));
                rng::fill_box_muller(&mut stream, sigma, &mut noise);
                for ((d, b), e) in ev.input_mut().iter_mut().zip(&base).zip(&noise) {
                    *d = b + e;
                }
                counts[argmax(ev.run())] += 1;
            }
            counts
        })
        .collect();
    let mut counts = vec![0u64; classes];
    for p in partials {
        for (a, b) in counts.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(counts)
}

/// Certificate from an estimation count: abstains unless the lower
/// confidence bound on the candidate's probability exceeds 1/2.
pub fn outcome_from_count(
    label: usize,
    top_count: u64,
    n: u64,
    alpha: f64,
    sigma: f64,
) -> Result<SmoothingOutcome> {
    let pa_lower = clopper_pearson_lower(top_count, n, alpha)?;
    if pa_lower <= 0.5 {
        return Ok(SmoothingOutcome::Abstain);
    }
    let radius = sigma * inv_norm_cdf(pa_lower)?;
    if radius <= 0.0 {
        return Ok(SmoothingOutcome::Abstain);
    }
    Ok(SmoothingOutcome::Certified {
        label,
        radius,
        pa_lower,
    })
}

/// Select a candidate class from `n0` draws, then certify it from a fresh
/// `n`-draw count.
pub fn certify(net: &Network, x: &Tensor, params: &SmoothingParams) -> Result<SmoothingOutcome> {
    params.validate()?;
    let selection = sample_counts(
        net,
        x,
        params.sigma,
        params.n0,
        rng::derive_seed(params.seed, 0),
    )?;
    let candidate = argmax(&selection);
    let estimation = sample_counts(
        net,
        x,
        params.sigma,
        params.n,
        rng::derive_seed(params.seed, 1),
    )?;
    outcome_from_count(
        candidate,
        estimation[candidate],
        params.n,
        params.alpha,
        params.sigma,
    )
}

/// Top class when a two-sided binomial test of top versus runner-up counts
/// rejects equality at level `alpha`, otherwise `None` (abstain).
pub fn predict_from_counts(counts: &[u64], alpha: f64) -> Option<usize> {
    let top = argmax(counts);
    let runner_up = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, c)| *c)
        .max()
        .unwrap_or(0);
    let (a, b) = (counts[top], runner_up);
    (binom_test_half(a, a + b) <= alpha).then_some(top)
}

pub fn predict(
    net: &Network,
    x: &Tensor,
    sigma: f64,
    n: u64,
    alpha: f64,
    seed: u64,
) -> Result<Option<usize>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let counts = sample_counts(net, x, sigma, n, seed)?;
    Ok(predict_from_counts(&counts, alpha))
}
