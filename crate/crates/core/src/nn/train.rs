//! Minibatch SGD for victim networks.

use rand::seq::SliceRandom;

use super::loss::ce_with_grad;
use super::{Evaluator, Network, ParamGrads};
use crate::attack::{pgd_attack, Norm};
use crate::error::{Error, Result};
use crate::ibp::IntervalEvaluator;
use crate::rng;
use crate::tensor::Tensor;

/// Projected-gradient augmentation applied before the noise is added.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdAugment {
    /// `l2` radius of the adversarial step.
    pub eps: f64,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Plain,
    /// Every example is perturbed with fresh `N(0, sigma^2)` noise.
    Gaussian {
        sigma: f64,
        pgd: Option<PgdAugment>,
    },
    /// Minimizes `kappa * CE + (1 - kappa) * robust CE`, with the radius
    /// ramped linearly from 0 to `eps` over `ramp_epochs`.
    Ibp {
        eps: f64,
        ramp_epochs: usize,
        kappa: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        match self.mode {
            TrainMode::Plain => {}
            TrainMode::Gaussian { sigma, pgd } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::config(format!(
                        "sigma must be non-negative, got {sigma}"
                    )));
                }
                if let Some(p) = pgd {
                    if !(p.eps > 0.0 && p.lr > 0.0) {
                        return Err(Error::config("pgd augmentation needs positive eps and lr"));
                    }
                }
            }
            TrainMode::Ibp { eps, kappa, .. } => {
                if !(eps >= 0.0 && eps.is_finite()) {
                    return Err(Error::config(format!(
                        "eps must be non-negative, got {eps}"
                    )));
                }
                if !(0.0..=1.0).contains(&kappa) {
                    return Err(Error::config(format!(
                        "kappa must lie in [0, 1], got {kappa}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Radius used by IBP training during `epoch` (zero-based).
pub fn ibp_epoch_eps(eps: f64, ramp_epochs: usize, epoch: usize) -> f64 {
    if ramp_epochs == 0 {
        eps
    } else {
        eps * (epoch as f64 / ramp_epochs as f64).min(1.0)
    }
}

/// Trains a copy of `net` on `(images[i], labels[i])`.
pub fn train(
    net: &Network,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Network> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "dataset needs matching nonempty images and labels, got {} and {}",
            images.len(),
            labels.len()
        )));
    }
    let shape = images[0].shape().to_vec();
    let classes = net.num_classes(&shape)?;
    if let Some(x) = images.iter().find(|x| x.shape() != shape.as_slice()) {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: x.shape().to_vec(),
        });
    }
    if let Some(y) = labels.iter().find(|y| **y >= classes) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {classes} classes"
        )));
    }

    let mut net = net.clone();
    let mut grads = ParamGrads::zeros(&net);
    let len = images[0].len();
    let mut input = vec![0.0; len];
    let mut noise = vec![0.0; len];
    let mut gl = vec![0.0; classes];
    let mut order: Vec<usize> = (0..images.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::derive_path(
            cfg.seed,
            &[0, epoch as u64],
        )));
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            let snapshot = net.clone();
            let mut ev = Evaluator::new(&snapshot, &shape)?;
            let mut iev = match cfg.mode {
                TrainMode::Ibp { .. } => Some(IntervalEvaluator::new(&snapshot, &shape)?),
                _ => None,
            };
            for &i in batch {
                let key = [epoch as u64, i as u64];
                let (y, x) = (labels[i], &images[i]);
                match cfg.mode {
                    TrainMode::Plain => {
                        input
                            .iter_mut()
                            .zip(x.data())
                            .for_each(|(d, v)| *d = *v as f64);
                    }
                    TrainMode::Gaussian { sigma, pgd } => {
                        let base = match pgd {
                            Some(p) => {
                                let seed = rng::derive_path(cfg.seed, &[2, key[0], key[1]]);
                                pgd_attack(&snapshot, x, y, p.eps, Norm::L2, p.steps, p.lr, seed)?
                            }
                            None => x.clone(),
                        };
                        let mut stream =
                            rng::stream(rng::derive_path(cfg.seed, &[1, key[0], key[1]]));
                        rng::fill_box_muller(&mut stream, sigma, &mut noise);
                        for ((d, v), e) in input.iter_mut().zip(base.data()).zip(&noise) {
                            *d = *v as f64 + e;
                        }
                    }
                    TrainMode::Ibp { .. } => {
                        input
                            .iter_mut()
                            .zip(x.data())
                            .for_each(|(d, v)| *d = *v as f64);
                    }
                }
                let natural_weight = match cfg.mode {
                    TrainMode::Ibp { kappa, .. } => kappa,
                    _ => 1.0,
                };
                if natural_weight > 0.0 {
                    let logits = ev.forward(&input);
                    let ce = ce_with_grad(logits, y, Some(&mut gl));
                    total += natural_weight * ce;
                    ev.backward_params(&gl, &mut grads, scale * natural_weight);
                }
                if let (
                    TrainMode::Ibp {
                        eps,
                        ramp_epochs,
                        kappa,
                    },
                    Some(iev),
                ) = (cfg.mode, iev.as_mut())
                {
                    if kappa < 1.0 {
                        iev.set_input(&input, ibp_epoch_eps(eps, ramp_epochs, epoch))?;
                        let robust = iev.robust_loss(y)?;
                        total += (1.0 - kappa) * robust;
                        iev.backward(None, Some((&mut grads, scale * (1.0 - kappa))));
                    }
                }
            }
            if !total.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            net.apply_gradient(&grads, cfg.lr);
        }
        if !net.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(net)
}

/// Fraction of examples whose nominal argmax matches the label.
pub fn accuracy(net: &Network, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut ev = Evaluator::new(net, images[0].shape())?;
    let mut hits = 0usize;
    for (x, y) in images.iter().zip(labels) {
        if crate::tensor::argmax(ev.checked_forward(&x.to_f64())?) == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Affine, Layer};

    fn separable() -> (Vec<Tensor>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let t = i as f32 / 40.0;
            let y = i % 2;
            let x = if y == 0 {
                [0.1 + 0.2 * t, 0.8 - 0.1 * t]
            } else {
                [0.7 + 0.2 * t, 0.2 + 0.1 * t]
            };
            xs.push(Tensor::new(vec![1, 1, 2], x.to_vec()).unwrap());
            ys.push(y);
        }
        (xs, ys)
    }

    fn linear() -> Network {
        Network::new(vec![
            Layer::Flatten,
            Layer::Affine(Affine::new(Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2])).unwrap()),
        ])
        .unwrap()
    }

    fn cfg(epochs: usize, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 0.5,
            batch_size: 8,
            mode,
            seed: 3,
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (xs, ys) = separable();
        let net = linear();
        assert_eq!(
            train(&net, &xs, &ys, &cfg(0, TrainMode::Plain)).unwrap(),
            net
        );
    }

    #[test]
    fn plain_training_separates() {
        let (xs, ys) = separable();
        let net = train(&linear(), &xs, &ys, &cfg(50, TrainMode::Plain)).unwrap();
        assert!(accuracy(&net, &xs, &ys).unwrap() >= 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = separable();
        for mode in [
            TrainMode::Gaussian {
                sigma: 0.1,
                pgd: None,
            },
            TrainMode::Ibp {
                eps: 0.05,
                ramp_epochs: 3,
                kappa: 0.5,
            },
        ] {
            let a = train(&linear(), &xs, &ys, &cfg(5, mode)).unwrap();
            let b = train(&linear(), &xs, &ys, &cfg(5, mode)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let (xs, ys) = separable();
        let mut c = cfg(3, TrainMode::Plain);
        c.lr = 1e300;
        assert!(matches!(
            train(&linear(), &xs, &ys, &c),
            Err(Error::TrainingDiverged { epoch: 0 | 1 | 2 })
        ));
    }

    #[test]
    fn ramp_schedule() {
        assert_eq!(ibp_epoch_eps(0.1, 0, 0), 0.1);
        assert_eq!(ibp_epoch_eps(0.1, 4, 0), 0.0);
        assert_eq!(ibp_epoch_eps(0.1, 4, 2), 0.05);
        assert_eq!(ibp_epoch_eps(0.1, 4, 9), 0.1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (xs, ys) = separable();
        let mut c = cfg(
            1,
            TrainMode::Ibp {
                eps: 0.1,
                ramp_epochs: 1,
                kappa: 1.5,
            },
        );
        assert!(train(&linear(), &xs, &ys, &c).is_err());
        c.mode = TrainMode::Plain;
        c.batch_size = 0;
        assert!(train(&linear(), &xs, &ys, &c).is_err());
        assert!(train(&linear(), &xs, &ys[..3], &cfg(1, TrainMode::Plain)).is_err());
    }
}
