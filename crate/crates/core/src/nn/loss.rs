use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss functionals on the logit vector that the engine can differentiate.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// Cross-entropy toward a fixed class.
    CrossEntropy(usize),
    /// Weighted sum of cross-entropy terms. Nested sums are not supported.
    WeightedSum(Vec<(f64, Loss)>),
}

impl Loss {
    /// Evaluates the loss and overwrites `grad` with its logit gradient.
    pub fn value_and_grad(&self, logits: &[f64], grad: &mut [f64]) -> Result<f64> {
        match self {
            Loss::CrossEntropy(label) => {
                check_label(*label, logits.len())?;
                Ok(ce_with_grad(logits, *label, Some(grad)))
            }
            Loss::WeightedSum(terms) => {
                if terms.is_empty() {
                    return Err(Error::config("empty weighted loss sum"));
                }
                grad.fill(0.0);
                let mut scratch = vec![0.0; logits.len()];
                let mut total = 0.0;
                for (weight, term) in terms {
                    let Loss::CrossEntropy(label) = term else {
                        return Err(Error::config("nested loss sums are not supported"));
                    };
                    if !weight.is_finite() {
                        return Err(Error::config("loss weights must be finite"));
                    }
                    check_label(*label, logits.len())?;
                    total += weight * ce_with_grad(logits, *label, Some(&mut scratch));
                    for (g, s) in grad.iter_mut().zip(&scratch) {
                        *g += weight * s;
                    }
                }
                Ok(total)
            }
        }
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    let z: Vec<f64> = logits.to_f64();
    Ok(ce_with_grad(&z, label, None))
}

/// Max-shifted log-sum-exp cross-entropy; writes `softmax - onehot` into
/// `grad` when given.
pub(crate) fn ce_with_grad(logits: &[f64], label: usize, grad: Option<&mut [f64]>) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    let lse = m + sum.ln();
    if let Some(grad) = grad {
        for (g, z) in grad.iter_mut().zip(logits) {
            *g = (z - m).exp() / sum;
        }
        grad[label] -= 1.0;
    }
    lse - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let ce = cross_entropy(&Tensor::vector(&[0.3; 10]), 4).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let ce = cross_entropy(&Tensor::vector(&[1000.0, 0.0]), 0).unwrap();
        assert!(ce.is_finite() && ce >= 0.0 && ce < 1e-12);
        let ce = cross_entropy(&Tensor::vector(&[1000.0, 0.0]), 1).unwrap();
        assert!((ce - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn three_logit_value() {
        let ce = cross_entropy(&Tensor::vector(&[1.0, 2.0, 3.0]), 1).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e * e / (e + e * e + e * e * e)).ln();
        assert!((ce - expected).abs() < 1e-12);
        assert!((ce - 1.407606).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        assert!(cross_entropy(&Tensor::vector(&[0.0, 1.0]), 2).is_err());
    }

    #[test]
    fn weighted_sum_combines_terms() {
        let z = [0.5, -1.0, 2.0];
        let mut g = [0.0; 3];
        let loss = Loss::WeightedSum(vec![
            (0.25, Loss::CrossEntropy(0)),
            (0.75, Loss::CrossEntropy(2)),
        ]);
        let v = loss.value_and_grad(&z, &mut g).unwrap();
        let a = ce_with_grad(&z, 0, None);
        let b = ce_with_grad(&z, 2, None);
        assert!((v - (0.25 * a + 0.75 * b)).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn nested_sums_are_rejected() {
        let inner = Loss::WeightedSum(vec![(1.0, Loss::CrossEntropy(0))]);
        let loss = Loss::WeightedSum(vec![(1.0, inner)]);
        let mut g = [0.0; 2];
        assert!(matches!(
            loss.value_and_grad(&[0.0, 0.0], &mut g),
            Err(Error::InvalidConfig(_))
        ));
        assert!(Loss::WeightedSum(vec![])
            .value_and_grad(&[0.0, 0.0], &mut g)
            .is_err());
    }
}
