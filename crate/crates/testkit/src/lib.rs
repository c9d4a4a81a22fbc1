//! Independent reference implementations used as test oracles.
//!
//! Everything here is written for clarity over speed: naive loops, direct
//! summation, bisection. None of it calls into the numeric code under test;
//! only the public network container types are shared.

pub mod checks;
pub mod nets;

use shadowcert_core::nn::Layer;
use shadowcert_core::{Network, Tensor};

/// Activation entering every layer plus the logits, all in `f64`.
pub fn reference_activations(net: &Network, input_shape: &[usize], x: &[f64]) -> Vec<Vec<f64>> {
    let mut shape = input_shape.to_vec();
    let mut acts = vec![x.to_vec()];
    for layer in net.layers() {
        let cur = acts.last().unwrap();
        let (next, next_shape) = match layer {
            Layer::Affine(a) => {
                let (o, i) = (a.weight.shape()[0], a.weight.shape()[1]);
                let w = a.weight.data();
                let y: Vec<f64> = (0..o)
                    .map(|r| {
                        a.bias.data()[r] as f64
                            + (0..i).map(|c| w[r * i + c] as f64 * cur[c]).sum::<f64>()
                    })
                    .collect();
                (y, vec![o])
            }
            Layer::Conv2d(c) => {
                let (f, ch, k) = (
                    c.weight.shape()[0],
                    c.weight.shape()[1],
                    c.weight.shape()[2],
                );
                let (h, w) = (shape[1], shape[2]);
                let (s, p) = (c.stride as isize, c.padding as isize);
                let oh = ((h as isize + 2 * p - k as isize) / s + 1) as usize;
                let ow = ((w as isize + 2 * p - k as isize) / s + 1) as usize;
                let wt = c.weight.data();
                let mut y = vec![0.0; f * oh * ow];
                for fi in 0..f {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut acc = c.bias.data()[fi] as f64;
                            for ci in 0..ch {
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let ii = oi as isize * s - p + ki as isize;
                                        let jj = oj as isize * s - p + kj as isize;
                                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize
                                        {
                                            continue;
                                        }
                                        let xv = cur[(ci * h + ii as usize) * w + jj as usize];
                                        acc += wt[((fi * ch + ci) * k + ki) * k + kj] as f64 * xv;
                                    }
                                }
                            }
                            y[(fi * oh + oi) * ow + oj] = acc;
                        }
                    }
                }
                (y, vec![f, oh, ow])
            }
            Layer::Relu => (
                cur.iter()
                    .map(|v| if *v > 0.0 { *v } else { 0.0 })
                    .collect(),
                shape.clone(),
            ),
            Layer::Flatten => (cur.clone(), vec![cur.len()]),
        };
        acts.push(next);
        shape = next_shape;
    }
    acts
}

pub fn reference_logits(net: &Network, input_shape: &[usize], x: &[f64]) -> Vec<f64> {
    reference_activations(net, input_shape, x).pop().unwrap()
}

/// Inputs to every ReLU layer, concatenated.
pub fn relu_preactivations(net: &Network, input_shape: &[usize], x: &[f64]) -> Vec<f64> {
    let acts = reference_activations(net, input_shape, x);
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .flat_map(|(i, _)| acts[i].clone())
        .collect()
}

/// `-ln softmax(z)[y]` via a log-sum-exp shifted by the maximum.
pub fn reference_ce(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// True when moving coordinate `i` by `+-h` flips the sign of some ReLU
/// preactivation, so a finite difference would straddle a kink.
pub fn straddles_kink(net: &Network, input_shape: &[usize], x: &[f64], i: usize, h: f64) -> bool {
    let sign = |v: &[f64]| -> Vec<bool> { v.iter().map(|p| *p > 0.0).collect() };
    let base = sign(&relu_preactivations(net, input_shape, x));
    let mut probe = x.to_vec();
    for d in [h, -h] {
        probe[i] = x[i] + d;
        if sign(&relu_preactivations(net, input_shape, &probe)) != base {
            return true;
        }
    }
    false
}

/// `|a - b| <= tol * max(|a|, |b|)`.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Location of a scalar parameter: layer index, weight (false) or bias
/// (true), flat index.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef {
    pub layer: usize,
    pub bias: bool,
    pub index: usize,
}

pub fn param_refs(net: &Network) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for (layer, l) in net.layers().iter().enumerate() {
        if let Some((w, b)) = l.params() {
            out.extend((0..w.len()).map(|index| ParamRef {
                layer,
                bias: false,
                index,
            }));
            out.extend((0..b.len()).map(|index| ParamRef {
                layer,
                bias: true,
                index,
            }));
        }
    }
    out
}

fn param_tensor(net: &mut Network, p: ParamRef) -> &mut Tensor {
    match &mut net.layers_mut()[p.layer] {
        Layer::Affine(a) => {
            if p.bias {
                &mut a.bias
            } else {
                &mut a.weight
            }
        }
        Layer::Conv2d(c) => {
            if p.bias {
                &mut c.bias
            } else {
                &mut c.weight
            }
        }
        _ => panic!("layer {} has no parameters", p.layer),
    }
}

/// True when perturbing parameter `p` by `+-h` flips the sign of some ReLU
/// preactivation at `x`.
pub fn param_straddles_kink(
    net: &Network,
    input_shape: &[usize],
    x: &[f64],
    p: ParamRef,
    h: f64,
) -> bool {
    let sign = |n: &Network| -> Vec<bool> {
        relu_preactivations(n, input_shape, x)
            .iter()
            .map(|v| *v > 0.0)
            .collect()
    };
    let base = sign(net);
    [h, -h].iter().any(|d| {
        let mut probe = net.clone();
        let t = param_tensor(&mut probe, p);
        t.data_mut()[p.index] = (t.data()[p.index] as f64 + d) as f32;
        sign(&probe) != base
    })
}

/// Central difference of `f(net)` in one parameter. Parameters are `f32`,
/// so the divisor is the step that was actually representable.
pub fn param_difference(net: &Network, p: ParamRef, h: f64, f: impl Fn(&Network) -> f64) -> f64 {
    let mut probe = net.clone();
    let orig = param_tensor(&mut probe, p).data()[p.index];
    let up = (orig as f64 + h) as f32;
    let down = (orig as f64 - h) as f32;
    param_tensor(&mut probe, p).data_mut()[p.index] = up;
    let fu = f(&probe);
    param_tensor(&mut probe, p).data_mut()[p.index] = down;
    let fd = f(&probe);
    (fu - fd) / (up as f64 - down as f64)
}

/// Naive interval arithmetic over `[lower, upper]`: positive weights take
/// the matching endpoint, negative weights the opposite one.
pub fn reference_interval(
    net: &Network,
    input_shape: &[usize],
    lower: &[f64],
    upper: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    interval_through(net.layers(), input_shape, lower, upper)
}

/// Lower bounds on `z_y - z_j` obtained by propagating the box naively up
/// to the last affine layer and bounding the row differences of that layer
/// directly. The entry at `y` is `+inf`.
pub fn reference_margins(
    net: &Network,
    input_shape: &[usize],
    lower: &[f64],
    upper: &[f64],
    y: usize,
) -> Vec<f64> {
    let layers = net.layers();
    let (last, body) = layers.split_last().unwrap();
    let Layer::Affine(a) = last else {
        panic!("last layer must be affine")
    };
    let (lo, hi) = interval_through(body, input_shape, lower, upper);
    let (o, i) = (a.weight.shape()[0], a.weight.shape()[1]);
    let w = a.weight.data();
    (0..o)
        .map(|j| {
            if j == y {
                return f64::INFINITY;
            }
            let mut m = a.bias.data()[y] as f64 - a.bias.data()[j] as f64;
            for c in 0..i {
                let d = w[y * i + c] as f64 - w[j * i + c] as f64;
                m += if d >= 0.0 { d * lo[c] } else { d * hi[c] };
            }
            m
        })
        .collect()
}

/// Pixel-domain box `[max(x - eps, 0), min(x + eps, 1)]`.
pub fn clipped_box(x: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    (
        x.iter().map(|v| (v - eps).max(0.0)).collect(),
        x.iter().map(|v| (v + eps).min(1.0)).collect(),
    )
}

/// Cross-entropy of the worst-case logits implied by `reference_margins`.
pub fn reference_robust_loss(
    net: &Network,
    input_shape: &[usize],
    x: &[f64],
    eps: f64,
    y: usize,
) -> f64 {
    let (lo, hi) = clipped_box(x, eps);
    let m = reference_margins(net, input_shape, &lo, &hi, y);
    let worst: Vec<f64> = m
        .iter()
        .enumerate()
        .map(|(j, v)| if j == y { 0.0 } else { -v })
        .collect();
    reference_ce(&worst, y)
}

fn interval_through(
    layers: &[Layer],
    input_shape: &[usize],
    lower: &[f64],
    upper: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut shape = input_shape.to_vec();
    let (mut lo, mut hi) = (lower.to_vec(), upper.to_vec());
    for layer in layers {
        match layer {
            Layer::Affine(a) => {
                let (o, i) = (a.weight.shape()[0], a.weight.shape()[1]);
                let w = a.weight.data();
                let mut nl = vec![0.0; o];
                let mut nh = vec![0.0; o];
                for r in 0..o {
                    let (mut l, mut u) = (a.bias.data()[r] as f64, a.bias.data()[r] as f64);
                    for c in 0..i {
                        let wv = w[r * i + c] as f64;
                        if wv >= 0.0 {
                            l += wv * lo[c];
                            u += wv * hi[c];
                        } else {
                            l += wv * hi[c];
                            u += wv * lo[c];
                        }
                    }
                    nl[r] = l;
                    nh[r] = u;
                }
                lo = nl;
                hi = nh;
                shape = vec![o];
            }
            Layer::Conv2d(_) => {
                // A convolution is a sparse affine map; materialize it one
                // output at a time through the point reference.
                let probe_shape = shape.clone();
                let n_in = lo.len();
                let zero = vec![0.0; n_in];
                let bias_acts = reference_single_layer(layer, &probe_shape, &zero);
                let n_out = bias_acts.0.len();
                let mut nl = bias_acts.0.clone();
                let mut nh = bias_acts.0.clone();
                let mut unit = vec![0.0; n_in];
                for j in 0..n_in {
                    unit[j] = 1.0;
                    let col = reference_single_layer(layer, &probe_shape, &unit).0;
                    unit[j] = 0.0;
                    for r in 0..n_out {
                        let wv = col[r] - bias_acts.0[r];
                        if wv >= 0.0 {
                            nl[r] += wv * lo[j];
                            nh[r] += wv * hi[j];
                        } else {
                            nl[r] += wv * hi[j];
                            nh[r] += wv * lo[j];
                        }
                    }
                }
                lo = nl;
                hi = nh;
                shape = bias_acts.1;
            }
            Layer::Relu => {
                lo.iter_mut().for_each(|v| *v = v.max(0.0));
                hi.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Layer::Flatten => shape = vec![lo.len()],
        }
    }
    (lo, hi)
}

fn reference_single_layer(layer: &Layer, shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let net = Network::new(vec![layer.clone(), Layer::Flatten]).unwrap();
    let acts = reference_activations(&net, shape, x);
    let out_shape = layer.output_shape(shape).unwrap();
    (acts[1].clone(), out_shape)
}

/// `C(n, k)` by the multiplicative formula; exact for the small `n` used in
/// tests.
pub fn binomial_coefficient(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `P(Bin(n, p) >= k)` by direct summation.
pub fn binomial_tail_direct(k: u64, n: u64, p: f64) -> f64 {
    (k..=n)
        .map(|i| binomial_coefficient(n, i) * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32))
        .sum()
}

/// Largest `L` with `P(Bin(n, L) >= k) <= alpha`, by 200 bisection steps on
/// the directly summed tail.
pub fn clopper_pearson_oracle(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binomial_tail_direct(k, n, mid) <= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// `alpha`-quantile of `Beta(k, n - k + 1)` from the regularized incomplete
/// beta function; an alternative closed form of the same bound.
pub fn clopper_pearson_beta(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if statrs::function::beta::beta_reg(k as f64, (n - k + 1) as f64, mid) <= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub fn phi_oracle(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// `z` with `phi_oracle(z) = p` by bisection on `[-40, 40]`. Upper-tail
/// arguments are reflected, since `1 - p` is exact there and `phi_oracle`
/// cannot resolve probabilities within an ulp of 1.
pub fn inv_phi_oracle(p: f64) -> f64 {
    if p > 0.5 {
        return -inv_phi_oracle(1.0 - p);
    }
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi_oracle(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided exact binomial test of `k` successes in `n` against `p = 1/2`:
/// total probability of outcomes no more likely than the observed one.
pub fn binom_test_oracle(k: u64, n: u64) -> f64 {
    let pmf = |i: u64| binomial_coefficient(n, i) * 0.5f64.powi(n as i32);
    let observed = pmf(k);
    let total: f64 = (0..=n)
        .map(pmf)
        .filter(|q| *q <= observed * (1.0 + 1e-7))
        .sum();
    total.min(1.0)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree_with_each_other() {
        for n in [1u64, 7, 30] {
            for k in 0..=n {
                let a = clopper_pearson_oracle(k, n, 0.01);
                let b = clopper_pearson_beta(k, n, 0.01);
                assert!((a - b).abs() < 1e-9, "{k}/{n}: {a} vs {b}");
            }
        }
        // Reference value for the k = 5, n = 10, alpha = 0.05 bound.
        assert!((clopper_pearson_oracle(5, 10, 0.05) - 0.2224).abs() < 1e-3);
        let z = inv_phi_oracle(0.975);
        assert!((z - 1.959963984540054).abs() < 1e-10, "{z}");
        assert!((binom_test_oracle(60, 100) - 0.056887).abs() < 1e-5);
        assert_eq!(binomial_coefficient(30, 15), 155117520.0);
    }

    #[test]
    fn statistics_and_certifier_suites_pass() {
        let f = checks::statistics_suite(12, &[0.05, 0.001], 90);
        assert!(f.is_empty(), "{f:?}");
        let f = checks::certifier_suite(0.25);
        assert!(f.is_empty(), "{f:?}");
    }

    #[test]
    fn small_gradient_suite_passes() {
        let rep = checks::gradient_suite(4, 11, 1e-4);
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn small_soundness_suite_passes() {
        let rep = checks::ibp_soundness(3, 200, &[0.01, 0.1], 5);
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn random_networks_cover_both_kinds() {
        use shadowcert_core::nn::Layer;
        let conv = |s| {
            nets::random_network(s)
                .0
                .layers()
                .iter()
                .any(|l| matches!(l, Layer::Conv2d(_)))
        };
        assert!(!conv(0) && conv(1));
    }
}
