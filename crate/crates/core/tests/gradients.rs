use shadowcert_core::ibp::{self, IntervalEvaluator};
use shadowcert_core::Tensor;
use shadowcert_testkit::checks::{gradient_suite, ibp_soundness};
use shadowcert_testkit::nets::{random_image, random_network};
use shadowcert_testkit::{clipped_box, reference_interval, reference_logits};

#[test]
fn analytic_gradients_match_finite_differences() {
    let rep = gradient_suite(8, 101, 1e-4);
    assert!(rep.passed(), "{rep:#?}");
    // Kink exclusion must leave the bulk of the points checked.
    assert!(rep.skipped * 10 < rep.checked, "{rep:#?}");
}

#[test]
fn interval_bounds_contain_sampled_logits() {
    let rep = ibp_soundness(6, 500, &[0.01, 0.05, 0.1], 202);
    assert!(rep.passed(), "{rep:#?}");
    assert!(rep.min_slack >= 0.0);
}

#[test]
fn elision_is_strictly_tighter_somewhere() {
    let mut strict = 0;
    for seed in 0..10 {
        let (net, shape) = random_network(seed);
        let x = random_image(seed + 50, &shape, 0.0, 1.0);
        let xs = x.to_f64();
        let y = x_label(&net, &shape, &xs);
        let (lo, hi) = clipped_box(&xs, 0.1);
        let (nlo, nhi) = reference_interval(&net, &shape, &lo, &hi);
        let m = ibp::margin_bounds(&net, &x, y, 0.1).unwrap();
        for j in (0..m.len()).filter(|&j| j != y) {
            let naive = nlo[y] - nhi[j];
            assert!(
                m[j] >= naive - 1e-9,
                "seed {seed} class {j}: {} < {naive}",
                m[j]
            );
            if m[j] > naive + 1e-6 {
                strict += 1;
            }
        }
    }
    assert!(strict > 0);
}

fn x_label(net: &shadowcert_core::Network, shape: &[usize], x: &[f64]) -> usize {
    shadowcert_core::tensor::argmax(&reference_logits(net, shape, x))
}

#[test]
fn certify_linf_uses_elided_margins() {
    let (net, shape) = random_network(4);
    let x = random_image(9, &shape, 0.2, 0.8);
    let y = x_label(&net, &shape, &x.to_f64());
    for eps in [0.0, 0.001, 0.05] {
        let out = ibp::certify_linf(&net, &x, y, eps).unwrap();
        let m = ibp::margin_bounds(&net, &x, y, eps).unwrap();
        let min = (0..m.len())
            .filter(|&j| j != y)
            .map(|j| m[j])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.certified, min > 0.0);
        assert_eq!(out.min_margin(), min);
    }
}

#[test]
fn robust_loss_wrapper_matches_evaluator() {
    let (net, shape) = random_network(7);
    let x = random_image(3, &shape, 0.1, 0.9);
    let (v, g) = ibp::ibp_robust_loss_grad(&net, &x, 1, 0.05).unwrap();
    let mut ev = IntervalEvaluator::new(&net, &shape).unwrap();
    ev.set_input(&x.to_f64(), 0.05).unwrap();
    assert_eq!(ev.robust_loss(1).unwrap(), v);
    assert_eq!(ibp::ibp_robust_loss(&net, &x, 1, 0.05).unwrap(), v);
    let mut gx = vec![0.0; x.len()];
    ev.backward(Some(&mut gx), None);
    assert_eq!(Tensor::from_f64(shape, &gx).unwrap(), g);
}
