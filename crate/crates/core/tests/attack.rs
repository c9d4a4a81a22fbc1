use shadowcert_core::attack::{
    self, attack_targeted, attack_targeted_observed, attack_untargeted, color_penalty_grad,
    dissim_penalty, initial_perturbation, pgd_attack, spoof_loss_smoothing, spoof_noise, step_seed,
    tv_penalty_grad, tv_penalty_variant, AttackConfig, ChannelMode, Norm, Perturbation,
    SpoofTarget,
};
use shadowcert_core::nn::{cross_entropy, Architecture};
use shadowcert_core::smoothing::SmoothingParams;
use shadowcert_core::{Network, Tensor};
use shadowcert_testkit::nets::{random_image, random_network};
use shadowcert_testkit::{central_differences, reference_ce, reference_logits, straddles_kink};

fn small_cfg(seed: u64, noise_batch: usize, steps: usize) -> AttackConfig {
    let mut cfg = AttackConfig::smoothing(
        SmoothingParams {
            n0: 16,
            n: 64,
            ..SmoothingParams::with_sigma(0.25, seed)
        },
        seed,
    );
    cfg.steps = steps;
    if let SpoofTarget::Smoothing {
        noise_batch: ref mut m,
        ..
    } = cfg.spoof
    {
        *m = noise_batch;
    }
    cfg
}

fn setup(seed: u64) -> (Network, Vec<usize>, Tensor) {
    let (net, shape) = random_network(seed);
    let x = random_image(seed + 17, &shape, 0.1, 0.9);
    (net, shape, x)
}

#[test]
fn spoof_loss_replays_from_published_noise() {
    let (net, shape, x) = setup(5);
    let cfg = small_cfg(3, 2, 1);
    let delta = initial_perturbation(&cfg, &shape).unwrap();
    let d = delta.materialize(shape[0]);
    let ss = step_seed(cfg.seed, 4);
    let lib = spoof_loss_smoothing(&net, &x, &delta, 1, 0.25, 2, ss).unwrap();
    let replay: f64 = (0..2)
        .map(|k| {
            let noise = spoof_noise(ss, k, 0.25, x.len());
            let p: Vec<f64> = (0..x.len())
                .map(|i| x.data()[i] as f64 + d.data()[i] as f64 + noise[i])
                .collect();
            reference_ce(&reference_logits(&net, &shape, &p), 1)
        })
        .sum::<f64>()
        / 2.0;
    assert!((lib - replay).abs() < 1e-12, "{lib} vs {replay}");
}

#[test]
fn noiseless_single_copy_is_cross_entropy() {
    let (net, shape, x) = setup(6);
    let cfg = small_cfg(1, 1, 1);
    let delta = initial_perturbation(&cfg, &shape).unwrap();
    let lib = spoof_loss_smoothing(&net, &x, &delta, 0, 0.0, 1, 99).unwrap();
    let p: Vec<f64> = x
        .data()
        .iter()
        .zip(delta.materialize(shape[0]).data())
        .map(|(a, b)| *a as f64 + *b as f64)
        .collect();
    let direct = cross_entropy(
        &Tensor::from_f64(
            vec![net.num_classes(&shape).unwrap()],
            &reference_logits(&net, &shape, &p),
        )
        .unwrap(),
        0,
    )
    .unwrap();
    assert!((lib - direct).abs() < 1e-5, "{lib} vs {direct}");
    assert!((lib - reference_ce(&reference_logits(&net, &shape, &p), 0)).abs() < 1e-12);
}

#[test]
fn one_step_matches_hand_computed_update() {
    for seed in [2u64, 3] {
        let (net, shape, x) = setup(seed);
        let mut cfg = small_cfg(seed, 3, 1);
        cfg.lambda_s = 0.5;
        let m = 3;
        let mut snaps = Vec::new();
        let res = attack_targeted_observed(&net, &x, 0, &cfg, &mut |_, p: &Perturbation| {
            snaps.push(p.clone())
        })
        .unwrap();
        assert_eq!(snaps.len(), 2);
        let d0 = initial_perturbation(&cfg, &shape).unwrap();
        assert_eq!(snaps[0], d0);
        let img = d0.materialize(shape[0]);

        // Spoof gradient from the oracle, averaged over the step-0 noise.
        let ss = step_seed(cfg.seed, 0);
        let h = 1e-6;
        let mut g = vec![0.0; x.len()];
        let mut kinky = vec![false; x.len()];
        for k in 0..m {
            let noise = spoof_noise(ss, k, 0.25, x.len());
            let p: Vec<f64> = (0..x.len())
                .map(|i| x.data()[i] as f64 + img.data()[i] as f64 + noise[i])
                .collect();
            let fd = central_differences(
                |q| reference_ce(&reference_logits(&net, &shape, q), 0),
                &p,
                h,
            );
            for i in 0..x.len() {
                g[i] += fd[i] / m as f64;
                kinky[i] |= straddles_kink(&net, &shape, &p, i, h);
            }
        }
        let (tv, gtv) = tv_penalty_grad(&img, cfg.tv_variant).unwrap();
        let (color, gc) = color_penalty_grad(&img, cfg.color_penalty).unwrap();
        for i in 0..x.len() {
            g[i] += cfg.lambda_tv * gtv.data()[i] as f64 + cfg.lambda_c * gc.data()[i] as f64;
        }
        let rec = res.trace[0];
        assert!((rec.tv - tv).abs() < 1e-12 && (rec.color - color).abs() < 1e-12);
        assert_eq!(rec.dissim, 0.0);
        let spoof = spoof_loss_smoothing(&net, &x, &d0, 0, 0.25, m, ss).unwrap();
        assert!((rec.spoof_loss - spoof).abs() < 1e-12);

        // One-channel parameters collect the gradient of every channel.
        let plane = d0.data().len();
        for j in 0..plane {
            if (0..shape[0]).any(|c| kinky[c * plane + j]) {
                continue;
            }
            let gj: f64 = (0..shape[0]).map(|c| g[c * plane + j]).sum();
            let expected = d0.data().data()[j] as f64 - cfg.lr * gj;
            let got = snaps[1].data().data()[j] as f64;
            assert!(
                (got - expected).abs() < 1e-6,
                "seed {seed} entry {j}: {got} vs {expected}"
            );
        }
        assert_eq!(&snaps[1], &res.delta);
    }
}

#[test]
fn attacks_are_deterministic_across_thread_counts() {
    let (net, _, x) = setup(8);
    let cfg = small_cfg(4, 4, 5);
    let a = attack_untargeted(&net, &x, 0, &cfg).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| attack_untargeted(&net, &x, 0, &cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(attack_targeted(&net, &x, 1, &cfg).unwrap(), a.runs[0]);
}

#[test]
fn untargeted_with_two_classes_runs_once() {
    let net = Network::build(Architecture::ToyMlp, &[1, 4, 4], 2, 3).unwrap();
    let x = random_image(2, &[1, 4, 4], 0.0, 1.0);
    for y in 0..2 {
        let res = attack_untargeted(&net, &x, y, &small_cfg(1, 2, 3)).unwrap();
        assert_eq!(res.runs.len(), 1);
        assert_eq!(res.best, 0);
        assert_eq!(res.chosen().target, 1 - y);
    }
}

#[test]
fn untargeted_picks_the_selected_run() {
    let (net, _, x) = setup(10);
    let res = attack_untargeted(&net, &x, 0, &small_cfg(2, 2, 4)).unwrap();
    let cands: Vec<attack::Candidate> = res
        .runs
        .iter()
        .map(|r| attack::Candidate {
            success: r.success,
            strength: r.outcome.strength(),
            final_loss: r.final_spoof_loss(),
        })
        .collect();
    assert_eq!(attack::select_best(&cands), Some(res.best));
    let targets: Vec<usize> = res.runs.iter().map(|r| r.target).collect();
    assert!(!targets.contains(&0) && targets.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn pgd_stays_in_ball_and_domain() {
    for seed in 0..6u64 {
        let (net, _, x) = setup(seed);
        for (norm, eps) in [(Norm::Linf, 0.05), (Norm::L2, 0.3)] {
            let adv = pgd_attack(&net, &x, 0, eps, norm, 10, eps / 4.0, seed).unwrap();
            assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let diff: Vec<f64> = adv
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| *a as f64 - *b as f64)
                .collect();
            match norm {
                Norm::Linf => assert!(diff.iter().all(|d| d.abs() <= eps + 1e-7)),
                Norm::L2 => {
                    assert!(diff.iter().map(|d| d * d).sum::<f64>().sqrt() <= eps * (1.0 + 1e-5))
                }
            }
        }
    }
}

#[test]
fn larger_pgd_budget_finds_larger_loss() {
    for seed in 0..8u64 {
        let (net, _, x) = setup(seed);
        let loss = |eps: f64| {
            let adv = pgd_attack(&net, &x, 0, eps, Norm::Linf, 20, eps / 4.0, seed).unwrap();
            net.loss(&adv, &shadowcert_core::nn::Loss::CrossEntropy(0))
                .unwrap()
        };
        let (small, large) = (loss(0.01), loss(0.1));
        assert!(large >= small, "seed {seed}: {large} < {small}");
    }
}

#[test]
fn three_channel_attack_reports_dissim() {
    let (net, shape, x) = setup(9);
    let mut cfg = small_cfg(5, 2, 3);
    cfg.mode = ChannelMode::ThreeChannel;
    cfg.lambda_s = 1.0;
    let res = attack_targeted(&net, &x, 1, &cfg).unwrap();
    let d = res.delta.materialize(shape[0]);
    assert_eq!(d.shape(), x.shape());
    if shape[0] == 3 {
        assert!(res.trace[0].dissim > 0.0);
    }
    let last = res.trace.last().unwrap();
    assert!(dissim_penalty(&d, ChannelMode::ThreeChannel).unwrap() >= 0.0);
    assert!(tv_penalty_variant(&d, cfg.tv_variant).unwrap().is_finite() && last.tv.is_finite());
}
