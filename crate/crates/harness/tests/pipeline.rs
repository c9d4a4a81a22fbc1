use shadowcert_core::attack::{AttackConfig, IbpSpoofLoss, SpoofTarget};
use shadowcert_core::nn::{train, Architecture, TrainConfig, TrainMode};
use shadowcert_core::smoothing::SmoothingParams;
use shadowcert_core::Network;
use shadowcert_harness::data::{self, gen_synthetic, Dataset};
use shadowcert_harness::experiments::{
    ablation_config, run_ablation, run_ibp_experiment, run_radius_experiment, IbpExperiment,
    RadiusExperiment, Sweep,
};
use shadowcert_harness::report::{verify_dir, Report, Table};

fn trained(arch: Architecture, mode: TrainMode, epochs: usize) -> (Network, Dataset) {
    let d = gen_synthetic(4, 10, 6, 6, 1).unwrap();
    let net = Network::build(arch, d.image_shape().unwrap(), 4, 2).unwrap();
    let cfg = TrainConfig {
        epochs,
        lr: 0.05,
        batch_size: 8,
        mode,
        seed: 3,
    };
    (train(&net, &d.images, &d.labels, &cfg).unwrap(), d)
}

#[test]
fn toy_mlp_fits_the_synthetic_set() {
    let d = gen_synthetic(10, 20, 8, 8, 4).unwrap();
    let net = Network::build(Architecture::ToyMlp, d.image_shape().unwrap(), 10, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        lr: 0.05,
        batch_size: 16,
        mode: TrainMode::Plain,
        seed: 2,
    };
    let net = train(&net, &d.images, &d.labels, &cfg).unwrap();
    let acc = shadowcert_core::nn::train::accuracy(&net, &d.images, &d.labels).unwrap();
    assert!(acc >= 0.9, "train accuracy {acc}");
}

#[test]
fn dataset_files_round_trip() {
    let d = gen_synthetic(3, 4, 5, 4, 9).unwrap();
    let bytes = data::encode(&d).unwrap();
    let back = data::decode(&bytes).unwrap();
    assert_eq!(back.images, d.images);
    assert_eq!(back.labels, d.labels);
    assert_eq!(data::encode(&back).unwrap(), bytes);
    assert!(data::decode(&bytes[..bytes.len() - 1]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dset");
    data::save(&d, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

fn radius_setup(images: usize) -> (Network, Dataset, RadiusExperiment) {
    let (net, d) = trained(
        Architecture::ToyMlp,
        TrainMode::Gaussian {
            sigma: 0.25,
            pgd: None,
        },
        10,
    );
    let cert = SmoothingParams {
        n0: 16,
        n: 100,
        ..SmoothingParams::with_sigma(0.25, 0)
    };
    let mut attack = AttackConfig::smoothing(cert, 0);
    attack.steps = 5;
    if let SpoofTarget::Smoothing {
        ref mut noise_batch,
        ..
    } = attack.spoof
    {
        *noise_batch = 8;
    }
    (
        net,
        d,
        RadiusExperiment {
            cert,
            attack,
            images,
            seed: 11,
        },
    )
}

fn csvs(report: &Report) -> Vec<String> {
    report
        .tables
        .iter()
        .map(|(_, t)| t.to_csv().unwrap())
        .collect()
}

#[test]
fn radius_report_round_trips_and_verifies() {
    let (net, d, exp) = radius_setup(3);
    let report = run_radius_experiment(&net, &d, &exp, "radius").unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    let checked = verify_dir(dir.path()).unwrap();
    assert_eq!(checked.len(), 1);
    for (name, table) in &report.tables {
        let back = Table::read(&dir.path().join(format!("radius_{name}.csv"))).unwrap();
        assert_eq!(&back, table);
    }
    let rows = report.table("rows").unwrap();
    let ok = (0..rows.rows.len())
        .filter(|&r| rows.cell(r, "status").unwrap() == "ok")
        .count();
    assert!(ok <= 3);

    // A hand-edited summary no longer matches its rows.
    let path = dir.path().join("radius_summary.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    cells[1] = "999".into();
    lines[1] = cells.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(verify_dir(dir.path()).is_err());
}

#[test]
fn radius_experiment_is_deterministic_across_pools() {
    let (net, d, exp) = radius_setup(2);
    let a = run_radius_experiment(&net, &d, &exp, "r").unwrap();
    let b = run_radius_experiment(&net, &d, &exp, "r").unwrap();
    let c = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_radius_experiment(&net, &d, &exp, "r").unwrap());
    assert_eq!(csvs(&a), csvs(&b));
    assert_eq!(csvs(&a), csvs(&c));
}

#[test]
fn ibp_experiment_reports_both_methods() {
    let mode = TrainMode::Ibp {
        eps: 0.03,
        ramp_epochs: 5,
        kappa: 0.5,
    };
    let (net, d) = trained(Architecture::ToyMlp, mode, 10);
    let mut attack = AttackConfig::ibp(0.03, 0.001, 0);
    attack.steps = 20;
    let shadow = IbpExperiment {
        attack,
        images: 8,
        seed: 5,
    };
    let a = run_ibp_experiment(&net, &d, &shadow, "ibp").unwrap();
    if let SpoofTarget::Ibp { ref mut loss, .. } = attack.spoof {
        *loss = IbpSpoofLoss::Natural;
    }
    let plain = IbpExperiment { attack, ..shadow };
    let b = run_ibp_experiment(&net, &d, &plain, "ibp_plain").unwrap();
    let summary = |r: &Report, col: &str| {
        r.table("summary")
            .unwrap()
            .cell(0, col)
            .unwrap()
            .to_string()
    };
    assert_eq!(summary(&a, "method"), "shadow");
    assert_eq!(summary(&b, "method"), "plain_ce");
    assert_eq!(summary(&a, "count"), "8");
    assert_eq!(a.table("rows").unwrap().rows.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    b.write(dir.path()).unwrap();
    assert_eq!(verify_dir(dir.path()).unwrap().len(), 2);
}

#[test]
fn ablation_has_one_row_per_cell_and_image() {
    let (net, d) = trained(
        Architecture::ToyMlp,
        TrainMode::Gaussian {
            sigma: 0.25,
            pgd: None,
        },
        5,
    );
    let tiny = d.one_per_class();
    let mut base = ablation_config(SmoothingParams {
        n0: 8,
        n: 32,
        ..SmoothingParams::with_sigma(0.25, 0)
    });
    base.steps = 4;
    if let SpoofTarget::Smoothing {
        ref mut noise_batch,
        ..
    } = base.spoof
    {
        *noise_batch = 4;
    }
    for sweep in [
        Sweep::lambda_tv_grid(),
        Sweep::lambda_s_grid(),
        Sweep::Steps { last: 4 },
    ] {
        let cells = match &sweep {
            Sweep::Steps { last } => last + 1,
            Sweep::LambdaTv(g) | Sweep::LambdaS(g) => g.len(),
        };
        let out = run_ablation(&net, &tiny, &base, &sweep, 7).unwrap();
        let rows = out.report.table("rows").unwrap();
        assert_eq!(rows.rows.len(), cells * tiny.len(), "{}", sweep.name());
        assert_eq!(out.report.table("summary").unwrap().rows.len(), cells);
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        assert_eq!(verify_dir(dir.path()).unwrap().len(), 1);
        let pictures = std::fs::read_dir(dir.path().join(&out.report.prefix))
            .unwrap()
            .count();
        assert_eq!(pictures, out.images.len());
        assert!(pictures >= rows.rows.len());
    }
    assert!(run_ablation(&net, &tiny, &base, &Sweep::Steps { last: 5 }, 7).is_err());
}
