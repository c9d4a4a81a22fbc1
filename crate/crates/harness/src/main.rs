use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use shadowcert_core::attack::{AttackConfig, ChannelMode, ColorPenalty, IbpSpoofLoss, SpoofTarget};
use shadowcert_core::nn::format as snet;
use shadowcert_core::nn::train::{accuracy, train, PgdAugment, TrainConfig, TrainMode};
use shadowcert_core::smoothing::{self, SmoothingParams};
use shadowcert_core::{ibp, rng, Architecture, Network};
use shadowcert_harness::data::{self, Dataset};
use shadowcert_harness::experiments::{
    ablation_config, family_summary, run_ablation, run_ibp_experiment, run_radius_experiment,
    spread_annotation, IbpExperiment, RadiusExperiment, Sweep,
};
use shadowcert_harness::report::{fmt_num, verify_dir, Table};
use shadowcert_harness::HarnessError;

#[derive(Parser)]
#[command(
    name = "shadowcert",
    version,
    about = "Certificate spoofing experiments on small networks"
)]
struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, test and one-per-class datasets.
    GenData(GenData),
    /// Train a victim network.
    Train(TrainArgs),
    /// Certify every image of a dataset.
    Certify(CertifyArgs),
    /// Run the spoofing experiment against one or more victims.
    Attack(AttackArgs),
    /// Sweep one attack parameter.
    Ablate(AblateArgs),
    /// Recompute every report aggregate in a directory from its rows.
    ReportVerify(VerifyArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    ToyMlp,
    ToyCnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainKind {
    Plain,
    Gaussian,
    GaussianPgd,
    Ibp,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::ToyMlp)]
    arch: Arch,
    #[arg(long, value_enum, default_value_t = TrainKind::Plain)]
    mode: TrainKind,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Noise level of gaussian training.
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    /// `l2` radius of the PGD augmentation.
    #[arg(long, default_value_t = 0.25)]
    pgd_eps: f64,
    #[arg(long, default_value_t = 3)]
    pgd_steps: usize,
    /// IBP training radius.
    #[arg(long, default_value_t = 0.03)]
    eps: f64,
    /// Epochs over which the IBP radius ramps up; defaults to half the run.
    #[arg(long)]
    ramp_epochs: Option<usize>,
    /// Weight of the natural loss in IBP training.
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    Smoothing,
    Ibp,
}

#[derive(Args, Clone)]
struct SmoothingArgs {
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = 32)]
    n0: u64,
    #[arg(long, default_value_t = 400)]
    n: u64,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
}

impl SmoothingArgs {
    fn params(&self) -> SmoothingParams {
        SmoothingParams {
            sigma: self.sigma,
            n0: self.n0,
            n: self.n,
            alpha: self.alpha,
            seed: 0,
        }
    }
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Target::Smoothing)]
    target: Target,
    #[command(flatten)]
    smoothing: SmoothingArgs,
    #[arg(long, default_value_t = 0.03)]
    eps: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "1ch")]
    One,
    #[value(name = "3ch")]
    Three,
}

#[derive(Clone, Copy, ValueEnum)]
enum Color {
    Meanabs,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum IbpLoss {
    Robust,
    Natural,
}

/// Overrides of the attack defaults of the chosen target.
#[derive(Args, Clone)]
struct AttackFlags {
    #[arg(long)]
    lambda_tv: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    noise_batch: Option<usize>,
    #[arg(long, value_enum)]
    color_penalty: Option<Color>,
}

impl AttackFlags {
    fn apply(&self, cfg: &mut AttackConfig) {
        if let Some(v) = self.lambda_tv {
            cfg.lambda_tv = v;
        }
        if let Some(v) = self.lambda_c {
            cfg.lambda_c = v;
        }
        if let Some(v) = self.lambda_s {
            cfg.lambda_s = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                Mode::One => ChannelMode::OneChannel,
                Mode::Three => ChannelMode::ThreeChannel,
            };
        }
        if let Some(c) = self.color_penalty {
            cfg.color_penalty = match c {
                Color::Meanabs => ColorPenalty::MeanAbs,
                Color::L2 => ColorPenalty::L2,
            };
        }
        if let (Some(m), SpoofTarget::Smoothing { noise_batch, .. }) =
            (self.noise_batch, &mut cfg.spoof)
        {
            *noise_batch = m;
        }
    }
}

/// Learning rate of the IBP attack on `[0, 1]` pixels.
const IBP_ATTACK_LR: f64 = 0.001;

#[derive(Args)]
struct AttackArgs {
    /// Victim model; repeat to aggregate over a family.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Target::Smoothing)]
    target: Target,
    #[command(flatten)]
    smoothing: SmoothingArgs,
    #[arg(long, default_value_t = 0.03)]
    eps: f64,
    /// Spoofing loss of the IBP attack; `natural` is the plain-CE baseline.
    #[arg(long, value_enum, default_value_t = IbpLoss::Robust)]
    ibp_loss: IbpLoss,
    /// Number of images to attack.
    #[arg(long, default_value_t = 50)]
    images: usize,
    /// File prefix of the report; defaults to the experiment name.
    #[arg(long)]
    prefix: Option<String>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Steps,
    LambdaTv,
    LambdaS,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    sweep: SweepKind,
    #[command(flatten)]
    smoothing: SmoothingArgs,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    out: PathBuf,
}

fn load_model(path: &Path) -> Result<Network> {
    snet::load(path)
        .map_err(HarnessError::from)
        .with_context(|| format!("loading model {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    data::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn gen_data(a: &GenData, seed: u64) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(HarnessError::from)?;
    let train = data::gen_synthetic(
        a.classes,
        a.per_class,
        a.width,
        a.height,
        rng::derive_seed(seed, 0),
    )?;
    let test = data::gen_synthetic(
        a.classes,
        a.test_per_class,
        a.width,
        a.height,
        rng::derive_seed(seed, 1),
    )?;
    data::save(&train, &a.out.join("train.dset"))?;
    data::save(&test, &a.out.join("test.dset"))?;
    data::save(&test.one_per_class(), &a.out.join("tiny.dset"))?;
    println!(
        "wrote {} train, {} test images to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    let data = load_data(&a.data)?;
    let shape = data
        .image_shape()
        .ok_or_else(|| HarnessError::Invalid("empty dataset".into()))?
        .to_vec();
    let arch = match a.arch {
        Arch::ToyMlp => Architecture::ToyMlp,
        Arch::ToyCnn => Architecture::ToyCnn,
    };
    let net = Network::build(arch, &shape, data.classes, rng::derive_seed(seed, 0))
        .map_err(HarnessError::from)?;
    let mode = match a.mode {
        TrainKind::Plain => TrainMode::Plain,
        TrainKind::Gaussian => TrainMode::Gaussian {
            sigma: a.sigma,
            pgd: None,
        },
        TrainKind::GaussianPgd => TrainMode::Gaussian {
            sigma: a.sigma,
            pgd: Some(PgdAugment {
                eps: a.pgd_eps,
                steps: a.pgd_steps,
                lr: a.pgd_eps / 2.0,
            }),
        },
        TrainKind::Ibp => TrainMode::Ibp {
            eps: a.eps,
            ramp_epochs: a.ramp_epochs.unwrap_or(a.epochs / 2),
            kappa: a.kappa,
        },
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        mode,
        seed: rng::derive_seed(seed, 1),
    };
    let net = train(&net, &data.images, &data.labels, &cfg).map_err(HarnessError::from)?;
    let acc = accuracy(&net, &data.images, &data.labels).map_err(HarnessError::from)?;
    snet::save(&net, &a.model).map_err(HarnessError::from)?;
    println!(
        "train accuracy {}; wrote {}",
        fmt_num(acc),
        a.model.display()
    );
    Ok(())
}

fn certify_cmd(a: &CertifyArgs, seed: u64) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let mut t = Table::new(&["image", "label", "predicted", "certified", "strength"]);
    for (i, (x, y)) in data.images.iter().zip(&data.labels).enumerate() {
        let (pred, cert, strength) = match a.target {
            Target::Smoothing => {
                let mut p = a.smoothing.params();
                p.seed = rng::derive_seed(seed, i as u64);
                let o = smoothing::certify(&net, x, &p).map_err(HarnessError::from)?;
                (o.label(), o.label().is_some(), o.radius())
            }
            Target::Ibp => {
                let o = ibp::certify_point(&net, x, a.eps).map_err(HarnessError::from)?;
                (Some(o.label), o.certified, Some(o.min_margin()))
            }
        };
        t.push(vec![
            i.to_string(),
            y.to_string(),
            pred.map(|p| p.to_string()).unwrap_or_default(),
            if cert { "1" } else { "0" }.into(),
            strength.map(fmt_num).unwrap_or_default(),
        ]);
    }
    std::fs::create_dir_all(&a.out).map_err(HarnessError::from)?;
    let path = a.out.join("certify.csv");
    t.write(&path)?;
    let certified = t.rows.iter().filter(|r| r[3] == "1").count();
    println!(
        "{certified}/{} certified; wrote {}",
        data.len(),
        path.display()
    );
    Ok(())
}

fn attack_cmd(a: &AttackArgs, seed: u64) -> Result<()> {
    let data = load_data(&a.data)?;
    match a.target {
        Target::Smoothing => {
            let cert = a.smoothing.params();
            let mut attack = AttackConfig::smoothing(cert, 0);
            a.attack.apply(&mut attack);
            let exp = RadiusExperiment {
                cert,
                attack,
                images: a.images,
                seed,
            };
            let prefix = a.prefix.clone().unwrap_or_else(|| "radius".into());
            for (m, path) in a.model.iter().enumerate() {
                let net = load_model(path)?;
                let name = if a.model.len() == 1 {
                    prefix.clone()
                } else {
                    format!("{prefix}_m{m}")
                };
                let report = run_radius_experiment(&net, &data, &exp, &name)?;
                report.write(&a.out)?;
                print_summary(&report.tables[1].1);
                if let Some(note) = spread_annotation(&report) {
                    println!("{note}");
                }
            }
        }
        Target::Ibp => {
            let mut attack = AttackConfig::ibp(a.eps, IBP_ATTACK_LR, 0);
            let loss = match a.ibp_loss {
                IbpLoss::Robust => IbpSpoofLoss::Robust,
                IbpLoss::Natural => IbpSpoofLoss::Natural,
            };
            attack.spoof = SpoofTarget::Ibp { eps: a.eps, loss };
            a.attack.apply(&mut attack);
            let exp = IbpExperiment {
                attack,
                images: a.images,
                seed,
            };
            let prefix = a
                .prefix
                .clone()
                .unwrap_or_else(|| format!("ibp_{}", exp.method()));
            let mut summaries = Vec::new();
            for (m, path) in a.model.iter().enumerate() {
                let net = load_model(path)?;
                let name = if a.model.len() == 1 {
                    prefix.clone()
                } else {
                    format!("{prefix}_m{m}")
                };
                let report = run_ibp_experiment(&net, &data, &exp, &name)?;
                report.write(&a.out)?;
                print_summary(&report.tables[1].1);
                summaries.push(report.tables[1].1.clone());
            }
            if summaries.len() > 1 {
                let refs: Vec<&Table> = summaries.iter().collect();
                let family = family_summary(&refs)?;
                family.write(&a.out.join(format!("{prefix}_family.csv")))?;
                print_summary(&family);
            }
        }
    }
    Ok(())
}

fn print_summary(t: &Table) {
    for row in &t.rows {
        let cells: Vec<String> = t
            .header
            .iter()
            .zip(row)
            .map(|(h, v)| format!("{h}={v}"))
            .collect();
        println!("{}", cells.join(" "));
    }
}

fn ablate_cmd(a: &AblateArgs, seed: u64) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let mut cfg = ablation_config(a.smoothing.params());
    a.attack.apply(&mut cfg);
    let sweep = match a.sweep {
        SweepKind::Steps => Sweep::Steps {
            last: 10.min(cfg.steps),
        },
        SweepKind::LambdaTv => Sweep::lambda_tv_grid(),
        SweepKind::LambdaS => Sweep::lambda_s_grid(),
    };
    let out = run_ablation(&net, &data, &cfg, &sweep, seed)?;
    out.write(&a.out)?;
    print_summary(&out.report.tables[1].1);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Certify(a) => certify_cmd(a, cli.seed),
        Command::Attack(a) => attack_cmd(a, cli.seed),
        Command::Ablate(a) => ablate_cmd(a, cli.seed),
        Command::ReportVerify(a) => {
            for prefix in verify_dir(&a.out)? {
                println!("{prefix}: ok");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input = e.chain().any(|c| {
                c.downcast_ref::<HarnessError>()
                    .is_some_and(HarnessError::is_input_error)
            });
            ExitCode::from(if input { 2 } else { 3 })
        }
    }
}
