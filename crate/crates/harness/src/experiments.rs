//! Experiment runners. Per-image work runs in parallel and is collected in
//! image order; image `i` draws all of its randomness from
//! `derive_seed(master, i)`, so reports are independent of scheduling.

use rayon::prelude::*;
use shadowcert_core::attack::{
    self, adversarial_image, attack_targeted_observed, attack_untargeted, color_penalty,
    dissim_penalty, spoof_loss_smoothing, step_seed, tv_penalty_variant, AttackConfig,
    AttackResult, ChannelMode, IbpSpoofLoss, Perturbation, SpoofTarget,
};
use shadowcert_core::smoothing::{self, SmoothingOutcome, SmoothingParams};
use shadowcert_core::{ibp, rng, Network, Tensor};

use crate::data::Dataset;
use crate::error::{HarnessError, Result};
use crate::report::{
    ablation_summary, fmt_bool, fmt_num, fmt_opt, ibp_summary, radius_histogram, radius_summary,
    Report, Table, ABLATION_ROWS, IBP_ROWS, RADIUS_ROWS,
};

fn image_seed(master: u64, idx: usize) -> u64 {
    rng::derive_seed(master, idx as u64)
}

fn status_of(e: &dyn std::fmt::Display) -> String {
    format!("error: {e}")
}

/// TV, color and Dissim of the image-shaped perturbation.
fn final_penalties(delta: &Perturbation, channels: usize, cfg: &AttackConfig) -> Result<[f64; 3]> {
    let d = delta.materialize(channels);
    Ok([
        tv_penalty_variant(&d, cfg.tv_variant)?,
        color_penalty(&d, cfg.color_penalty)?,
        dissim_penalty(&d, delta.mode())?,
    ])
}

/// Attack settings for image `idx`: the attack and its certificate draw
/// from separate children of the image seed.
fn per_image_config(base: &AttackConfig, master: u64, idx: usize) -> AttackConfig {
    let seed = image_seed(master, idx);
    let mut cfg = *base;
    cfg.seed = rng::derive_path(seed, &[1]);
    if let SpoofTarget::Smoothing { ref mut cert, .. } = cfg.spoof {
        cert.seed = rng::derive_path(seed, &[2]);
    }
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusExperiment {
    /// Natural certification; the seed is replaced per image.
    pub cert: SmoothingParams,
    /// Must target smoothing.
    pub attack: AttackConfig,
    /// Number of non-abstained images to attack.
    pub images: usize,
    pub seed: u64,
}

/// Radius statistics for natural and spoofed certificates.
///
/// Images are certified in order until `images` of them yield a
/// certificate; abstained images appear as rows but are not attacked.
pub fn run_radius_experiment(
    net: &Network,
    data: &Dataset,
    exp: &RadiusExperiment,
    prefix: &str,
) -> Result<Report> {
    let SpoofTarget::Smoothing { sigma, .. } = exp.attack.spoof else {
        return Err(HarnessError::invalid(
            "radius experiment needs a smoothing attack",
        ));
    };
    exp.cert.validate()?;
    exp.attack.validate()?;
    if data.is_empty() {
        return Err(HarnessError::invalid("empty dataset"));
    }
    let natural: Vec<std::result::Result<SmoothingOutcome, String>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut p = exp.cert;
            p.seed = rng::derive_path(image_seed(exp.seed, i), &[0]);
            smoothing::certify(net, &data.images[i], &p).map_err(|e| status_of(&e))
        })
        .collect();

    let mut scanned = Vec::new();
    let mut chosen = 0;
    for (i, n) in natural.iter().enumerate() {
        if chosen == exp.images {
            break;
        }
        if matches!(n, Ok(SmoothingOutcome::Certified { .. })) {
            chosen += 1;
        }
        scanned.push(i);
    }

    let rows: Vec<Vec<String>> = scanned
        .par_iter()
        .map(|&i| {
            let (x, y) = (&data.images[i], data.labels[i]);
            let mut row = vec![i.to_string(), y.to_string()];
            let empty_attack = |status: String| {
                let mut r = vec![String::new(); 7];
                r.push(status);
                r
            };
            match &natural[i] {
                Err(status) => {
                    row.extend([String::new(), String::new()]);
                    row.extend(empty_attack(status.clone()));
                }
                Ok(SmoothingOutcome::Abstain) => {
                    row.extend([String::new(), String::new()]);
                    row.extend(empty_attack("abstain".into()));
                }
                Ok(n) => {
                    row.push(n.label().map(|l| l.to_string()).unwrap_or_default());
                    row.push(fmt_opt(n.radius()));
                    let cfg = per_image_config(&exp.attack, exp.seed, i);
                    match attack_untargeted(net, x, y, &cfg)
                        .map_err(HarnessError::from)
                        .and_then(|u| {
                            let best = u.chosen().clone();
                            let p = final_penalties(&best.delta, x.shape()[0], &cfg)?;
                            Ok((best, p))
                        }) {
                        Ok((best, [tv, color, dissim])) => {
                            let out = match best.outcome {
                                attack::CertOutcome::Smoothing(o) => o,
                                attack::CertOutcome::Ibp(_) => unreachable!("smoothing attack"),
                            };
                            row.extend([
                                best.target.to_string(),
                                out.label().map(|l| l.to_string()).unwrap_or_default(),
                                fmt_opt(out.radius()),
                                fmt_bool(best.success),
                                fmt_num(tv),
                                fmt_num(color),
                                fmt_num(dissim),
                                "ok".into(),
                            ]);
                        }
                        Err(e) => row.extend(empty_attack(status_of(&e))),
                    }
                }
            }
            row
        })
        .collect();
    let mut table = Table::new(RADIUS_ROWS);
    rows.into_iter().for_each(|r| table.push(r));
    let sigma = fmt_num(sigma);
    let summary = radius_summary(&table, &sigma)?;
    let histogram = radius_histogram(&table, &sigma)?;
    Ok(Report {
        prefix: prefix.to_string(),
        tables: vec![
            ("rows".into(), table),
            ("summary".into(), summary),
            ("histogram".into(), histogram),
        ],
    })
}

/// Same protocol against a victim trained with adversarially augmented
/// noise; the schema is that of [`run_radius_experiment`].
pub fn run_adv_smoothing_experiment(
    net: &Network,
    data: &Dataset,
    exp: &RadiusExperiment,
) -> Result<Report> {
    run_radius_experiment(net, data, exp, "adv_smoothing")
}

/// Soft check that spoofed radii are more concentrated than natural ones.
pub fn spread_annotation(report: &Report) -> Option<String> {
    let s = report.table("summary")?;
    let nat: f64 = s.cell(0, "natural_std").ok()?.parse().ok()?;
    let att: f64 = s.cell(0, "attack_std").ok()?.parse().ok()?;
    Some(if att < nat {
        format!("attack std {att} below natural std {nat}")
    } else {
        format!("attack std {att} not below natural std {nat}")
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpExperiment {
    /// Must target IBP at the certification radius.
    pub attack: AttackConfig,
    /// Number of leading images evaluated.
    pub images: usize,
    pub seed: u64,
}

impl IbpExperiment {
    pub fn eps(&self) -> Option<f64> {
        match self.attack.spoof {
            SpoofTarget::Ibp { eps, .. } => Some(eps),
            SpoofTarget::Smoothing { .. } => None,
        }
    }

    pub fn method(&self) -> &'static str {
        match self.attack.spoof {
            SpoofTarget::Ibp {
                loss: IbpSpoofLoss::Natural,
                ..
            } => "plain_ce",
            _ => "shadow",
        }
    }
}

/// Robust error on natural images and attack error on spoofed ones.
pub fn run_ibp_experiment(
    net: &Network,
    data: &Dataset,
    exp: &IbpExperiment,
    prefix: &str,
) -> Result<Report> {
    let eps = exp
        .eps()
        .ok_or_else(|| HarnessError::invalid("IBP experiment needs an IBP attack"))?;
    if !(eps > 0.0) {
        return Err(HarnessError::invalid(format!(
            "eps must be positive, got {eps}"
        )));
    }
    exp.attack.validate()?;
    let n = exp.images.min(data.len());
    let rows: Vec<Vec<String>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&data.images[i], data.labels[i]);
            let mut row = vec![i.to_string(), y.to_string()];
            let run = || -> Result<(ibp::IbpOutcome, AttackResult)> {
                let natural = ibp::certify_point(net, x, eps)?;
                let cfg = per_image_config(&exp.attack, exp.seed, i);
                let best = attack_untargeted(net, x, y, &cfg)?.chosen().clone();
                Ok((natural, best))
            };
            match run() {
                Ok((natural, best)) => {
                    let attack::CertOutcome::Ibp(out) = &best.outcome else {
                        unreachable!("IBP attack")
                    };
                    row.extend([
                        natural.label.to_string(),
                        fmt_bool(natural.certified),
                        best.target.to_string(),
                        out.label.to_string(),
                        fmt_bool(out.certified),
                        fmt_num(out.min_margin()),
                        "ok".into(),
                    ]);
                }
                Err(e) => {
                    row.extend(vec![String::new(); 6]);
                    row.push(status_of(&e));
                }
            }
            row
        })
        .collect();
    let mut table = Table::new(IBP_ROWS);
    rows.into_iter().for_each(|r| table.push(r));
    let summary = ibp_summary(&table, &fmt_num(eps), exp.method())?;
    Ok(Report {
        prefix: prefix.to_string(),
        tables: vec![("rows".into(), table), ("summary".into(), summary)],
    })
}

/// Min, mean and max of the robust and attack errors over several models'
/// summaries of the same method.
pub fn family_summary(summaries: &[&Table]) -> Result<Table> {
    let mut t = Table::new(&[
        "eps",
        "method",
        "models",
        "robust_min",
        "robust_mean",
        "robust_max",
        "attack_min",
        "attack_mean",
        "attack_max",
    ]);
    let first = summaries
        .first()
        .ok_or_else(|| HarnessError::invalid("no summaries"))?;
    let mut row = vec![
        first.cell(0, "eps")?.to_string(),
        first.cell(0, "method")?.to_string(),
        summaries.len().to_string(),
    ];
    for col in ["robust_error", "attack_error"] {
        let v: Vec<f64> = summaries
            .iter()
            .map(|s| s.numbers(col).map(|v| v[0]))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        row.push(fmt_opt(v.iter().copied().reduce(f64::min)));
        row.push(fmt_opt(mean));
        row.push(fmt_opt(v.iter().copied().reduce(f64::max)));
    }
    t.push(row);
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Snapshots of one run after steps `0..=last`.
    Steps {
        last: usize,
    },
    LambdaTv(Vec<f64>),
    /// Three-channel attacks over a grid of `lambda_s`.
    LambdaS(Vec<f64>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Steps { .. } => "steps",
            Sweep::LambdaTv(_) => "lambda_tv",
            Sweep::LambdaS(_) => "lambda_s",
        }
    }

    pub fn lambda_tv_grid() -> Sweep {
        Sweep::LambdaTv((0..=10).map(|i| 0.03 * i as f64).collect())
    }

    pub fn lambda_s_grid() -> Sweep {
        Sweep::LambdaS((0..=10).map(|i| 0.5 * i as f64).collect())
    }

    fn cells(&self) -> usize {
        match self {
            Sweep::Steps { last } => last + 1,
            Sweep::LambdaTv(g) | Sweep::LambdaS(g) => g.len(),
        }
    }
}

/// Attack settings of the ablation: 30 SGD steps at learning rate 0.1,
/// `lambda_tv = 0.3`, `lambda_c = 20`, 50 noisy copies per step.
pub fn ablation_config(cert: SmoothingParams) -> AttackConfig {
    let mut cfg = AttackConfig::smoothing(cert, 0);
    cfg.steps = 30;
    cfg.lr = 0.1;
    cfg.lambda_tv = 0.3;
    cfg.lambda_c = 20.0;
    if let SpoofTarget::Smoothing {
        ref mut noise_batch,
        ..
    } = cfg.spoof
    {
        *noise_batch = 50;
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub report: Report,
    /// Relative file name and image, one or more per row.
    pub images: Vec<(String, Tensor)>,
}

impl AblationOutput {
    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        self.report.write(dir)?;
        let sub = dir.join(&self.report.prefix);
        std::fs::create_dir_all(&sub)?;
        for (name, img) in &self.images {
            crate::ppm::write(img, &sub.join(name))?;
        }
        Ok(())
    }
}

/// Sweeps one attack parameter over every image toward the fixed target
/// `(y + 1) mod K`. All cells of an image share its seed, so they differ
/// only in the swept parameter.
pub fn run_ablation(
    net: &Network,
    data: &Dataset,
    base: &AttackConfig,
    sweep: &Sweep,
    seed: u64,
) -> Result<AblationOutput> {
    if !matches!(base.spoof, SpoofTarget::Smoothing { .. }) {
        return Err(HarnessError::invalid("ablation runs the smoothing attack"));
    }
    base.validate()?;
    if let Sweep::Steps { last } = sweep {
        if *last > base.steps {
            return Err(HarnessError::invalid(format!(
                "cannot snapshot step {last} of a {}-step run",
                base.steps
            )));
        }
    }
    let cells = sweep.cells();
    let jobs: Vec<(usize, usize)> = (0..cells)
        .flat_map(|c| (0..data.len()).map(move |i| (c, i)))
        .collect();
    type Job = (Vec<Vec<String>>, Vec<(String, Tensor)>);
    let results: Vec<Job> = match sweep {
        Sweep::Steps { last } => (0..data.len())
            .into_par_iter()
            .map(|i| ablation_steps(net, data, base, *last, seed, i))
            .collect(),
        Sweep::LambdaTv(grid) | Sweep::LambdaS(grid) => jobs
            .par_iter()
            .map(|&(c, i)| {
                let mut cfg = per_image_config(base, seed, i);
                match sweep {
                    Sweep::LambdaTv(_) => cfg.lambda_tv = grid[c],
                    _ => {
                        cfg.lambda_s = grid[c];
                        cfg.mode = ChannelMode::ThreeChannel;
                    }
                }
                ablation_cell(net, data, &cfg, sweep.name(), grid[c], i)
            })
            .collect(),
    };
    let mut rows = Table::new(ABLATION_ROWS);
    let mut images = Vec::new();
    for (r, im) in results {
        r.into_iter().for_each(|row| rows.push(row));
        images.extend(im);
    }
    // Steps rows come out image-major; order them step-major like the grids.
    if let Sweep::Steps { .. } = sweep {
        let step = rows.column("step")?;
        let img = rows.column("image")?;
        rows.rows.sort_by_key(|r| {
            (
                r[step].parse::<usize>().unwrap_or(0),
                r[img].parse::<usize>().unwrap_or(0),
            )
        });
    }
    let summary = ablation_summary(&rows)?;
    Ok(AblationOutput {
        report: Report {
            prefix: format!("ablation_{}", sweep.name()),
            tables: vec![("rows".into(), rows), ("summary".into(), summary)],
        },
        images,
    })
}

fn target_of(y: usize, classes: usize) -> usize {
    (y + 1) % classes
}

fn ablation_steps(
    net: &Network,
    data: &Dataset,
    base: &AttackConfig,
    last: usize,
    seed: u64,
    i: usize,
) -> (Vec<Vec<String>>, Vec<(String, Tensor)>) {
    let (x, y) = (&data.images[i], data.labels[i]);
    let target = target_of(y, data.classes);
    let cfg = per_image_config(base, seed, i);
    let mut snaps: Vec<Perturbation> = Vec::new();
    let result = attack_targeted_observed(net, x, target, &cfg, &mut |step, d| {
        if step <= last {
            snaps.push(d.clone());
        }
    });
    let lead = |step: usize| {
        vec![
            "steps".to_string(),
            step.to_string(),
            i.to_string(),
            y.to_string(),
            target.to_string(),
            step.to_string(),
        ]
    };
    match result {
        Ok(res) => {
            let mut rows = Vec::new();
            let mut images = Vec::new();
            for (step, d) in snaps.iter().enumerate() {
                // The snapshot after the last step has no trace record, so
                // its terms are evaluated as the next step would.
                let terms = match res.trace.get(step) {
                    Some(rec) => Ok([rec.spoof_loss, rec.tv, rec.color, rec.dissim]),
                    None => final_terms(net, x, d, target, &cfg),
                };
                let mut row = lead(step);
                match terms {
                    Ok(t) => {
                        row.extend(t.iter().map(|v| fmt_num(*v)));
                        row.extend([String::new(), "ok".into()]);
                    }
                    Err(e) => {
                        row.extend(vec![String::new(); 5]);
                        row.push(status_of(&e));
                    }
                }
                rows.push(row);
                images.push((format!("img{i}_step{step}.ppm"), adversarial_image(x, d)));
            }
            (rows, images)
        }
        Err(e) => {
            let rows = (0..=last)
                .map(|step| {
                    let mut row = lead(step);
                    row.extend(vec![String::new(); 5]);
                    row.push(status_of(&e));
                    row
                })
                .collect();
            (rows, Vec::new())
        }
    }
}

/// Spoof loss and penalties of `delta` under the noise of step `cfg.steps`.
fn final_terms(
    net: &Network,
    x: &Tensor,
    delta: &Perturbation,
    target: usize,
    cfg: &AttackConfig,
) -> Result<[f64; 4]> {
    let SpoofTarget::Smoothing {
        sigma, noise_batch, ..
    } = cfg.spoof
    else {
        return Err(HarnessError::invalid("ablation runs the smoothing attack"));
    };
    let loss = spoof_loss_smoothing(
        net,
        x,
        delta,
        target,
        sigma,
        noise_batch,
        step_seed(cfg.seed, cfg.steps),
    )?;
    let [tv, color, dissim] = final_penalties(delta, x.shape()[0], cfg)?;
    Ok([loss, tv, color, dissim])
}

fn ablation_cell(
    net: &Network,
    data: &Dataset,
    cfg: &AttackConfig,
    sweep: &str,
    value: f64,
    i: usize,
) -> (Vec<Vec<String>>, Vec<(String, Tensor)>) {
    let (x, y) = (&data.images[i], data.labels[i]);
    let target = target_of(y, data.classes);
    let value_s = fmt_num(value);
    let mut row = vec![
        sweep.to_string(),
        value_s.clone(),
        i.to_string(),
        y.to_string(),
        target.to_string(),
        cfg.steps.to_string(),
    ];
    let run = || -> Result<(AttackResult, [f64; 4])> {
        let res = attack::attack_targeted(net, x, target, cfg)?;
        let terms = final_terms(net, x, &res.delta, target, cfg)?;
        Ok((res, terms))
    };
    match run() {
        Ok((res, [loss, tv, color, dissim])) => {
            row.extend([
                fmt_num(loss),
                fmt_num(tv),
                fmt_num(color),
                fmt_num(dissim),
                fmt_bool(res.success),
                "ok".into(),
            ]);
            let stem = format!("img{i}_{sweep}_{value_s}");
            let view = crate::ppm::perturbation_view(&res.delta.materialize(x.shape()[0]));
            (
                vec![row],
                vec![
                    (format!("{stem}.ppm"), res.adv_image),
                    (format!("{stem}_delta.ppm"), view),
                ],
            )
        }
        Err(e) => {
            row.extend(vec![String::new(); 5]);
            row.push(status_of(&e));
            (vec![row], Vec::new())
        }
    }
}
