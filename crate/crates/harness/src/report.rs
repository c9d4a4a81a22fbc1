//! CSV reports. Every aggregate is computed from the already formatted row
//! cells, so re-deriving it from a file on disk reproduces it exactly.

use std::path::Path;

use crate::error::{HarnessError, Result};

/// Numbers are written with 6 significant digits.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..=5).contains(&exp) {
        return sci;
    }
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(char::is_ascii_digit).collect();
    let body = if exp >= 0 {
        let split = exp as usize + 1;
        if split >= digits.len() {
            digits
        } else {
            format!("{}.{}", &digits[..split], &digits[split..])
        }
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn fmt_bool(b: bool) -> String {
    if b { "1" } else { "0" }.into()
}

/// Population mean and standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::invalid(format!("missing column {name}")))
    }

    pub fn cell(&self, row: usize, name: &str) -> Result<&str> {
        Ok(&self.rows[row][self.column(name)?])
    }

    /// Parsed numeric cells of a column; empty cells are `None`.
    pub fn numbers(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|r| {
                let s = r[c].trim();
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| {
                        HarnessError::invalid(format!("column {name}: not a number: {s:?}"))
                    })
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 cells"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Table> {
        let mut r = csv::ReaderBuilder::new().from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Table { header, rows })
    }
}

/// Output of one report: named tables written side by side as
/// `{prefix}_{name}.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub prefix: String,
    pub tables: Vec<(String, Table)>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, t) in &self.tables {
            t.write(&dir.join(format!("{}_{}.csv", self.prefix, name)))?;
        }
        verify_report(self)?;
        Ok(())
    }
}

pub const RADIUS_ROWS: &[&str] = &[
    "image",
    "label",
    "natural_label",
    "natural_radius",
    "attack_target",
    "attack_label",
    "attack_radius",
    "success",
    "tv",
    "color",
    "dissim",
    "status",
];

pub const RADIUS_SUMMARY: &[&str] = &[
    "sigma",
    "natural_count",
    "natural_mean",
    "natural_std",
    "attack_count",
    "success_count",
    "success_rate",
    "attack_mean",
    "attack_std",
];

pub const HISTOGRAM: &[&str] = &["bin_lo", "bin_hi", "natural", "attack"];

pub const IBP_ROWS: &[&str] = &[
    "image",
    "label",
    "natural_label",
    "natural_certified",
    "attack_target",
    "attack_label",
    "attack_certified",
    "min_margin",
    "status",
];

pub const IBP_SUMMARY: &[&str] = &["eps", "method", "count", "robust_error", "attack_error"];

pub const ABLATION_ROWS: &[&str] = &[
    "sweep",
    "value",
    "image",
    "label",
    "target",
    "step",
    "spoof_loss",
    "tv",
    "color",
    "dissim",
    "success",
    "status",
];

pub const ABLATION_SUMMARY: &[&str] = &[
    "sweep",
    "value",
    "images",
    "median_spoof_loss",
    "median_tv",
    "median_color",
    "median_dissim",
];

fn successes(rows: &Table) -> Result<Vec<bool>> {
    let c = rows.column("success")?;
    Ok(rows.rows.iter().map(|r| r[c] == "1").collect())
}

/// Summary block of a radius report, recomputed from its rows.
pub fn radius_summary(rows: &Table, sigma: &str) -> Result<Table> {
    let natural: Vec<f64> = rows
        .numbers("natural_radius")?
        .into_iter()
        .flatten()
        .collect();
    let attacked: Vec<bool> = {
        let s = rows.column("status")?;
        let t = rows.column("attack_target")?;
        rows.rows
            .iter()
            .map(|r| r[s] == "ok" && !r[t].is_empty())
            .collect()
    };
    let success = successes(rows)?;
    let radii = rows.numbers("attack_radius")?;
    let spoofed: Vec<f64> = radii
        .iter()
        .zip(&success)
        .filter_map(|(r, s)| if *s { *r } else { None })
        .collect();
    let attack_count = attacked.iter().filter(|a| **a).count();
    let success_count = success.iter().filter(|s| **s).count();
    let (nm, ns) = mean_std(&natural).map_or((None, None), |(m, s)| (Some(m), Some(s)));
    let (am, as_) = mean_std(&spoofed).map_or((None, None), |(m, s)| (Some(m), Some(s)));
    let rate = (attack_count > 0).then(|| success_count as f64 / attack_count as f64);
    let mut t = Table::new(RADIUS_SUMMARY);
    t.push(vec![
        sigma.to_string(),
        natural.len().to_string(),
        fmt_opt(nm),
        fmt_opt(ns),
        attack_count.to_string(),
        success_count.to_string(),
        fmt_opt(rate),
        fmt_opt(am),
        fmt_opt(as_),
    ]);
    Ok(t)
}

/// Ten equal bins over `[0, 4 sigma]` (the largest radius the default
/// sample budget can certify is below that); values beyond land in the
/// last bin.
pub fn radius_histogram(rows: &Table, sigma: &str) -> Result<Table> {
    let s: f64 = sigma
        .parse()
        .map_err(|_| HarnessError::invalid(format!("sigma {sigma:?} is not a number")))?;
    let natural: Vec<f64> = rows
        .numbers("natural_radius")?
        .into_iter()
        .flatten()
        .collect();
    let success = successes(rows)?;
    let spoofed: Vec<f64> = rows
        .numbers("attack_radius")?
        .iter()
        .zip(&success)
        .filter_map(|(r, ok)| if *ok { *r } else { None })
        .collect();
    let bins = 10;
    let width = 4.0 * s / bins as f64;
    let bin = |v: f64| ((v / width).floor().max(0.0) as usize).min(bins - 1);
    let mut nat = vec![0usize; bins];
    let mut att = vec![0usize; bins];
    natural.iter().for_each(|v| nat[bin(*v)] += 1);
    spoofed.iter().for_each(|v| att[bin(*v)] += 1);
    let mut t = Table::new(HISTOGRAM);
    for b in 0..bins {
        t.push(vec![
            fmt_num(b as f64 * width),
            fmt_num((b + 1) as f64 * width),
            nat[b].to_string(),
            att[b].to_string(),
        ]);
    }
    Ok(t)
}

/// Robust error counts natural images that are wrong or uncertified;
/// attack error counts attacked images that are right or uncertified.
pub fn robust_error(correct: bool, certified: bool) -> bool {
    !(correct && certified)
}

pub fn attack_error(correct: bool, certified: bool) -> bool {
    correct || !certified
}

pub fn ibp_summary(rows: &Table, eps: &str, method: &str) -> Result<Table> {
    let (l, nl, nc, al, ac, st) = (
        rows.column("label")?,
        rows.column("natural_label")?,
        rows.column("natural_certified")?,
        rows.column("attack_label")?,
        rows.column("attack_certified")?,
        rows.column("status")?,
    );
    let ok: Vec<&Vec<String>> = rows.rows.iter().filter(|r| r[st] == "ok").collect();
    let n = ok.len();
    let robust = ok
        .iter()
        .filter(|r| robust_error(r[nl] == r[l], r[nc] == "1"))
        .count();
    let attack = ok
        .iter()
        .filter(|r| attack_error(r[al] == r[l], r[ac] == "1"))
        .count();
    let frac = |k: usize| (n > 0).then(|| k as f64 / n as f64);
    let mut t = Table::new(IBP_SUMMARY);
    t.push(vec![
        eps.to_string(),
        method.to_string(),
        n.to_string(),
        fmt_opt(frac(robust)),
        fmt_opt(frac(attack)),
    ]);
    Ok(t)
}

/// Per-cell medians of an ablation, in first-appearance order of
/// `(sweep, value)`. Step sweeps summarize the last recorded step.
pub fn ablation_summary(rows: &Table) -> Result<Table> {
    let (sw, va, stp) = (
        rows.column("sweep")?,
        rows.column("value")?,
        rows.column("step")?,
    );
    let metrics = ["spoof_loss", "tv", "color", "dissim"];
    let values: Vec<Vec<Option<f64>>> = metrics
        .iter()
        .map(|m| rows.numbers(m))
        .collect::<Result<_>>()?;
    let mut cells: Vec<(String, String)> = Vec::new();
    for r in &rows.rows {
        let key = (r[sw].clone(), r[va].clone());
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    let mut t = Table::new(ABLATION_SUMMARY);
    for (sweep, value) in cells {
        let members: Vec<usize> = (0..rows.rows.len())
            .filter(|&i| rows.rows[i][sw] == sweep && rows.rows[i][va] == value)
            .collect();
        let last_step = members
            .iter()
            .filter_map(|&i| rows.rows[i][stp].parse::<usize>().ok())
            .max();
        let members: Vec<usize> = members
            .into_iter()
            .filter(|&i| rows.rows[i][stp].parse::<usize>().ok() == last_step)
            .collect();
        let mut row = vec![sweep, value, members.len().to_string()];
        for v in &values {
            let col: Vec<f64> = members.iter().filter_map(|&i| v[i]).collect();
            row.push(fmt_opt(median(&col)));
        }
        t.push(row);
    }
    Ok(t)
}

fn mismatch(path: &str, what: &str, expected: &Table, found: &Table) -> HarnessError {
    HarnessError::Verify {
        path: path.to_string(),
        message: format!(
            "{what} does not match its rows: recomputed {:?}, found {:?}",
            expected.rows, found.rows
        ),
    }
}

fn check(path: &str, what: &str, recomputed: Table, found: &Table) -> Result<()> {
    if &recomputed != found {
        return Err(mismatch(path, what, &recomputed, found));
    }
    Ok(())
}

/// Re-derives every aggregate table of `report` from its rows.
pub fn verify_report(report: &Report) -> Result<()> {
    let rows = report.table("rows").ok_or_else(|| {
        HarnessError::invalid(format!("report {} has no rows table", report.prefix))
    })?;
    let p = report.prefix.as_str();
    let header: Vec<&str> = rows.header.iter().map(String::as_str).collect();
    if header == RADIUS_ROWS {
        let summary = report
            .table("summary")
            .ok_or_else(|| HarnessError::invalid("missing summary"))?;
        let sigma = summary.cell(0, "sigma")?.to_string();
        check(p, "summary", radius_summary(rows, &sigma)?, summary)?;
        if let Some(h) = report.table("histogram") {
            check(p, "histogram", radius_histogram(rows, &sigma)?, h)?;
        }
    } else if header == IBP_ROWS {
        let summary = report
            .table("summary")
            .ok_or_else(|| HarnessError::invalid("missing summary"))?;
        let (eps, method) = (
            summary.cell(0, "eps")?.to_string(),
            summary.cell(0, "method")?.to_string(),
        );
        check(p, "summary", ibp_summary(rows, &eps, &method)?, summary)?;
    } else if header == ABLATION_ROWS {
        let summary = report
            .table("summary")
            .ok_or_else(|| HarnessError::invalid("missing summary"))?;
        check(p, "summary", ablation_summary(rows)?, summary)?;
    } else {
        return Err(HarnessError::Verify {
            path: p.to_string(),
            message: format!("unrecognized rows header {header:?}"),
        });
    }
    Ok(())
}

/// Loads every `{prefix}_rows.csv` in `dir` with its sibling tables and
/// verifies it. Returns the prefixes checked.
pub fn verify_dir(dir: &Path) -> Result<Vec<String>> {
    let mut prefixes: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_rows.csv"))
                .map(String::from)
        })
        .collect();
    prefixes.sort();
    if prefixes.is_empty() {
        return Err(HarnessError::invalid(format!(
            "no *_rows.csv reports in {}",
            dir.display()
        )));
    }
    for prefix in &prefixes {
        let mut tables = Vec::new();
        for name in ["rows", "summary", "histogram"] {
            let path = dir.join(format!("{prefix}_{name}.csv"));
            if path.exists() {
                tables.push((name.to_string(), Table::read(&path)?));
            }
        }
        verify_report(&Report {
            prefix: prefix.clone(),
            tables,
        })?;
    }
    Ok(prefixes)
}
