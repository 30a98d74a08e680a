//! Cross-product sweeps over configuration keys.
//!
//! Every grid point becomes one run directory under `--out`. Runs that
//! differ only in `seed` form one cell of the summary table, which reports
//! mean and sample standard deviation per cell and marks the cell with the
//! best validation metric.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use infkan_core::config::{FlatConfig, KEYS};
use infkan_core::run::{execute, RunSummary};
use infkan_core::Error;
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::overrides::load_config;
use crate::VERSION;

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML configuration file shared by every run.
    pub config: Option<PathBuf>,
    /// Grid axis as `key=v1,v2,...`; repeat for a cross product. Commas
    /// inside brackets belong to the value, so `model.layers=[8,2],[16,2]`
    /// has two values.
    #[arg(long = "grid", value_name = "KEY=VALUES")]
    pub grid: Vec<String>,
    /// Directory receiving one sub-directory per run plus the summaries.
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Splits on commas that are not nested inside brackets.
fn split_values(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in text.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur.trim().to_string());
    out.retain(|v| !v.is_empty());
    out
}

pub fn parse_axis(spec: &str) -> CliResult<Axis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("grid axis `{spec}` is not of the form key=v1,v2")))?;
    let key = key.trim().trim_start_matches("--");
    if !KEYS.contains(&key) {
        return Err(CliError::usage(format!("unknown configuration key `{key}` in grid")));
    }
    let values = split_values(values);
    if values.is_empty() {
        return Err(CliError::usage(format!("grid axis `{key}` has no values")));
    }
    Ok(Axis {
        key: key.to_string(),
        values,
    })
}

/// Every combination of axis values, first axis varying slowest.
pub fn cross_product(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

fn cell_name(point: &[(String, String)]) -> String {
    let parts: Vec<String> = point
        .iter()
        .filter(|(k, _)| k != "seed")
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if parts.is_empty() {
        "all".to_string()
    } else {
        parts.join(";")
    }
}

/// Mean and sample standard deviation (zero for a single value), by
/// Welford's update so that repeated values give exactly zero spread.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in v.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let std = if v.len() < 2 { 0.0 } else { (m2 / (v.len() - 1) as f64).sqrt() };
    (mean, std)
}

struct RunOutcome {
    point: Vec<(String, String)>,
    dir: PathBuf,
    result: std::result::Result<RunSummary, Error>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub cell: String,
    pub runs: usize,
    pub diverged: usize,
    pub val: (f64, f64),
    pub test: (f64, f64),
    pub total_k: (f64, f64),
    pub best: bool,
}

pub fn run(a: &SweepArgs, overrides: &[(String, String)]) -> CliResult<()> {
    let axes: Vec<Axis> = a.grid.iter().map(|g| parse_axis(g)).collect::<CliResult<_>>()?;
    if axes.is_empty() {
        return Err(CliError::usage("empty grid: give at least one --grid key=v1,v2"));
    }
    let base = load_config(a.config.as_deref(), overrides)?;
    let points = cross_product(&axes);
    let mut configs = Vec::with_capacity(points.len());
    for point in &points {
        let mut flat: FlatConfig = base.clone();
        for (k, v) in point {
            flat.set(k, v)?;
        }
        flat.resolve()?;
        configs.push(flat);
    }

    std::fs::create_dir_all(&a.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::usage(format!("cannot start {} workers: {e}", a.jobs.unwrap_or(0))))?;
    let width = points.len().saturating_sub(1).to_string().len().max(3);
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        points
            .par_iter()
            .zip(configs.par_iter())
            .enumerate()
            .map(|(i, (point, flat))| {
                let dir = a.out.join(format!("run-{i:0width$}"));
                let result = execute(flat, Path::new("."), &dir, VERSION);
                RunOutcome {
                    point: point.clone(),
                    dir,
                    result,
                }
            })
            .collect()
    });
    if let Some(e) = outcomes.iter().find_map(|o| match &o.result {
        Err(e) if !matches!(e, Error::Diverged { .. }) => Some(e.clone()),
        _ => None,
    }) {
        return Err(e.into());
    }

    write_runs(&a.out.join("runs.csv"), &axes, &outcomes)?;
    let rows = aggregate(&outcomes);
    write_summary(&a.out.join("summary.csv"), &rows)?;
    for r in &rows {
        println!(
            "{}{} runs={} diverged={} val={:.4}±{:.4} test={:.4}±{:.4} total_K={:.2}±{:.2}",
            if r.best { "* " } else { "  " },
            r.cell,
            r.runs,
            r.diverged,
            r.val.0,
            r.val.1,
            r.test.0,
            r.test.1,
            r.total_k.0,
            r.total_k.1
        );
    }
    let ks: Vec<f64> = rows.iter().map(|r| r.total_k.0).filter(|k| k.is_finite()).collect();
    if let (Some(lo), Some(hi)) = (
        ks.iter().cloned().reduce(f64::min),
        ks.iter().cloned().reduce(f64::max),
    ) {
        println!("total-K spread across cells: {:.2}", hi - lo);
    }
    println!("summary: {}", a.out.join("summary.csv").display());
    Ok(())
}

fn total_k(s: &RunSummary) -> f64 {
    s.ks.iter().sum::<usize>() as f64
}

fn aggregate(outcomes: &[RunOutcome]) -> Vec<CellRow> {
    let mut cells: BTreeMap<String, Vec<&RunOutcome>> = BTreeMap::new();
    let mut order = Vec::new();
    for o in outcomes {
        let name = cell_name(&o.point);
        if !cells.contains_key(&name) {
            order.push(name.clone());
        }
        cells.entry(name).or_default().push(o);
    }
    let classification = outcomes
        .iter()
        .find_map(|o| o.result.as_ref().ok())
        .is_none_or(|s| s.val.accuracy.is_some());
    let mut rows: Vec<CellRow> = order
        .into_iter()
        .map(|name| {
            let runs = &cells[&name];
            let ok: Vec<&RunSummary> = runs.iter().filter_map(|o| o.result.as_ref().ok()).collect();
            let col = |f: &dyn Fn(&RunSummary) -> f64| mean_std(&ok.iter().map(|s| f(s)).collect::<Vec<_>>());
            CellRow {
                cell: name,
                runs: runs.len(),
                diverged: runs.len() - ok.len(),
                val: col(&|s| s.val.metric()),
                test: col(&|s| s.test.metric()),
                total_k: col(&total_k),
                best: false,
            }
        })
        .collect();
    let better = |a: f64, b: f64| if classification { a > b } else { a < b };
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.val.0.is_finite())
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, v)) if !better(r.val.0, v) => acc,
            _ => Some((i, r.val.0)),
        });
    if let Some((i, _)) = best {
        rows[i].best = true;
    }
    rows
}

fn write_runs(path: &Path, axes: &[Axis], outcomes: &[RunOutcome]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(["status", "epochs", "val_metric", "test_metric", "total_k", "ks"].map(String::from));
    w.write_record(&header)?;
    for o in outcomes {
        let mut rec = vec![o.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()];
        rec.extend(o.point.iter().map(|(_, v)| v.clone()));
        match &o.result {
            Ok(s) => rec.extend([
                "ok".to_string(),
                s.epochs_run.to_string(),
                s.val.metric().to_string(),
                s.test.metric().to_string(),
                total_k(s).to_string(),
                format!("{:?}", s.ks),
            ]),
            Err(_) => rec.extend(["diverged", "", "", "", "", ""].map(String::from)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, rows: &[CellRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cell",
        "runs",
        "diverged",
        "val_mean",
        "val_std",
        "test_mean",
        "test_std",
        "total_k_mean",
        "total_k_std",
        "best",
    ])?;
    for r in rows {
        w.write_record([
            r.cell.clone(),
            r.runs.to_string(),
            r.diverged.to_string(),
            r.val.0.to_string(),
            r.val.1.to_string(),
            r.test.0.to_string(),
            r.test.1.to_string(),
            r.total_k.0.to_string(),
            r.total_k.1.to_string(),
            if r.best { "*" } else { "" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracketed_values_stay_whole() {
        let a = parse_axis("model.layers=[8, 2],[16,2]").unwrap();
        assert_eq!(a.values, vec!["[8, 2]", "[16,2]"]);
    }

    #[test]
    fn axis_errors() {
        assert!(parse_axis("optim.lr").is_err());
        assert!(parse_axis("optim.lr=").is_err());
        assert!(parse_axis("optim.nope=1").unwrap_err().to_string().contains("optim.nope"));
    }

    #[test]
    fn cross_product_size_and_order() {
        let axes = vec![parse_axis("seed=0,1").unwrap(), parse_axis("prior.eta=2,5,10").unwrap()];
        let pts = cross_product(&axes);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1], vec![("seed".into(), "0".into()), ("prior.eta".into(), "5".into())]);
        assert_eq!(cell_name(&pts[1]), "prior.eta=5");
    }

    #[test]
    fn std_of_duplicates_is_zero() {
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        assert_eq!(mean_std(&[0.7, 0.7, 0.7]).1, 0.0);
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
