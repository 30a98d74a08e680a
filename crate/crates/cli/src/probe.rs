//! Diagnostic probes that emit plot-ready CSV.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use infkan_core::basis::gram_matrix;
use infkan_core::gradcheck::check_model;
use infkan_core::model::Layer;
use infkan_core::properties::{run_convergence_suite, run_firstorder_suite, PropertyReport};
use infkan_core::variational::lipschitz_probe;
use infkan_core::{BasisFamily, SplitName, WindowParams, WindowSide};

use crate::error::{CliError, CliResult};
use crate::evaluate::load_with_data;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    /// ELBO and prior term across forced basis counts, against the bound M.
    Lipschitz,
    /// Window weights, from a checkpoint's layers or from explicit parameters.
    WindowShape,
    /// Gram matrix of the Chebyshev or Fourier basis.
    BasisOrthogonality,
    /// Finite-difference check of the full loss gradient.
    Gradcheck,
    /// Step and ReLU approximation error on refining grids.
    Convergence,
    /// Bias of the first-order expectation approximation.
    Firstorder,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    pub kind: ProbeKind,
    /// Checkpoint file or run directory (required by lipschitz and gradcheck).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Window mean for window-shape without a checkpoint.
    #[arg(long, default_value_t = 3.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value = "symmetric")]
    pub side: WindowSide,
    /// Basis family for basis-orthogonality.
    #[arg(long, default_value = "chebyshev")]
    pub family: BasisFamily,
    /// Number of basis functions for basis-orthogonality.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Quadrature points; defaults to `2n` for Chebyshev and 1001 for Fourier.
    #[arg(long)]
    pub quadrature: Option<usize>,
    /// Smallest basis count forced by the lipschitz probe.
    #[arg(long, default_value_t = 3)]
    pub k_min: usize,
    /// Largest basis count forced by the lipschitz probe.
    #[arg(long, default_value_t = 15)]
    pub k_max: usize,
    /// Training rows used by gradcheck.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Seed for the lipschitz probe's resizing.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

type Table = (Vec<String>, Vec<Vec<String>>);

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn run(a: &ProbeArgs) -> CliResult<()> {
    let (head, rows) = match a.kind {
        ProbeKind::WindowShape => window_shape(a)?,
        ProbeKind::BasisOrthogonality => orthogonality(a)?,
        ProbeKind::Lipschitz => lipschitz(a)?,
        ProbeKind::Gradcheck => gradcheck(a)?,
        ProbeKind::Convergence => report_table(&run_convergence_suite()),
        ProbeKind::Firstorder => report_table(&run_firstorder_suite()),
    };
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| infkan_core::Error::Io(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(&head)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn require_checkpoint(a: &ProbeArgs) -> CliResult<&PathBuf> {
    a.checkpoint
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("probe {:?} needs --checkpoint", a.kind).to_lowercase()))
}

fn window_rows(source: &str, p: &WindowParams, k: usize) -> Vec<Vec<String>> {
    WindowParams::positions(p.side, k)
        .into_iter()
        .zip(p.values_for(k))
        .enumerate()
        .map(|(i, (x, w))| {
            vec![
                source.to_string(),
                num(p.lambda_bar),
                num(p.beta),
                num(p.gamma),
                p.side.to_string(),
                i.to_string(),
                num(x),
                num(w),
            ]
        })
        .collect()
}

fn window_shape(a: &ProbeArgs) -> CliResult<Table> {
    let head = header(&["source", "lambda_bar", "beta", "gamma", "side", "index", "position", "weight"]);
    let mut rows = Vec::new();
    match &a.checkpoint {
        Some(p) => {
            let ck = infkan_core::checkpoint::Checkpoint::load(&crate::evaluate::checkpoint_path(p))?;
            for (i, layer) in ck.model.layers.iter().enumerate() {
                if let Layer::Kan(l) = layer {
                    rows.extend(window_rows(&format!("layer{i}"), &l.window, l.k()));
                }
            }
        }
        None => {
            if !(a.lambda >= 0.0 && a.beta > 0.0 && a.gamma > 0.0) {
                return Err(CliError::usage("window-shape needs lambda >= 0, beta > 0 and gamma > 0"));
            }
            let p = WindowParams::new(a.lambda, a.side).with_shape(a.beta, a.gamma);
            rows.extend(window_rows("params", &p, p.effective_order().0));
        }
    }
    Ok((head, rows))
}

fn orthogonality(a: &ProbeArgs) -> CliResult<Table> {
    let q = match (a.quadrature, a.family) {
        (Some(q), _) => q,
        (None, BasisFamily::Fourier) => 1001,
        (None, _) => 2 * a.n,
    };
    let g = gram_matrix(a.family, a.n, q)?;
    let mut rows = Vec::new();
    for i in 0..a.n {
        for j in 0..a.n {
            rows.push(vec![a.family.to_string(), a.n.to_string(), i.to_string(), j.to_string(), num(g[(i, j)])]);
        }
    }
    Ok((header(&["family", "n", "i", "j", "gram"]), rows))
}

fn lipschitz(a: &ProbeArgs) -> CliResult<Table> {
    let (ck, cfg, ds) = load_with_data(require_checkpoint(a)?)?;
    let batch = ds.split_batch(SplitName::Train)?;
    let probes = lipschitz_probe(
        &ck.model,
        &batch,
        &cfg.train.priors,
        ds.split.train.len(),
        a.k_min..=a.k_max,
        a.seed,
    )?;
    let mut rows = Vec::new();
    for p in &probes {
        for (i, k) in p.ks.iter().enumerate() {
            rows.push(vec![
                p.layer.to_string(),
                k.to_string(),
                num(p.elbo[i]),
                num(p.prior[i]),
                num(p.elbo_ratio),
                num(p.prior_ratio),
                num(p.bound),
                p.within_bound().to_string(),
            ]);
        }
    }
    let head = header(&["layer", "k", "elbo", "prior", "elbo_ratio", "prior_ratio", "bound", "within_bound"]);
    Ok((head, rows))
}

fn gradcheck(a: &ProbeArgs) -> CliResult<Table> {
    let (ck, cfg, ds) = load_with_data(require_checkpoint(a)?)?;
    let train = &ds.split.train;
    let take = a.batch.clamp(1, train.len());
    let batch = ds.batch(&train[..take]);
    let r = check_model(&ck.model, &batch, &cfg.train.priors, train.len())?;
    let (worst, index) = r.worst.clone().map_or((String::new(), String::new()), |(n, i)| (n, i.to_string()));
    let row = vec![
        r.checked.to_string(),
        num(r.max_rel_error),
        worst,
        index,
        r.passed().to_string(),
    ];
    Ok((header(&["checked", "max_rel_error", "worst_param", "worst_index", "passed"]), vec![row]))
}

fn report_table(report: &PropertyReport) -> Table {
    let rows = report
        .flatten()
        .into_iter()
        .map(|r| {
            vec![
                r.name,
                r.params,
                r.passed.to_string(),
                num(r.measured),
                r.comparison.symbol().to_string(),
                num(r.bound),
            ]
        })
        .collect();
    (header(&["property", "params", "passed", "measured", "comparison", "bound"]), rows)
}
