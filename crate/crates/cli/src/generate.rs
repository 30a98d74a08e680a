use std::path::{Path, PathBuf};

use clap::Args;
use infkan_core::config::{FlatConfig, GENERATORS};
use infkan_core::data::DEFAULT_NOISE;
use infkan_core::run::build_dataset;

use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Dataset generator.
    pub name: String,
    /// Number of rows.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Number of spiral arms.
    #[arg(long = "k", default_value_t = 2)]
    pub arms: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit a regression target instead of a class label (spirals only).
    #[arg(long)]
    pub regression: bool,
    /// Output CSV path; defaults to `<name>.csv`. The metadata sidecar is
    /// written next to it as `<out>.meta.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(a: &GenerateArgs) -> CliResult<()> {
    if !GENERATORS.contains(&a.name.as_str()) {
        return Err(CliError::usage(format!(
            "unknown dataset `{}`; valid names: {}",
            a.name,
            GENERATORS.join(", ")
        )));
    }
    let mut flat = FlatConfig::default();
    flat.set("data.generator", &a.name)?;
    flat.set("data.n", &a.n.to_string())?;
    flat.set("data.arms", &a.arms.to_string())?;
    flat.set("data.noise", &format!("{:?}", a.noise))?;
    flat.set("data.regression", &a.regression.to_string())?;
    flat.set("seed", &a.seed.to_string())?;
    let cfg = flat.resolve()?;
    let ds = build_dataset(&cfg, Path::new("."))?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", a.name)));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    ds.write_csv(&out)?;
    ds.write_sidecar(&out)?;
    println!("wrote {} rows to {}", ds.len(), out.display());
    Ok(())
}
