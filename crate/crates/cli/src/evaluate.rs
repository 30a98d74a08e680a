use std::path::{Path, PathBuf};

use clap::Args;
use infkan_core::checkpoint::Checkpoint;
use infkan_core::config::{FlatConfig, RunConfig};
use infkan_core::run::{build_dataset, RunPaths};
use infkan_core::train::evaluate;
use infkan_core::{Dataset, SplitName};

use crate::error::CliResult;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file or run directory.
    pub checkpoint: PathBuf,
}

/// Accepts either a checkpoint file or a run directory containing one.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        RunPaths::new(p).checkpoint()
    } else {
        p.to_path_buf()
    }
}

/// Loads a checkpoint together with the dataset its configuration names.
pub fn load_with_data(p: &Path) -> CliResult<(Checkpoint, RunConfig, Dataset)> {
    let ck = Checkpoint::load(&checkpoint_path(p))?;
    let cfg = FlatConfig::parse(&ck.config)?.resolve()?;
    let ds = build_dataset(&cfg, Path::new("."))?;
    Ok((ck, cfg, ds))
}

pub fn run(a: &EvaluateArgs) -> CliResult<()> {
    let (mut ck, _, ds) = load_with_data(&a.checkpoint)?;
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let r = evaluate(&mut ck.model, &ds, split)?;
        let line = serde_json::json!({
            "split": split.to_string(),
            "rows": ds.split.get(split).len(),
            "accuracy": r.accuracy,
            "nll": r.nll,
        });
        println!("{line}");
    }
    Ok(())
}
