use std::path::{Path, PathBuf};

use clap::Args;
use infkan_core::run::{execute, RunSummary};

use crate::error::CliResult;
use crate::overrides::load_config;
use crate::VERSION;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file; built-in defaults apply when omitted.
    pub config: Option<PathBuf>,
    /// Run directory for the config snapshot, manifest, metrics and checkpoint.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

pub fn run(a: &TrainArgs, overrides: &[(String, String)]) -> CliResult<()> {
    let flat = load_config(a.config.as_deref(), overrides)?;
    let summary = execute(&flat, Path::new("."), &a.out, VERSION)?;
    print_summary(&summary, &a.out);
    Ok(())
}

fn print_summary(s: &RunSummary, out: &Path) {
    let best = s.best_epoch.map_or("-".to_string(), |e| e.to_string());
    println!(
        "epochs {} (best {best}{}), K {:?}, params {}",
        s.epochs_run,
        if s.stopped_early { ", stopped early" } else { "" },
        s.ks,
        s.param_count
    );
    for (name, r) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        match r.accuracy {
            Some(acc) => println!("{name}: accuracy {acc:.4}, nll {:.6}", r.nll),
            None => println!("{name}: nll {:.6}", r.nll),
        }
    }
    println!("run directory: {}", out.display());
}
