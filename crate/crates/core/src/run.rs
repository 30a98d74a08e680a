//! Building datasets and models from a [`RunConfig`] and executing a run
//! into a directory.
//!
//! A run directory holds `config.toml`, `manifest.json`, `metrics.jsonl`,
//! `timings.jsonl`, `checkpoint.json` and `summary.json`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, FlatConfig, ModelKindName, RunConfig};
use crate::data::{gen_double_moons, gen_spiral, load_csv, Dataset, SplitName, SpiralOptions};
use crate::error::{Error, Result};
use crate::metrics::{unix_now, MetricsSink, RunManifest};
use crate::model::{KanSpec, Model};
use crate::train::{evaluate, EvalResult, Trainer};

const MODEL_SEED_SALT: u64 = 0x6B61_6E5F_696E_6974;

/// Generates or loads the dataset; relative CSV paths resolve against `base`.
pub fn build_dataset(cfg: &RunConfig, base: &Path) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Generator {
            name,
            n,
            noise,
            arms,
            regression,
        } => match name.as_str() {
            "double_moons" => gen_double_moons(*n, *noise, cfg.seed),
            "spiral" | "spiral_hard" => gen_spiral(SpiralOptions {
                n: *n,
                arms: *arms,
                noise: *noise,
                seed: cfg.seed,
                hard: name == "spiral_hard",
                regression: *regression,
            }),
            other => Err(Error::Config {
                key: "data.generator".into(),
                msg: format!("unknown generator `{other}`"),
            }),
        },
        DataSource::Csv { path, .. } => {
            let p = base.join(path);
            load_csv(&p, &cfg.data.csv_schema(cfg.seed).expect("csv source"))
        }
    }
}

pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MODEL_SEED_SALT);
    let task = ds.task();
    let mut spec = KanSpec::new(cfg.model.basis, cfg.model.lambda_init);
    spec.beta = cfg.beta;
    spec.gamma = cfg.gamma;
    spec.side = cfg.model.side;
    let m = &cfg.model;
    match m.kind {
        ModelKindName::InfinityKan => Model::infinity_kan(ds.dim(), &m.layers, task, spec, &mut rng),
        ModelKindName::FixedKan => Model::fixed_kan(ds.dim(), &m.layers, task, spec, m.order, &mut rng),
        ModelKindName::Mlp => Model::mlp(ds.dim(), &m.layers, m.activation, task, &mut rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub train: EvalResult,
    pub val: EvalResult,
    pub test: EvalResult,
    pub ks: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub param_count: usize,
    pub finished_unix_s: u64,
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn timings(&self) -> PathBuf {
        self.dir.join("timings.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

/// Trains according to `flat` and writes every artifact into `out`.
/// `base` resolves relative data paths. On divergence the metrics written so
/// far are kept and the error is returned.
pub fn execute(flat: &FlatConfig, base: &Path, out: &Path, version: &str) -> Result<RunSummary> {
    let cfg = flat.resolve()?;
    let ds = build_dataset(&cfg, base)?;
    if !ds.split.is_partition(ds.len()) {
        return Err(Error::Data("train/val/test splits overlap".into()));
    }
    let model = build_model(&cfg, &ds)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let paths = RunPaths::new(out);
    let config_text = flat.to_toml();
    std::fs::write(paths.config(), &config_text)?;
    RunManifest {
        version: version.to_string(),
        seed: cfg.seed,
        config: config_text.clone(),
        started_unix_s: unix_now(),
        dataset_fingerprint: ds.fingerprint(),
        dataset_rows: ds.len(),
        outputs: ["metrics.jsonl", "timings.jsonl", "checkpoint.json", "summary.json"]
            .map(String::from)
            .to_vec(),
    }
    .save(&paths.manifest())?;

    let mut sink = MetricsSink::create(&paths.metrics(), Some(&paths.timings()))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut sink_err = None;
    let outcome = trainer.fit(&ds, |r| {
        if let Err(e) = sink.write(r) {
            sink_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    Checkpoint::from_trainer(&trainer, &config_text, outcome.best_epoch).save(&paths.checkpoint())?;
    let summary = RunSummary {
        epochs_run: outcome.records.len(),
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        train: evaluate(&mut trainer.model, &ds, SplitName::Train)?,
        val: evaluate(&mut trainer.model, &ds, SplitName::Val)?,
        test: evaluate(&mut trainer.model, &ds, SplitName::Test)?,
        ks: trainer.model.ks(),
        lambdas: trainer.model.lambdas(),
        param_count: trainer.model.param_count(),
        finished_unix_s: unix_now(),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(paths.summary(), text + "\n")?;
    Ok(summary)
}
