//! Training loop: minibatch ELBO descent with basis-count resizing and
//! early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Batch, Dataset, SplitName};
use crate::error::{Error, Result};
use crate::interp::InterpScheme;
use crate::layer::{InterpTarget, Mode};
use crate::model::{Layer, Model, Task};
use crate::optim::{AdamConfig, AdamW};
use crate::param::Parameters;
use crate::variational::{self, ElboBreakdown, Priors};
use crate::window::order_for_half_width;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optim: AdamConfig,
    /// Epochs without validation improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    pub priors: Priors,
    pub interp: InterpScheme,
    pub interp_target: InterpTarget,
    /// Check for basis-count changes before every minibatch instead of once
    /// per epoch.
    pub resize_per_batch: bool,
    /// Draw the integer half-width from `Poisson(lambda_bar)` at each resize
    /// check instead of using `ceil(lambda_bar)`.
    pub sample_lambda: bool,
}

impl TrainConfig {
    pub fn new(kan_layers: usize) -> Self {
        Self {
            epochs: 1000,
            batch_size: 64,
            seed: 0,
            optim: AdamConfig::default(),
            patience: Some(100),
            priors: Priors::uniform(kan_layers, variational::DEFAULT_ETA, variational::DEFAULT_SIGMA)
                .expect("positive defaults"),
            interp: InterpScheme::Pinv,
            interp_target: InterpTarget::Product,
            resize_per_batch: false,
            sample_lambda: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if self.epochs == 0 {
            return cfg("optim.epochs", "must be at least 1");
        }
        if !(self.optim.lr >= 0.0) {
            return cfg("optim.lr", "must be non-negative");
        }
        if !(self.optim.weight_decay >= 0.0) {
            return cfg("optim.weight_decay", "must be non-negative");
        }
        if let Err(e) = self.priors.validate() {
            return cfg("prior", &e.to_string());
        }
        Ok(())
    }
}

/// Accuracy (classification only) and mean per-sample NLL on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: Option<f64>,
    pub nll: f64,
}

impl EvalResult {
    /// Accuracy for classification, NLL for regression.
    pub fn metric(&self) -> f64 {
        self.accuracy.unwrap_or(self.nll)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_metric: f64,
    pub train_nll: f64,
    pub val_metric: f64,
    pub val_nll: f64,
    pub test_metric: f64,
    pub ks: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub param_count: usize,
    pub elbo: ElboBreakdown,
    pub resized: bool,
    pub grad_norm: f64,
    #[serde(skip)]
    pub wall_time: f64,
}

pub fn evaluate_batch(model: &mut Model, batch: &Batch) -> Result<EvalResult> {
    if batch.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone())?;
    let (out, _) = model.forward(&mut tape, x, Mode::Eval)?;
    let nll = variational::batch_nll(&mut tape, out, batch, model.task)?;
    let nll = tape.scalar_value(nll);
    let accuracy = match model.task {
        Task::Classification { classes } => {
            let logits = tape.value(out);
            let hits = batch
                .labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| {
                    let row = &logits.data()[i * classes..(i + 1) * classes];
                    argmax(row) == y
                })
                .count();
            Some(hits as f64 / batch.len() as f64)
        }
        Task::Regression { .. } => None,
    };
    Ok(EvalResult { accuracy, nll })
}

pub fn evaluate(model: &mut Model, ds: &Dataset, split: SplitName) -> Result<EvalResult> {
    evaluate_batch(model, &ds.split_batch(split)?)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Model selection key: higher is better.
fn score(r: &EvalResult) -> (f64, f64) {
    (r.accuracy.unwrap_or(f64::NEG_INFINITY), -r.nll)
}

/// Mutable state of a run, sufficient to resume it.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub best: Option<(usize, (f64, f64), Model)>,
    pub since_best: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n_kan = model.kan_layers().count();
        if model.kind.is_variational() && config.priors.len() != n_kan {
            return Err(Error::Config {
                key: "prior".into(),
                msg: format!("{} prior entries for {n_kan} KAN layers", config.priors.len()),
            });
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            optimizer: AdamW::new(config.optim),
            model,
            config,
            rng,
            epoch: 0,
            best: None,
            since_best: 0,
        })
    }

    /// Brings every adaptive layer's basis count in line with its window.
    /// Returns whether anything changed.
    pub fn sync_orders(&mut self) -> Result<bool> {
        if !self.model.kind.is_variational() {
            return Ok(false);
        }
        let offsets = self.model.slot_offsets();
        let mut changed = false;
        let mut kan_i = 0;
        for (i, layer) in self.model.layers.iter_mut().enumerate() {
            let Layer::Kan(l) = layer else { continue };
            let sigma = self.config.priors.sigma.get(kan_i).copied().unwrap_or(1.0);
            let sigma = if sigma.is_finite() { sigma } else { 1.0 };
            kan_i += 1;
            if !l.learn_lambda {
                continue;
            }
            let target = if self.config.sample_lambda {
                let m = if l.window.lambda_bar > 0.0 {
                    Poisson::new(l.window.lambda_bar)
                        .map_err(|e| Error::Domain(e.to_string()))?
                        .sample(&mut self.rng) as usize
                } else {
                    0
                };
                order_for_half_width(l.window.side, m).0
            } else {
                l.target_k()
            };
            if target == l.k() {
                continue;
            }
            let rows = l.d_out * l.d_in;
            let ev = l.resize(target, self.config.interp, self.config.interp_target, sigma, &mut self.rng)?;
            self.optimizer.remap_slot(offsets[i], &ev, rows);
            changed = true;
        }
        Ok(changed)
    }

    fn minibatches(&mut self, ds: &Dataset) -> Vec<Vec<usize>> {
        let mut idx = ds.split.train.clone();
        idx.shuffle(&mut self.rng);
        let bs = if self.config.batch_size == 0 { idx.len() } else { self.config.batch_size };
        let mut out: Vec<Vec<usize>> = idx.chunks(bs.max(1)).map(|c| c.to_vec()).collect();
        // batch statistics are undefined for a single sample
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
            let tail = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(tail);
        }
        out
    }

    fn last_good(&self) -> Option<usize> {
        self.epoch.checked_sub(1)
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::Numeric(_) => Error::Diverged {
                epoch: self.epoch,
                last_good_epoch: self.last_good(),
            },
            other => other,
        }
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<EpochRecord> {
        let start = Instant::now();
        let mut resized = self.sync_orders().map_err(|e| self.diverged(e))?;
        let d = ds.split.train.len();
        let mut grad_norm: f64 = 0.0;
        for idx in self.minibatches(ds) {
            if self.config.resize_per_batch {
                resized |= self.sync_orders().map_err(|e| self.diverged(e))?;
            }
            let batch = ds.batch(&idx);
            let norm = self.step(&batch, d).map_err(|e| self.diverged(e))?;
            grad_norm = grad_norm.max(norm);
        }
        let train_batch = ds.split_batch(SplitName::Train)?;
        let train = evaluate_batch(&mut self.model, &train_batch).map_err(|e| self.diverged(e))?;
        let val = evaluate(&mut self.model, ds, SplitName::Val).map_err(|e| self.diverged(e))?;
        let test = evaluate(&mut self.model, ds, SplitName::Test).map_err(|e| self.diverged(e))?;
        let elbo = variational::evaluate_elbo(&mut self.model, &train_batch, &self.config.priors, d)
            .map_err(|e| self.diverged(e))?;
        let rec = EpochRecord {
            epoch: self.epoch,
            train_metric: train.metric(),
            train_nll: train.nll,
            val_metric: val.metric(),
            val_nll: val.nll,
            test_metric: test.metric(),
            ks: self.model.ks(),
            lambdas: self.model.lambdas(),
            param_count: self.model.param_count(),
            elbo,
            resized,
            grad_norm,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let s = score(&val);
        if self.best.as_ref().is_none_or(|(_, b, _)| s > *b) {
            self.best = Some((self.epoch, s, self.model.clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.epoch += 1;
        Ok(rec)
    }

    /// One optimizer update on `batch`; returns the gradient norm.
    pub fn step(&mut self, batch: &Batch, dataset_size: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone())?;
        let (out, vars) = self.model.forward(&mut tape, x, Mode::Train)?;
        let (loss, _) =
            variational::loss(&mut tape, &self.model, &vars, out, batch, &self.config.priors, dataset_size)?;
        let grads = tape.backward(loss)?;
        self.model.zero_grad();
        self.model.accumulate(&grads, &vars);
        let norm = self.optimizer.step(&mut self.model)?;
        self.model.clamp_lambdas();
        Ok(norm)
    }

    pub fn should_stop(&self) -> bool {
        self.config.patience.is_some_and(|p| self.since_best >= p)
    }

    /// Trains until the epoch budget or early stopping, calling `observe`
    /// after each epoch. The best-validation snapshot is restored at the end.
    pub fn fit<F: FnMut(&EpochRecord)>(&mut self, ds: &Dataset, mut observe: F) -> Result<TrainOutcome> {
        if ds.split.train.is_empty() || ds.split.val.is_empty() || ds.split.test.is_empty() {
            return Err(Error::Data("dataset needs non-empty train, val and test splits".into()));
        }
        let mut records = Vec::new();
        let mut stopped_early = false;
        while self.epoch < self.config.epochs {
            let rec = self.run_epoch(ds)?;
            observe(&rec);
            records.push(rec);
            if self.should_stop() {
                stopped_early = true;
                break;
            }
        }
        let best_epoch = self.best.as_ref().map(|(e, _, _)| *e);
        if let Some((_, _, m)) = &self.best {
            self.model = m.clone();
        }
        Ok(TrainOutcome {
            records,
            best_epoch,
            stopped_early,
        })
    }
}

/// Convenience wrapper: trains `model` on `ds` and returns the restored best
/// model with the epoch records.
pub fn train(model: Model, ds: &Dataset, config: &TrainConfig) -> Result<(Model, TrainOutcome)> {
    let mut t = Trainer::new(model, config.clone())?;
    let out = t.fit(ds, |_| {})?;
    Ok((t.model, out))
}
