//! Run configuration as flat dotted keys.
//!
//! Files are TOML; nested tables and dotted keys flatten to the same form,
//! so `[optim]\nlr = 0.01` and `optim.lr = 0.01` are equivalent. Overrides
//! use the same keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::{Activation, BasisFamily};
use crate::data::{CsvSchema, Scaling};
use crate::error::{Error, Result};
use crate::interp::InterpScheme;
use crate::layer::InterpTarget;
use crate::model::default_side;
use crate::optim::AdamConfig;
use crate::train::TrainConfig;
use crate::variational::{Priors, DEFAULT_ETA, DEFAULT_SIGMA};
use crate::window::{WindowSide, DEFAULT_BETA, DEFAULT_GAMMA};

pub const KEYS: &[&str] = &[
    "seed",
    "model.kind",
    "model.layers",
    "model.basis",
    "model.order",
    "model.lambda_init",
    "model.activation",
    "model.interp",
    "model.interp_target",
    "model.side",
    "prior.eta",
    "prior.sigma",
    "window.beta",
    "window.gamma",
    "optim.lr",
    "optim.weight_decay",
    "optim.epochs",
    "optim.batch_size",
    "optim.patience",
    "optim.clip_norm",
    "optim.resize_per_batch",
    "optim.sample_lambda",
    "data.generator",
    "data.n",
    "data.noise",
    "data.arms",
    "data.regression",
    "data.path",
    "data.header",
    "data.task",
    "data.target_columns",
    "data.scaling",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindName {
    InfinityKan,
    FixedKan,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKindName,
    /// KAN layer widths (last equals the output size) or MLP hidden widths.
    pub layers: Vec<usize>,
    pub basis: BasisFamily,
    pub order: usize,
    pub lambda_init: f64,
    pub activation: Activation,
    pub side: WindowSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generator {
        name: String,
        n: usize,
        noise: f64,
        arms: usize,
        regression: bool,
    },
    Csv {
        path: String,
        header: bool,
        classification: bool,
        target_columns: usize,
        scaling: Scaling,
    },
}

pub const GENERATORS: &[&str] = &["double_moons", "spiral", "spiral_hard"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub beta: f64,
    pub gamma: f64,
    pub data: DataSource,
    pub train: TrainConfig,
}

/// Flattened `key -> value` view of a configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    pub values: BTreeMap<String, toml::Value>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "<file>".into(),
            msg: e.message().to_string(),
        })?;
        let mut values = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut values);
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets `key` from command-line text. The text is read as a TOML value
    /// when possible (numbers, booleans, arrays) and as a bare string
    /// otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(unknown_key(key));
        }
        let v = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn get(&self, key: &str) -> Option<&toml::Value> {
        self.values.get(key)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(toml::Value::Float(f)) => Ok(*f),
            Some(toml::Value::Integer(i)) => Ok(*i as f64),
            Some(v) => Err(bad(key, format!("expected a number, got {v}"))),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
            Some(v) => Err(bad(key, format!("expected a non-negative integer, got {v}"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(bad(key, format!("expected true or false, got {v}"))),
        }
    }

    fn str_or(&self, key: &str, default: &str) -> Result<String> {
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(toml::Value::String(s)) => Ok(s.clone()),
            Some(v) => Err(bad(key, format!("expected a string, got {v}"))),
        }
    }

    fn parsed_or<T: std::str::FromStr<Err = String>>(&self, key: &str, default: &str) -> Result<T> {
        self.str_or(key, default)?.parse().map_err(|e: String| bad(key, e))
    }

    fn f64_list(&self, key: &str, default: f64, len: usize) -> Result<Vec<f64>> {
        match self.get(key) {
            Some(toml::Value::Array(a)) => {
                let v = a
                    .iter()
                    .map(|x| match x {
                        toml::Value::Float(f) => Ok(*f),
                        toml::Value::Integer(i) => Ok(*i as f64),
                        o => Err(bad(key, format!("expected numbers, got {o}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if v.len() != len {
                    return Err(bad(key, format!("expected {len} entries (one per KAN layer), got {}", v.len())));
                }
                Ok(v)
            }
            _ => Ok(vec![self.f64_or(key, default)?; len]),
        }
    }

    fn usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(toml::Value::Array(a)) => a
                .iter()
                .map(|x| match x {
                    toml::Value::Integer(i) if *i > 0 => Ok(*i as usize),
                    o => Err(bad(key, format!("expected positive integers, got {o}"))),
                })
                .collect(),
            Some(v) => Err(bad(key, format!("expected a list of integers, got {v}"))),
        }
    }

    /// Validates every key and builds a typed configuration.
    pub fn resolve(&self) -> Result<RunConfig> {
        if let Some(k) = self.values.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(unknown_key(k));
        }
        let seed = self.usize_or("seed", 0)? as u64;
        let kind = match self.str_or("model.kind", "infinity_kan")?.as_str() {
            "infinity_kan" => ModelKindName::InfinityKan,
            "fixed_kan" => ModelKindName::FixedKan,
            "mlp" => ModelKindName::Mlp,
            o => return Err(bad("model.kind", format!("unknown kind `{o}` (expected infinity_kan, fixed_kan, mlp)"))),
        };
        let default_layers: &[usize] = if kind == ModelKindName::Mlp { &[128, 128] } else { &[8, 2] };
        let layers = self.usize_list("model.layers", default_layers)?;
        if layers.is_empty() {
            return Err(bad("model.layers", "at least one width is required"));
        }
        let basis: BasisFamily = self.parsed_or("model.basis", "chebyshev")?;
        let order = self.usize_or("model.order", 5)?;
        if order == 0 {
            return Err(bad("model.order", "must be at least 1"));
        }
        let lambda_init = self.f64_or("model.lambda_init", 2.0)?;
        if !(lambda_init >= 0.0) {
            return Err(bad("model.lambda_init", "must be non-negative"));
        }
        let activation = match self.str_or("model.activation", "relu")?.parse::<BasisFamily>() {
            Ok(BasisFamily::Piecewise(a)) => a,
            _ => return Err(bad("model.activation", "expected one of relu, leaky_relu, prelu, silu, gelu, relu6")),
        };
        let side = match self.get("model.side") {
            None => default_side(basis),
            Some(_) => self.parsed_or("model.side", "")?,
        };
        let interp: InterpScheme = self.parsed_or("model.interp", "pinv")?;
        if interp == InterpScheme::Linear && !basis.requires_interp() {
            return Err(bad("model.interp", format!("linear interpolation is not defined for {basis}")));
        }
        let interp_target = match self.str_or("model.interp_target", "product")?.as_str() {
            "product" => InterpTarget::Product,
            "raw" => InterpTarget::Raw,
            o => return Err(bad("model.interp_target", format!("unknown target `{o}` (expected product, raw)"))),
        };
        let beta = self.f64_or("window.beta", DEFAULT_BETA)?;
        let gamma = self.f64_or("window.gamma", DEFAULT_GAMMA)?;
        if !(beta > 0.0) {
            return Err(bad("window.beta", "must be positive"));
        }
        if !(gamma > 0.0) {
            return Err(bad("window.gamma", "must be positive"));
        }

        let n_kan = if kind == ModelKindName::Mlp { 0 } else { layers.len() };
        let eta = self.f64_list("prior.eta", DEFAULT_ETA, n_kan)?;
        let sigma = self.f64_list("prior.sigma", DEFAULT_SIGMA, n_kan)?;
        if let Some(v) = eta.iter().find(|v| !(**v > 0.0)) {
            return Err(bad("prior.eta", format!("must be positive, got {v}")));
        }
        if let Some(v) = sigma.iter().find(|v| !(**v > 0.0)) {
            return Err(bad("prior.sigma", format!("must be positive, got {v}")));
        }

        let epochs = self.usize_or("optim.epochs", 1000)?;
        if epochs == 0 {
            return Err(bad("optim.epochs", "must be at least 1"));
        }
        let lr = self.f64_or("optim.lr", 1e-2)?;
        if !(lr >= 0.0) {
            return Err(bad("optim.lr", "must be non-negative"));
        }
        let weight_decay = self.f64_or("optim.weight_decay", 1e-5)?;
        if !(weight_decay >= 0.0) {
            return Err(bad("optim.weight_decay", "must be non-negative"));
        }
        let clip = self.f64_or("optim.clip_norm", 10.0)?;
        let patience = self.usize_or("optim.patience", 100)?;
        let train = TrainConfig {
            epochs,
            batch_size: self.usize_or("optim.batch_size", 64)?,
            seed,
            optim: AdamConfig {
                lr,
                weight_decay,
                clip_norm: (clip > 0.0).then_some(clip),
                ..AdamConfig::default()
            },
            patience: (patience > 0).then_some(patience),
            priors: Priors { eta, sigma },
            interp,
            interp_target,
            resize_per_batch: self.bool_or("optim.resize_per_batch", false)?,
            sample_lambda: self.bool_or("optim.sample_lambda", false)?,
        };

        let data = match (self.get("data.path"), self.get("data.generator")) {
            (Some(_), Some(_)) => return Err(bad("data.path", "set either data.path or data.generator, not both")),
            (Some(_), None) => {
                let classification = match self.str_or("data.task", "classification")?.as_str() {
                    "classification" => true,
                    "regression" => false,
                    o => return Err(bad("data.task", format!("unknown task `{o}`"))),
                };
                DataSource::Csv {
                    path: self.str_or("data.path", "")?,
                    header: self.bool_or("data.header", false)?,
                    classification,
                    target_columns: self.usize_or("data.target_columns", 1)?,
                    scaling: self.parsed_or("data.scaling", "minmax")?,
                }
            }
            (None, _) => {
                let name = self.str_or("data.generator", "double_moons")?;
                if !GENERATORS.contains(&name.as_str()) {
                    return Err(bad(
                        "data.generator",
                        format!("unknown generator `{name}` (expected {})", GENERATORS.join(", ")),
                    ));
                }
                DataSource::Generator {
                    name,
                    n: self.usize_or("data.n", 1000)?,
                    noise: self.f64_or("data.noise", crate::data::DEFAULT_NOISE)?,
                    arms: self.usize_or("data.arms", 2)?,
                    regression: self.bool_or("data.regression", false)?,
                }
            }
        };

        Ok(RunConfig {
            seed,
            model: ModelConfig {
                kind,
                layers,
                basis,
                order,
                lambda_init,
                activation,
                side,
            },
            beta,
            gamma,
            data,
            train,
        })
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn unknown_key(key: &str) -> Error {
    bad(key, "unknown key")
}

impl DataSource {
    pub fn csv_schema(&self, seed: u64) -> Option<CsvSchema> {
        match self {
            DataSource::Csv {
                header,
                classification,
                target_columns,
                scaling,
                ..
            } => Some(CsvSchema {
                has_header: *header,
                target_columns: *target_columns,
                classification: *classification,
                scaling: *scaling,
                seed,
            }),
            DataSource::Generator { .. } => None,
        }
    }
}
