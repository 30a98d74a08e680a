//! Synthetic generators, CSV ingestion and deterministic splits.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Task;

pub const DEFAULT_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            o => Err(format!("unknown split `{o}` (expected train, val, test)")),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// 80/20 train/test, then 90/10 train/val of the training portion.
    pub fn new(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5917));
        let n_test = (0.2 * n as f64).round() as usize;
        let rest = n - n_test;
        let n_val = (0.1 * rest as f64).round() as usize;
        let test = idx[..n_test].to_vec();
        let val = idx[n_test..n_test + n_val].to_vec();
        let train = idx[n_test + n_val..].to_vec();
        Self { train, val, test }
    }

    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// True when the three index sets are pairwise disjoint and cover `0..n`.
    pub fn is_partition(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    pub noise: f64,
    pub params: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[N, d]`.
    pub features: Tensor,
    pub targets: Targets,
    pub split: Split,
    pub meta: DatasetMeta,
}

/// Features and targets of a subset, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub values: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn task(&self) -> Task {
        match &self.targets {
            Targets::Classes { classes, .. } => Task::Classification { classes: *classes },
            Targets::Values(t) => Task::Regression { dim: t.shape()[1] },
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        let x = Tensor::new(vec![indices.len(), d], x).expect("sized");
        match &self.targets {
            Targets::Classes { labels, .. } => Batch {
                x,
                labels: indices.iter().map(|&i| labels[i]).collect(),
                values: None,
            },
            Targets::Values(t) => {
                let e = t.shape()[1];
                let mut v = Vec::with_capacity(indices.len() * e);
                for &i in indices {
                    v.extend_from_slice(&t.data()[i * e..(i + 1) * e]);
                }
                Batch {
                    x,
                    labels: Vec::new(),
                    values: Some(Tensor::new(vec![indices.len(), e], v).expect("sized")),
                }
            }
        }
    }

    pub fn split_batch(&self, name: SplitName) -> Result<Batch> {
        let idx = self.split.get(name);
        if idx.is_empty() {
            return Err(Error::Data(format!("split {name:?} is empty")));
        }
        Ok(self.batch(idx))
    }

    /// Standardizes every feature column with statistics of the training split.
    pub fn standardize(&mut self) {
        let d = self.dim();
        let idx = if self.split.train.is_empty() {
            (0..self.len()).collect()
        } else {
            self.split.train.clone()
        };
        let n = idx.len().max(1) as f64;
        let data = self.features.data_mut();
        for j in 0..d {
            let mean = idx.iter().map(|&i| data[i * d + j]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..data.len() / d {
                data[i * d + j] = (data[i * d + j] - mean) / sd;
            }
        }
    }

    /// Rescales every feature column to `[-1, 1]`.
    pub fn minmax(&mut self) {
        let d = self.dim();
        let data = self.features.data_mut();
        let rows = data.len() / d;
        for j in 0..d {
            let (lo, hi) = (0..rows).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                (lo.min(data[i * d + j]), hi.max(data[i * d + j]))
            });
            let span = hi - lo;
            for i in 0..rows {
                data[i * d + j] = if span > 0.0 { 2.0 * (data[i * d + j] - lo) / span - 1.0 } else { 0.0 };
            }
        }
    }

    /// SHA-256 over features and targets.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        match &self.targets {
            Targets::Classes { labels, .. } => labels.iter().for_each(|l| h.update((*l as u64).to_le_bytes())),
            Targets::Values(t) => t.data().iter().for_each(|v| h.update(v.to_le_bytes())),
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes features and targets as CSV (targets in the trailing columns).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        match &self.targets {
            Targets::Classes { .. } => out.push_str(&format!("{},label\n", header.join(","))),
            Targets::Values(t) => {
                let ys: Vec<String> = (0..t.shape()[1]).map(|j| format!("y{j}")).collect();
                out.push_str(&format!("{},{}\n", header.join(","), ys.join(",")));
            }
        }
        for i in 0..self.len() {
            let row: Vec<String> = self.features.data()[i * d..(i + 1) * d].iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(","));
            match &self.targets {
                Targets::Classes { labels, .. } => out.push_str(&format!(",{}\n", labels[i])),
                Targets::Values(t) => {
                    let e = t.shape()[1];
                    for v in &t.data()[i * e..(i + 1) * e] {
                        out.push_str(&format!(",{v:?}"));
                    }
                    out.push('\n');
                }
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Writes the generator metadata next to a CSV as `<path>.meta.json`.
    pub fn write_sidecar(&self, csv_path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "name": self.meta.name,
            "seed": self.meta.seed,
            "noise": self.meta.noise,
            "params": self.meta.params,
            "rows": self.len(),
            "fingerprint": self.fingerprint(),
        });
        let mut p = csv_path.as_os_str().to_owned();
        p.push(".meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(p, text + "\n")?;
        Ok(())
    }
}

fn noise_source(noise: f64) -> Option<Normal<f64>> {
    (noise > 0.0).then(|| Normal::new(0.0, noise).expect("positive noise"))
}

/// Two interleaved half circles of radius 1; the second is flipped and
/// offset by `(1, -0.5)`.
pub fn gen_double_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::Data(format!("double moons needs n >= 4, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = noise_source(noise);
    let n0 = n.div_ceil(2);
    let n1 = n - n0;
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (class, count) in [(0usize, n0), (1, n1)] {
        for i in 0..count {
            let t = PI * i as f64 / (count.max(2) - 1) as f64;
            let (mut a, mut b) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
            if let Some(nd) = &normal {
                a += nd.sample(&mut rng);
                b += nd.sample(&mut rng);
            }
            x.push(a);
            x.push(b);
            labels.push(class);
        }
    }
    Ok(Dataset {
        features: Tensor::new(vec![n, 2], x)?,
        targets: Targets::Classes { labels, classes: 2 },
        split: Split::new(n, seed),
        meta: DatasetMeta {
            name: "double_moons".into(),
            seed,
            noise,
            params: vec![("n".into(), n.to_string())],
        },
    })
}

/// Options of the spiral generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiralOptions {
    pub n: usize,
    pub arms: usize,
    pub noise: f64,
    pub seed: u64,
    /// Doubles the winding (`t` up to `6 pi` instead of `3 pi`).
    pub hard: bool,
    /// Emit the normalized arm phase as a regression target instead of
    /// the arm index.
    pub regression: bool,
}

impl SpiralOptions {
    pub fn new(n: usize, arms: usize, seed: u64) -> Self {
        Self {
            n,
            arms,
            noise: DEFAULT_NOISE,
            seed,
            hard: false,
            regression: false,
        }
    }

    pub fn max_angle(&self) -> f64 {
        if self.hard {
            6.0 * PI
        } else {
            3.0 * PI
        }
    }
}

/// `arms` Archimedean arms `r = t`, angle `t + 2 pi a / arms`. Within an arm
/// the parameter is spaced as `t_max sqrt(i / (m - 1))`, which gives uniform
/// density along the arc; every arm uses the same parameter set.
pub fn gen_spiral(opts: SpiralOptions) -> Result<Dataset> {
    let SpiralOptions { n, arms, noise, seed, hard, regression } = opts;
    if arms < 2 {
        return Err(Error::Data(format!("spiral needs at least 2 arms, got {arms}")));
    }
    if n < 2 * arms {
        return Err(Error::Data(format!("spiral needs n >= 2 * arms, got n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = noise_source(noise);
    let t_max = opts.max_angle();
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut phase = Vec::with_capacity(n);
    for a in 0..arms {
        let count = n / arms + usize::from(a < n % arms);
        for i in 0..count {
            let t = t_max * (i as f64 / (count.max(2) - 1) as f64).sqrt();
            let ang = t + 2.0 * PI * a as f64 / arms as f64;
            let (mut px, mut py) = (t * ang.cos(), t * ang.sin());
            if let Some(nd) = &normal {
                px += nd.sample(&mut rng);
                py += nd.sample(&mut rng);
            }
            x.push(px);
            x.push(py);
            labels.push(a);
            phase.push(t / t_max);
        }
    }
    let name = if hard { "spiral_hard" } else { "spiral" };
    let targets = if regression {
        Targets::Values(Tensor::new(vec![n, 1], phase)?)
    } else {
        Targets::Classes { labels, classes: arms }
    };
    Ok(Dataset {
        features: Tensor::new(vec![n, 2], x)?,
        targets,
        split: Split::new(n, seed),
        meta: DatasetMeta {
            name: name.into(),
            seed,
            noise,
            params: vec![
                ("n".into(), n.to_string()),
                ("arms".into(), arms.to_string()),
                ("hard".into(), hard.to_string()),
                ("regression".into(), regression.to_string()),
            ],
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    None,
    MinMax,
    Standardize,
}

impl std::str::FromStr for Scaling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Scaling::None),
            "minmax" => Ok(Scaling::MinMax),
            "standardize" | "standard" => Ok(Scaling::Standardize),
            o => Err(format!("unknown scaling `{o}` (expected none, minmax, standardize)")),
        }
    }
}

/// How to read a numeric CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub has_header: bool,
    /// Number of trailing target columns. For classification this is 1 and
    /// holds a non-negative integer label.
    pub target_columns: usize,
    pub classification: bool,
    pub scaling: Scaling,
    pub seed: u64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            has_header: false,
            target_columns: 1,
            classification: true,
            scaling: Scaling::MinMax,
            seed: 0,
        }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&text, schema, &path.display().to_string())
}

pub fn parse_csv(text: &str, schema: &CsvSchema, name: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let first_row = usize::from(schema.has_header) + 1;
    for (r, rec) in reader.records().enumerate() {
        let row_no = r + first_row;
        let rec = rec.map_err(|e| Error::Format {
            row: row_no,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Format {
                row: row_no,
                col: rec.len().min(w) + 1,
                msg: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Format {
                    row: row_no,
                    col: c + 1,
                    msg: format!("non-numeric cell `{cell}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    let width = width.ok_or_else(|| Error::Data("CSV has no data rows".into()))?;
    if width <= schema.target_columns {
        return Err(Error::Data(format!(
            "CSV has {width} columns but {} target columns were requested",
            schema.target_columns
        )));
    }
    let d = width - schema.target_columns;
    let n = rows.len();
    let mut feats = Vec::with_capacity(n * d);
    for r in &rows {
        feats.extend_from_slice(&r[..d]);
    }
    let targets = if schema.classification {
        if schema.target_columns != 1 {
            return Err(Error::Data("classification expects exactly one label column".into()));
        }
        let labels = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = r[d];
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format {
                        row: i + first_row,
                        col: d + 1,
                        msg: format!("label `{v}` is not a non-negative integer"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Targets::Classes { labels, classes }
    } else {
        let mut t = Vec::with_capacity(n * schema.target_columns);
        for r in &rows {
            t.extend_from_slice(&r[d..]);
        }
        Targets::Values(Tensor::new(vec![n, schema.target_columns], t)?)
    };
    let mut ds = Dataset {
        features: Tensor::new(vec![n, d], feats)?,
        targets,
        split: Split::new(n, schema.seed),
        meta: DatasetMeta {
            name: name.to_string(),
            seed: schema.seed,
            noise: 0.0,
            params: vec![],
        },
    };
    match schema.scaling {
        Scaling::None => {}
        Scaling::MinMax => ds.minmax(),
        Scaling::Standardize => ds.standardize(),
    }
    Ok(ds)
}
