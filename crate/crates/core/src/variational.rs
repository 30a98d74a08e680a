//! Evidence lower bound for adaptive KANs.
//!
//! For a dataset of size `D`, a minibatch `B` and KAN layers `l`:
//!
//! ```text
//! total = -D * mean_{i in B} nll_i
//!         + sum_l [ ln P(lambda_l; eta_l) - ln P(lambda_l; lambda_l) ]
//!         + sum_l sum_{q,p,k < K_l} ln N(theta_qpk; 0, sigma_l^2)
//! ```
//!
//! `ln P(x; r) = x ln r - r - lnGamma(x + 1)` is the Poisson log-mass extended
//! to real `x`. Training minimizes `-total / D`.

use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::interp::InterpScheme;
use crate::layer::{InterpTarget, Mode};
use crate::model::{Model, ModelVars, Task};
use crate::window::{half_width_for_order, order_for_half_width};

pub const DEFAULT_ETA: f64 = 5.0;
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Floor on the posterior rate inside `ln P(lambda; lambda)`.
pub const RATE_FLOOR: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-KAN-layer prior parameters. A non-finite `eta` drops that layer's
/// lambda term and a non-finite `sigma` drops its coefficient term (flat
/// prior).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub eta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Priors {
    pub fn uniform(layers: usize, eta: f64, sigma: f64) -> Result<Self> {
        let p = Self {
            eta: vec![eta; layers],
            sigma: vec![sigma; layers],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta.len() != self.sigma.len() {
            return Err(Error::Shape(format!(
                "{} eta values but {} sigma values",
                self.eta.len(),
                self.sigma.len()
            )));
        }
        if let Some(v) = self.eta.iter().chain(&self.sigma).find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("prior parameters must be positive, got {v}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub lambda_term: f64,
    pub theta_term: f64,
    pub total: f64,
}

pub fn poisson_log_pmf(lambda: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::Domain(format!("Poisson rate must be positive, got {rate}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("Poisson argument must be non-negative, got {lambda}")));
    }
    Ok(lambda * rate.ln() - rate - ln_gamma(lambda + 1.0))
}

/// Partial derivatives of [`poisson_log_pmf`] with respect to `lambda` and `rate`.
pub fn poisson_log_pmf_grad(lambda: f64, rate: f64) -> (f64, f64) {
    (rate.ln() - digamma(lambda + 1.0), lambda / rate - 1.0)
}

/// `ln P(lambda; eta) - ln P(lambda; lambda)` and its derivative `ln(eta / lambda)`.
pub fn lambda_ratio(lambda: f64, eta: f64) -> Result<(f64, f64)> {
    let own = lambda.max(RATE_FLOOR);
    let v = poisson_log_pmf(lambda, eta)? - poisson_log_pmf(lambda, own)?;
    let d = if lambda >= RATE_FLOOR {
        eta.ln() - lambda.ln()
    } else {
        eta.ln() - digamma(lambda + 1.0) - (own.ln() - digamma(lambda + 1.0))
    };
    Ok((v, d))
}

pub fn gaussian_log_density(x: f64, sigma: f64) -> f64 {
    -0.5 * (x / sigma).powi(2) - sigma.ln() - HALF_LN_2PI
}

/// Sum of Gaussian log-densities over a coefficient block.
pub fn theta_log_prior(theta: &[f64], sigma: f64) -> f64 {
    if !sigma.is_finite() {
        return 0.0;
    }
    theta.iter().map(|&t| gaussian_log_density(t, sigma)).sum()
}

/// Mean per-sample negative log-likelihood of the batch, recorded on the tape.
pub fn batch_nll(tape: &mut Tape, out: Var, batch: &Batch, task: Task) -> Result<Var> {
    match task {
        Task::Classification { .. } => tape.cross_entropy(out, &batch.labels),
        Task::Regression { .. } => {
            let y = batch
                .values
                .as_ref()
                .ok_or_else(|| Error::Data("regression batch without targets".into()))?;
            let t = tape.constant(y.clone())?;
            tape.gaussian_nll(out, t)
        }
    }
}

fn lambda_term_var(tape: &mut Tape, lam: Var, eta: f64) -> Result<Var> {
    // lambda * ln(eta) - eta - lnG(lambda+1) - [lambda * ln(l') - l' - lnG(lambda+1)]
    //   = lambda * (ln eta - ln l') - eta + l',   l' = max(lambda, floor)
    let own = tape.clamp(lam, RATE_FLOOR, f64::INFINITY)?;
    let ln_own = tape.ln(own)?;
    let neg = tape.scale(ln_own, -1.0)?;
    let diff = tape.offset(neg, eta.ln())?;
    let a = tape.mul(lam, diff)?;
    let b = tape.add(a, own)?;
    tape.offset(b, -eta)
}

fn theta_term_var(tape: &mut Tape, theta: Var, sigma: f64) -> Result<Var> {
    let n = tape.value(theta).numel() as f64;
    let sq = tape.mul(theta, theta)?;
    let s = tape.sum(sq)?;
    let s = tape.scale(s, -0.5 / (sigma * sigma))?;
    tape.offset(s, -n * (sigma.ln() + HALF_LN_2PI))
}

/// Records the ELBO of a finished forward pass. Returns the differentiable
/// total and its numeric breakdown.
///
/// Models other than the adaptive KAN get only the likelihood term.
pub fn elbo(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    out: Var,
    batch: &Batch,
    priors: &Priors,
    dataset_size: usize,
) -> Result<(Var, ElboBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Data("ELBO of an empty batch".into()));
    }
    let d = dataset_size.max(1) as f64;
    let nll_mean = batch_nll(tape, out, batch, model.task)?;
    let nll = tape.scale(nll_mean, d)?;
    let mut total = tape.scale(nll, -1.0)?;
    let mut bd = ElboBreakdown {
        nll: tape.scalar_value(nll),
        ..Default::default()
    };
    if model.kind.is_variational() {
        let n_kan = model.kan_layers().count();
        if priors.len() != n_kan {
            return Err(Error::Shape(format!("{} priors for {n_kan} KAN layers", priors.len())));
        }
        let mut kan_i = 0;
        for i in 0..vars.layers.len() {
            let Some(theta) = vars.theta(i) else { continue };
            let (eta, sigma) = (priors.eta[kan_i], priors.sigma[kan_i]);
            kan_i += 1;
            if let (Some(lam), true) = (vars.lambda(i), eta.is_finite()) {
                let lt = lambda_term_var(tape, lam, eta)?;
                bd.lambda_term += tape.scalar_value(lt);
                total = tape.add(total, lt)?;
            }
            if sigma.is_finite() {
                let tt = theta_term_var(tape, theta, sigma)?;
                bd.theta_term += tape.scalar_value(tt);
                total = tape.add(total, tt)?;
            }
        }
    }
    bd.total = tape.scalar_value(total);
    if !bd.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite ELBO {bd:?}")));
    }
    Ok((total, bd))
}

/// Training objective `-elbo / D` together with the breakdown.
pub fn loss(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    out: Var,
    batch: &Batch,
    priors: &Priors,
    dataset_size: usize,
) -> Result<(Var, ElboBreakdown)> {
    let (total, bd) = elbo(tape, model, vars, out, batch, priors, dataset_size)?;
    let l = tape.scale(total, -1.0 / dataset_size.max(1) as f64)?;
    Ok((l, bd))
}

/// ELBO of `batch` with running normalization statistics and no gradient.
pub fn evaluate_elbo(model: &mut Model, batch: &Batch, priors: &Priors, dataset_size: usize) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone())?;
    let (out, vars) = model.forward(&mut tape, x, Mode::Eval)?;
    Ok(elbo(&mut tape, model, &vars, out, batch, priors, dataset_size)?.1)
}

/// Result of forcing one layer through a range of basis counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLipschitz {
    /// Index into `model.layers`.
    pub layer: usize,
    pub ks: Vec<usize>,
    pub elbo: Vec<f64>,
    /// `sum ln p(theta) - ln q(theta)` over the layer's coefficients, with
    /// `q = N(theta, 1)` evaluated at its mean.
    pub prior: Vec<f64>,
    /// Largest `|delta elbo| / |delta K|` between successive counts.
    pub elbo_ratio: f64,
    /// Largest `|delta prior| / (|delta K| * edges)` between successive counts.
    pub prior_ratio: f64,
    /// `max_k |ln p(theta_k) - ln q(theta_k)|` over every coefficient used.
    pub bound: f64,
}

impl LayerLipschitz {
    pub fn within_bound(&self) -> bool {
        self.prior_ratio <= self.bound * (1.0 + 1e-12)
    }
}

/// Evaluates the ELBO with each KAN layer forced to every realizable basis
/// count in `k_range`, one layer at a time.
///
/// Coefficients come from a shared master block of the largest count: the
/// layer's own coefficients extended with prior draws, then truncated. Edge
/// functions at successive counts therefore share all common coefficients.
pub fn lipschitz_probe(
    model: &Model,
    batch: &Batch,
    priors: &Priors,
    dataset_size: usize,
    k_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<LayerLipschitz>> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || hi < lo {
        return Err(Error::Index(format!("invalid basis-count range {lo}..={hi}")));
    }
    let kan_idx: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, crate::model::Layer::Kan(_)))
        .map(|(i, _)| i)
        .collect();
    let mut reports = Vec::with_capacity(kan_idx.len());
    for (li, &layer_i) in kan_idx.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(li as u64));
        let sigma = priors.sigma.get(li).copied().unwrap_or(DEFAULT_SIGMA);
        let base = model.layers[layer_i].clone();
        let crate::model::Layer::Kan(mut master) = base else { unreachable!() };
        let side = master.window.side;
        let ks: Vec<usize> = (lo..=hi)
            .filter(|&k| order_for_half_width(side, half_width_for_order(side, k)).0 == k)
            .collect();
        if ks.len() < 2 {
            return Err(Error::Index(format!("range {lo}..={hi} holds fewer than two realizable counts")));
        }
        let kmax = *ks.last().expect("non-empty");
        let draw_sigma = if sigma.is_finite() { sigma } else { DEFAULT_SIGMA };
        master.resize(kmax, InterpScheme::Lazy, InterpTarget::Raw, draw_sigma, &mut rng)?;
        let edges = master.d_out * master.d_in;
        let mut bound: f64 = 0.0;
        let mut elbo_vals = Vec::with_capacity(ks.len());
        let mut prior_vals = Vec::with_capacity(ks.len());
        for &k in &ks {
            let mut m = model.clone();
            let Some(layer) = m.kan_layer_mut(layer_i) else { unreachable!() };
            *layer = master.clone();
            layer.resize(k, InterpScheme::Lazy, InterpTarget::Raw, 0.0, &mut rng)?;
            layer.force_order(k);
            let mut p = 0.0;
            for &t in layer.theta.data() {
                let r = gaussian_log_density(t, draw_sigma) + HALF_LN_2PI;
                bound = bound.max(r.abs());
                p += r;
            }
            prior_vals.push(p);
            elbo_vals.push(evaluate_elbo(&mut m, batch, priors, dataset_size)?.total);
        }
        let ratio = |v: &[f64], norm: f64| {
            v.windows(2)
                .zip(ks.windows(2))
                .map(|(a, k)| (a[1] - a[0]).abs() / ((k[1] - k[0]) as f64 * norm))
                .fold(0.0, f64::max)
        };
        reports.push(LayerLipschitz {
            layer: layer_i,
            elbo_ratio: ratio(&elbo_vals, 1.0),
            prior_ratio: ratio(&prior_vals, edges as f64),
            ks,
            elbo: elbo_vals,
            prior: prior_vals,
            bound,
        });
    }
    Ok(reports)
}

/// Builds a batch from a feature tensor and class labels.
pub fn class_batch(x: Tensor, labels: Vec<usize>) -> Batch {
    Batch { x, labels, values: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use crate::model::KanSpec;

    fn ln_factorial(n: u64) -> f64 {
        (1..=n).map(|i| (i as f64).ln()).sum()
    }

    #[test]
    fn poisson_examples() {
        assert!((poisson_log_pmf(0.0, 1.0).unwrap() + 1.0).abs() < 1e-15);
        let v = poisson_log_pmf(3.0, 3.0).unwrap();
        assert!((v - (3.0 * 3f64.ln() - 3.0 - 6f64.ln())).abs() < 1e-12);
        assert!((v + 1.4959).abs() < 1e-4);
        assert!(matches!(poisson_log_pmf(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(poisson_log_pmf(1.0, -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn poisson_matches_factorial() {
        for rate in [0.5f64, 1.0, 3.7, 10.0] {
            for n in 0..=20u64 {
                let direct = (rate.powi(n as i32) * (-rate).exp()).ln() - ln_factorial(n);
                let direct = if n == 0 { -rate } else { direct };
                let ours = poisson_log_pmf(n as f64, rate).unwrap();
                assert!((ours - direct).abs() < 1e-12, "rate {rate} n {n}: {ours} vs {direct}");
            }
        }
    }

    #[test]
    fn poisson_grad_matches_fd() {
        let (l, r, h) = (2.3, 4.1, 1e-6);
        let (dl, dr) = poisson_log_pmf_grad(l, r);
        let f = |a: f64, b: f64| poisson_log_pmf(a, b).unwrap();
        assert!((dl - (f(l + h, r) - f(l - h, r)) / (2.0 * h)).abs() < 1e-7);
        assert!((dr - (f(l, r + h) - f(l, r - h)) / (2.0 * h)).abs() < 1e-7);
    }

    #[test]
    fn lambda_ratio_zero_at_eta() {
        let (v, d) = lambda_ratio(5.0, 5.0).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(d.abs() < 1e-12);
        let (_, d) = lambda_ratio(2.0, 5.0).unwrap();
        assert!(d > 0.0);
    }

    fn tiny_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::infinity_kan(
            2,
            &[2],
            Task::Classification { classes: 2 },
            KanSpec::new(BasisFamily::Chebyshev, 1.0),
            &mut rng,
        )
        .unwrap()
    }

    fn tiny_batch() -> Batch {
        class_batch(
            Tensor::matrix(4, 2, vec![0.1, -0.3, 0.8, 0.2, -0.5, 0.9, 0.0, -0.7]).unwrap(),
            vec![0, 1, 1, 0],
        )
    }

    #[test]
    fn elbo_matches_direct_sum() {
        let mut m = tiny_model(1);
        let batch = tiny_batch();
        let priors = Priors::uniform(1, 3.0, 0.7).unwrap();
        let bd = evaluate_elbo(&mut m, &batch, &priors, 40).unwrap();
        let logits = m.predict(&batch.x, Mode::Eval).unwrap();
        let mut nll = 0.0;
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = [logits.at2(i, 0), logits.at2(i, 1)];
            let lse = (row[0].exp() + row[1].exp()).ln();
            nll += lse - row[y];
        }
        let nll = 40.0 * nll / 4.0;
        let layer = m.kan_layers().next().unwrap();
        let lam = layer.window.lambda_bar;
        let lt = poisson_log_pmf(lam, 3.0).unwrap() - poisson_log_pmf(lam, lam).unwrap();
        let tt: f64 = layer
            .theta
            .data()
            .iter()
            .map(|t| -0.5 * t * t / 0.49 - 0.7f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        assert!((bd.nll - nll).abs() < 1e-10);
        assert!((bd.lambda_term - lt).abs() < 1e-10);
        assert!((bd.theta_term - tt).abs() < 1e-10);
        assert!((bd.total - (-nll + lt + tt)).abs() < 1e-10);
    }

    #[test]
    fn flat_priors_leave_likelihood() {
        let mut m = tiny_model(2);
        let batch = tiny_batch();
        let priors = Priors {
            eta: vec![f64::INFINITY],
            sigma: vec![f64::INFINITY],
        };
        let bd = evaluate_elbo(&mut m, &batch, &priors, 10).unwrap();
        assert_eq!(bd.lambda_term, 0.0);
        assert_eq!(bd.theta_term, 0.0);
        assert_eq!(bd.total, -bd.nll);
    }

    #[test]
    fn lambda_term_vanishes_at_eta() {
        let mut m = tiny_model(3);
        m.kan_layer_mut(0).unwrap().window.lambda_bar = 2.0;
        let bd = evaluate_elbo(&mut m, &tiny_batch(), &Priors::uniform(1, 2.0, 1.0).unwrap(), 10).unwrap();
        assert!(bd.lambda_term.abs() < 1e-12);
    }

    #[test]
    fn theta_term_decreases_with_scale() {
        let theta = [0.3, -1.2, 0.5, 2.0];
        let mut last = f64::INFINITY;
        for s in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let scaled: Vec<f64> = theta.iter().map(|t| t * s).collect();
            let v = theta_log_prior(&scaled, 1.3);
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn lipschitz_constant_model() {
        let mut m = tiny_model(4);
        for l in m.kan_layers_mut() {
            l.theta.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let priors = Priors::uniform(1, 5.0, 1.0).unwrap();
        let r = lipschitz_probe(&m, &tiny_batch(), &priors, 10, 3..=8, 0).unwrap();
        assert_eq!(r[0].ks, vec![3, 4, 5, 6, 7, 8]);
        assert!(r[0].within_bound());
        assert!(r[0].elbo_ratio.is_finite());
        let again = lipschitz_probe(&m, &tiny_batch(), &priors, 10, 3..=8, 0).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = tiny_model(5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 2])).unwrap();
        let batch = class_batch(Tensor::zeros(&[0, 2]), vec![]);
        let vars = ModelVars { layers: vec![] };
        let r = elbo(&mut tape, &m, &vars, x, &batch, &Priors::uniform(1, 1.0, 1.0).unwrap(), 1);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
