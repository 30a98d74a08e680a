//! Central finite-difference checks of tape gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::Result;
use crate::layer::Mode;
use crate::model::Model;
use crate::param::Parameters;
use crate::variational::{self, Priors};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Name and coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    fn empty() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    fn record(&mut self, name: &str, i: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((name.to_string(), i));
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks `d f / d inputs` for a scalar function built on a fresh tape.
pub fn check_fn<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ins.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let s = tape.sum(out)?;
        Ok(tape.scalar_value(s))
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let root = tape.sum(out)?;
    let grads = tape.backward(root)?;
    let mut report = GradReport::empty();
    let mut work = inputs.to_vec();
    for (a, v) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(*v, inputs[a].numel());
        for i in 0..inputs[a].numel() {
            let x0 = inputs[a].data()[i];
            work[a].data_mut()[i] = x0 + FD_STEP;
            let fp = eval(&work)?;
            work[a].data_mut()[i] = x0 - FD_STEP;
            let fm = eval(&work)?;
            work[a].data_mut()[i] = x0;
            report.record(&format!("input{a}"), i, g[i], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

fn model_loss(model: &mut Model, batch: &Batch, priors: &Priors, d: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone())?;
    let (out, vars) = model.forward(&mut tape, x, Mode::Train)?;
    let (l, _) = variational::loss(&mut tape, model, &vars, out, batch, priors, d)?;
    Ok(tape.scalar_value(l))
}

/// Checks the gradient of the training loss with respect to every trainable
/// parameter of `model`, basis counts held fixed.
pub fn check_model(model: &Model, batch: &Batch, priors: &Priors, dataset_size: usize) -> Result<GradReport> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone())?;
    let (out, vars) = m.forward(&mut tape, x, Mode::Train)?;
    let (l, _) = variational::loss(&mut tape, &m, &vars, out, batch, priors, dataset_size)?;
    let grads = tape.backward(l)?;
    m.zero_grad();
    m.accumulate(&grads, &vars);
    let analytic: Vec<(String, bool, Vec<f64>)> = m
        .param_slots()
        .into_iter()
        .map(|s| (s.name, s.trainable, s.grad.to_vec()))
        .collect();
    let mut report = GradReport::empty();
    for (si, (name, trainable, g)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (i, &ga) in g.iter().enumerate() {
            let mut probe = model.clone();
            let x0 = probe.param_slots()[si].value[i];
            probe.param_slots()[si].value[i] = x0 + FD_STEP;
            let fp = model_loss(&mut probe, batch, priors, dataset_size)?;
            let mut probe = model.clone();
            probe.param_slots()[si].value[i] = x0 - FD_STEP;
            let fm = model_loss(&mut probe, batch, priors, dataset_size)?;
            report.record(name, i, ga, (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_passes() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = check_fn(&[x], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.mul(sq, v[0])
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_detected() {
        // relu at a kink: analytic 0 vs numeric 0.5
        let x = Tensor::vector(vec![0.0]);
        let r = check_fn(&[x], |t, v| t.relu(v[0])).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1e-9, 0.0), 1e-5);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
