//! KAN layer with a windowed, resizable basis expansion.
//!
//! Forward pass for input `x[batch, d_in]`:
//!
//! ```text
//! z = tanh(batch_norm(x))                       // into (-1, 1)
//! h[b, q] = sum_{p, k} theta[q, p, k] * w[k] * phi_k(z[b, p])
//! ```
//!
//! `w` is the window sampled on the current grid of `K` points; fixed-order
//! layers use `w = 1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, Tape, Tensor, Var};
use crate::basis::{BasisFamily, BasisGrid, PRELU_INIT};
use crate::error::{shape_err, Error, Result};
use crate::interp::{remap_matrix, InterpScheme};
use crate::param::{ParamSlot, Parameters};
use crate::window::WindowParams;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which quantity the interpolating schemes carry across a resize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpTarget {
    /// Interpolate `theta * w`, then divide by the new window.
    Product,
    /// Interpolate `theta` directly.
    Raw,
}

/// Batch-norm state with learnable affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    #[serde(skip)]
    gamma_grad: Vec<f64>,
    #[serde(skip)]
    beta_grad: Vec<f64>,
}

impl NormState {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            momentum: BN_MOMENTUM,
            gamma_grad: vec![0.0; d],
            beta_grad: vec![0.0; d],
        }
    }

    fn update_running(&mut self, stats: &BatchStats, batch: usize) {
        let m = self.momentum;
        let unbias = if batch > 1 { batch as f64 / (batch - 1) as f64 } else { 1.0 };
        for j in 0..self.gamma.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.mean[j];
            self.running_var[j] = ((1.0 - m) * self.running_var[j] + m * stats.var[j] * unbias).max(0.0);
        }
    }

    fn ensure_grads(&mut self) {
        let d = self.gamma.len();
        if self.gamma_grad.len() != d {
            self.gamma_grad = vec![0.0; d];
            self.beta_grad = vec![0.0; d];
        }
    }
}

/// Tape handles for one layer's parameters during a pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    theta: Var,
    lambda: Option<Var>,
    slope: Option<Var>,
    gamma: Var,
    beta: Var,
    basis_input: Var,
}

impl LayerVars {
    pub fn theta(&self) -> Var {
        self.theta
    }

    /// Present only when `lambda_bar` is learnable in this pass.
    pub fn lambda(&self) -> Option<Var> {
        self.lambda
    }

    /// The `[batch, d_in]` values fed to the basis functions (normalized and
    /// squashed into `(-1, 1)`).
    pub fn basis_input(&self) -> Var {
        self.basis_input
    }
}

/// Record of a basis-count change, reused to remap optimizer moments.
#[derive(Debug, Clone)]
pub struct ResizeEvent {
    pub old_k: usize,
    pub new_k: usize,
    /// `new = M old` for each `(q, p)` row; `None` for lazy resizing.
    pub matrix: Option<DMatrix<f64>>,
}

impl ResizeEvent {
    /// Applies the same remap to an auxiliary `[d_out, d_in, old_k]` buffer.
    /// Lazy growth fills with zeros. When `non_negative` is set the result is
    /// clamped at zero (second moments).
    pub fn remap_aux(&self, aux: &[f64], rows: usize, non_negative: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.new_k);
        for r in 0..rows {
            let old = &aux[r * self.old_k..(r + 1) * self.old_k];
            match &self.matrix {
                Some(m) => {
                    let v = m * DVector::from_column_slice(old);
                    out.extend(v.iter().map(|&x| if non_negative { x.max(0.0) } else { x }));
                }
                None => {
                    let keep = self.old_k.min(self.new_k);
                    out.extend_from_slice(&old[..keep]);
                    out.extend(std::iter::repeat_n(0.0, self.new_k - keep));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub family: BasisFamily,
    /// Coefficients, shape `[d_out, d_in, K]`.
    pub theta: Tensor,
    pub window: WindowParams,
    /// Window applied in the forward pass. Fixed-order layers set this false.
    pub windowed: bool,
    /// Whether `lambda_bar` is learnable.
    pub learn_lambda: bool,
    /// PReLU slope (unused by other families).
    pub slope: f64,
    pub norm: NormState,
    #[serde(skip)]
    theta_grad: Vec<f64>,
    #[serde(skip)]
    lambda_grad: f64,
    #[serde(skip)]
    slope_grad: f64,
}

impl KanLayer {
    /// Adaptive layer whose basis count follows `window.lambda_bar`.
    pub fn adaptive(d_in: usize, d_out: usize, family: BasisFamily, window: WindowParams) -> Result<Self> {
        let k = window.effective_order().0;
        Self::build(d_in, d_out, family, window, k, true)
    }

    /// Fixed-order layer with `k` basis functions and no window.
    pub fn fixed(d_in: usize, d_out: usize, family: BasisFamily, k: usize, window: WindowParams) -> Result<Self> {
        Self::build(d_in, d_out, family, window, k, false)
    }

    fn build(
        d_in: usize,
        d_out: usize,
        family: BasisFamily,
        window: WindowParams,
        k: usize,
        adaptive: bool,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 || k == 0 {
            return shape_err(format!("layer dims must be positive: {d_in} -> {d_out}, K = {k}"));
        }
        Ok(Self {
            d_in,
            d_out,
            family,
            theta: Tensor::zeros(&[d_out, d_in, k]),
            window,
            windowed: adaptive,
            learn_lambda: adaptive,
            slope: PRELU_INIT,
            norm: NormState::new(d_in),
            theta_grad: vec![0.0; d_out * d_in * k],
            lambda_grad: 0.0,
            slope_grad: 0.0,
        })
    }

    /// Current basis count (third dimension of `theta`).
    pub fn k(&self) -> usize {
        self.theta.shape()[2]
    }

    pub fn grid(&self) -> BasisGrid {
        BasisGrid::new(self.k()).expect("K >= 1")
    }

    /// Window values for the current K (all ones when unwindowed).
    pub fn window_values(&self) -> Vec<f64> {
        if self.windowed {
            self.window.values_for(self.k())
        } else {
            vec![1.0; self.k()]
        }
    }

    /// Target K implied by the current window state.
    pub fn target_k(&self) -> usize {
        if self.learn_lambda {
            self.window.effective_order().0
        } else {
            self.k()
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.numel()
            + 2 * self.d_in
            + usize::from(self.learn_lambda)
            + usize::from(self.family.has_slope())
    }

    /// Zero-mean Gaussian initialization. Chebyshev uses variance
    /// `4 / (K - 5/4)` (1 when `K = 1`); other families use `2 / (d_in K)`.
    pub fn init_theta<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let var = self.init_variance();
        let normal = Normal::new(0.0, var.sqrt()).expect("finite variance");
        for v in self.theta.data_mut() {
            *v = normal.sample(rng);
        }
    }

    pub fn init_variance(&self) -> f64 {
        let k = self.k() as f64;
        match self.family {
            BasisFamily::Chebyshev if self.k() >= 2 => 4.0 / (k - 1.25),
            BasisFamily::Chebyshev => 1.0,
            _ => 2.0 / (self.d_in as f64 * k),
        }
    }

    /// Records the forward pass. In eval mode parameters enter the tape as
    /// constants and running statistics are used for normalization.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, LayerVars)> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.d_in {
            return shape_err(format!("layer expects [batch, {}], got {xs:?}", self.d_in));
        }
        let batch = xs[0];
        let train = mode == Mode::Train;
        let leaf = |tape: &mut Tape, t: Tensor| if train { tape.param(t) } else { tape.constant(t) };

        let gamma = leaf(tape, Tensor::vector(self.norm.gamma.clone()))?;
        let beta = leaf(tape, Tensor::vector(self.norm.beta.clone()))?;
        let (normed, stats) = if train {
            tape.batch_norm(x, gamma, beta, None, BN_EPS)?
        } else {
            tape.batch_norm(
                x,
                gamma,
                beta,
                Some((&self.norm.running_mean, &self.norm.running_var)),
                BN_EPS,
            )?
        };
        if let Some(s) = stats {
            self.norm.update_running(&s, batch);
        }
        let z = tape.tanh(normed)?;

        let k = self.k();
        let grid = self.grid();
        let family = self.family;
        let (phi, slope) = if family.has_slope() {
            let s = leaf(tape, Tensor::scalar(self.slope))?;
            let BasisFamily::Piecewise(act) = family else {
                unreachable!("only piecewise families carry a slope")
            };
            let phi = tape.expand_last_param(z, s, k, |x, j, a| act.eval(x - grid.knots[j], a))?;
            (phi, Some(s))
        } else {
            let phi = tape.expand_last(z, k, |x, j| family.eval_one(&grid, j, x, 0.0).expect("j < K"))?;
            (phi, None)
        };

        let theta = leaf(tape, self.theta.clone())?;
        let (coeff, lambda) = if self.windowed {
            let lam = if train && self.learn_lambda {
                tape.param(Tensor::scalar(self.window.lambda_bar))?
            } else {
                tape.constant(Tensor::scalar(self.window.lambda_bar))?
            };
            let w = self.window.record(tape, lam, k)?;
            (tape.mul(theta, w)?, Some(lam))
        } else {
            (theta, None)
        };

        let flat_phi = tape.reshape(phi, &[batch, self.d_in * k])?;
        let flat_c = tape.reshape(coeff, &[self.d_out, self.d_in * k])?;
        let ct = tape.transpose(flat_c)?;
        let out = tape.matmul(flat_phi, ct)?;
        Ok((
            out,
            LayerVars {
                theta,
                lambda,
                slope,
                gamma,
                beta,
                basis_input: z,
            },
        ))
    }

    /// Adds this pass's gradients into the layer's gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &LayerVars) {
        self.ensure_grads();
        if let Some(g) = grads.get(vars.theta) {
            for (a, b) in self.theta_grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(g) = grads.get(vars.gamma) {
            for (a, b) in self.norm.gamma_grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(g) = grads.get(vars.beta) {
            for (a, b) in self.norm.beta_grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(l) = vars.lambda {
            if let Some(g) = grads.get(l) {
                self.lambda_grad += g[0];
            }
        }
        if let Some(s) = vars.slope {
            if let Some(g) = grads.get(s) {
                self.slope_grad += g[0];
            }
        }
    }

    pub fn lambda_grad(&self) -> f64 {
        self.lambda_grad
    }

    pub fn add_lambda_grad(&mut self, g: f64) {
        self.lambda_grad += g;
    }

    pub fn add_theta_grad(&mut self, g: &[f64]) {
        self.ensure_grads();
        for (a, b) in self.theta_grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn ensure_grads(&mut self) {
        if self.theta_grad.len() != self.theta.numel() {
            self.theta_grad = vec![0.0; self.theta.numel()];
        }
        self.norm.ensure_grads();
    }

    /// Univariate edge function `phi_{q,p}(z) = sum_k theta w_k phi_k(z)` on
    /// the normalized domain.
    pub fn edge_function(&self, q: usize, p: usize, z: f64) -> f64 {
        let grid = self.grid();
        let w = self.window_values();
        (0..self.k())
            .map(|k| {
                self.theta.at3(q, p, k) * w[k] * self.family.eval_one(&grid, k, z, self.slope).expect("k < K").0
            })
            .sum()
    }

    /// Changes the basis count to `new_k`, remapping coefficients row by row.
    ///
    /// `pinv` and `linear` act on the windowed coefficients `theta * w` when
    /// `target` is [`InterpTarget::Product`] and divide by the new window
    /// afterwards. `lazy` copies shared coefficients and draws new ones from
    /// `N(0, prior_sigma^2)`.
    pub fn resize<R: Rng + ?Sized>(
        &mut self,
        new_k: usize,
        scheme: InterpScheme,
        target: InterpTarget,
        prior_sigma: f64,
        rng: &mut R,
    ) -> Result<ResizeEvent> {
        if new_k == 0 {
            return Err(Error::Index("basis count must be at least 1".into()));
        }
        let old_k = self.k();
        if scheme == InterpScheme::Linear && !self.family.requires_interp() {
            return Err(Error::Unsupported(format!(
                "linear interpolation is only defined for piecewise bases, not {}",
                self.family
            )));
        }
        if new_k == old_k {
            return Ok(ResizeEvent {
                old_k,
                new_k,
                matrix: Some(DMatrix::identity(old_k, old_k)),
            });
        }
        let rows = self.d_out * self.d_in;
        let old = self.theta.data().to_vec();
        let mut data = Vec::with_capacity(rows * new_k);
        let matrix = match scheme {
            InterpScheme::Lazy => {
                let normal = if prior_sigma > 0.0 {
                    Some(Normal::new(0.0, prior_sigma).map_err(|e| Error::Domain(e.to_string()))?)
                } else {
                    None
                };
                for r in 0..rows {
                    let row = &old[r * old_k..(r + 1) * old_k];
                    let keep = old_k.min(new_k);
                    data.extend_from_slice(&row[..keep]);
                    for _ in keep..new_k {
                        data.push(normal.as_ref().map_or(0.0, |n| n.sample(rng)));
                    }
                }
                None
            }
            InterpScheme::Pinv | InterpScheme::Linear => {
                let m = remap_matrix(scheme, self.family, old_k, new_k, self.slope)?;
                let product = self.windowed && target == InterpTarget::Product;
                let (w_old, w_new) = if product {
                    (self.window.values_for(old_k), self.window.values_for(new_k))
                } else {
                    (vec![1.0; old_k], vec![1.0; new_k])
                };
                for r in 0..rows {
                    let row = &old[r * old_k..(r + 1) * old_k];
                    let c = DVector::from_iterator(old_k, row.iter().zip(&w_old).map(|(t, w)| t * w));
                    let nc = &m * c;
                    data.extend(nc.iter().zip(&w_new).map(|(c, w)| c / w));
                }
                Some(m)
            }
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("resize produced non-finite coefficients".into()));
        }
        self.theta = Tensor::new(vec![self.d_out, self.d_in, new_k], data)?;
        self.theta_grad = vec![0.0; self.theta.numel()];
        Ok(ResizeEvent { old_k, new_k, matrix })
    }

    /// Sets `lambda_bar` so that the effective order is exactly `k`.
    pub fn force_order(&mut self, k: usize) {
        let m = crate::window::half_width_for_order(self.window.side, k);
        self.window.lambda_bar = m as f64;
    }
}

impl Parameters for KanLayer {
    fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        self.ensure_grads();
        let has_slope = self.family.has_slope();
        let learn_lambda = self.learn_lambda;
        let mut out = vec![
            ParamSlot {
                name: "theta".into(),
                value: self.theta.data_mut(),
                grad: &mut self.theta_grad,
                decay: true,
                trainable: true,
            },
            ParamSlot {
                name: "norm.gamma".into(),
                value: &mut self.norm.gamma,
                grad: &mut self.norm.gamma_grad,
                decay: true,
                trainable: true,
            },
            ParamSlot {
                name: "norm.beta".into(),
                value: &mut self.norm.beta,
                grad: &mut self.norm.beta_grad,
                decay: true,
                trainable: true,
            },
        ];
        out.push(ParamSlot {
            name: "lambda_bar".into(),
            value: std::slice::from_mut(&mut self.window.lambda_bar),
            grad: std::slice::from_mut(&mut self.lambda_grad),
            decay: false,
            trainable: learn_lambda,
        });
        out.push(ParamSlot {
            name: "slope".into(),
            value: std::slice::from_mut(&mut self.slope),
            grad: std::slice::from_mut(&mut self.slope_grad),
            decay: false,
            trainable: has_slope,
        });
        out
    }
}
