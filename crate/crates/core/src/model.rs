//! Model assembly: adaptive KAN, fixed-order KAN and MLP baselines.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::basis::{Activation, BasisFamily};
use crate::error::{shape_err, Error, Result};
use crate::layer::{KanLayer, LayerVars, Mode};
use crate::param::{ParamSlot, Parameters};
use crate::window::{WindowParams, WindowSide};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    InfinityKan,
    FixedKan { order: usize },
    Mlp { hidden: Vec<usize> },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::InfinityKan => "infinity_kan",
            ModelKind::FixedKan { .. } => "fixed_kan",
            ModelKind::Mlp { .. } => "mlp",
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, ModelKind::InfinityKan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression { dim: usize },
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Classification { classes } => classes,
            Task::Regression { dim } => dim,
        }
    }
}

/// Affine layer with an optional activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// Weights, shape `[d_in, d_out]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub activation: Option<Activation>,
    #[serde(skip)]
    weight_grad: Vec<f64>,
    #[serde(skip)]
    bias_grad: Vec<f64>,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, activation: Option<Activation>, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("positive fan-in");
        let w = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        Self {
            d_in,
            d_out,
            weight: Tensor::new(vec![d_in, d_out], w).expect("sized"),
            bias: vec![0.0; d_out],
            activation,
            weight_grad: vec![0.0; d_in * d_out],
            bias_grad: vec![0.0; d_out],
        }
    }

    fn ensure_grads(&mut self) {
        if self.weight_grad.len() != self.weight.numel() {
            self.weight_grad = vec![0.0; self.weight.numel()];
            self.bias_grad = vec![0.0; self.d_out];
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, [Var; 2])> {
        let train = mode == Mode::Train;
        let (w, b) = if train {
            (tape.param(self.weight.clone())?, tape.param(Tensor::vector(self.bias.clone()))?)
        } else {
            (tape.constant(self.weight.clone())?, tape.constant(Tensor::vector(self.bias.clone()))?)
        };
        let h = tape.matmul(x, w)?;
        let h = tape.add(h, b)?;
        let h = match self.activation {
            Some(a) => tape.unary(h, a.as_unary(crate::basis::PRELU_INIT))?,
            None => h,
        };
        Ok((h, [w, b]))
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.d_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Kan(KanLayer),
    Dense(DenseLayer),
}

#[derive(Debug, Clone)]
pub enum LayerBinding {
    Kan(LayerVars),
    Dense([Var; 2]),
}

/// Per-layer tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub layers: Vec<LayerBinding>,
}

impl ModelVars {
    /// Lambda variable of layer `i`, when it is learnable in this pass.
    pub fn lambda(&self, i: usize) -> Option<Var> {
        match self.layers.get(i)? {
            LayerBinding::Kan(v) => v.lambda(),
            LayerBinding::Dense(_) => None,
        }
    }

    pub fn theta(&self, i: usize) -> Option<Var> {
        match self.layers.get(i)? {
            LayerBinding::Kan(v) => Some(v.theta()),
            LayerBinding::Dense(_) => None,
        }
    }

    pub fn basis_input(&self, i: usize) -> Option<Var> {
        match self.layers.get(i)? {
            LayerBinding::Kan(v) => Some(v.basis_input()),
            LayerBinding::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub task: Task,
    pub d_in: usize,
    pub layers: Vec<Layer>,
}

/// Shape options for KAN models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KanSpec {
    pub family: BasisFamily,
    pub lambda_init: f64,
    pub beta: f64,
    pub gamma: f64,
    pub side: WindowSide,
}

impl KanSpec {
    pub fn new(family: BasisFamily, lambda_init: f64) -> Self {
        Self {
            family,
            lambda_init,
            beta: crate::window::DEFAULT_BETA,
            gamma: crate::window::DEFAULT_GAMMA,
            side: default_side(family),
        }
    }
}

/// Ordered series (Chebyshev, Fourier) use the one-sided window.
pub fn default_side(family: BasisFamily) -> WindowSide {
    if family.requires_interp() {
        WindowSide::Symmetric
    } else {
        WindowSide::OneSided
    }
}

impl Model {
    /// Adaptive KAN with layer output widths `widths`; the last width must
    /// match the task output.
    pub fn infinity_kan<R: Rng + ?Sized>(
        d_in: usize,
        widths: &[usize],
        task: Task,
        spec: KanSpec,
        rng: &mut R,
    ) -> Result<Self> {
        Self::kan(ModelKind::InfinityKan, d_in, widths, task, spec, rng)
    }

    pub fn fixed_kan<R: Rng + ?Sized>(
        d_in: usize,
        widths: &[usize],
        task: Task,
        spec: KanSpec,
        order: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::kan(ModelKind::FixedKan { order }, d_in, widths, task, spec, rng)
    }

    fn kan<R: Rng + ?Sized>(
        kind: ModelKind,
        d_in: usize,
        widths: &[usize],
        task: Task,
        spec: KanSpec,
        rng: &mut R,
    ) -> Result<Self> {
        check_widths(widths, task)?;
        let window = WindowParams::new(spec.lambda_init, spec.side).with_shape(spec.beta, spec.gamma);
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = d_in;
        for &w in widths {
            let mut l = match kind {
                ModelKind::FixedKan { order } => KanLayer::fixed(prev, w, spec.family, order, window)?,
                _ => KanLayer::adaptive(prev, w, spec.family, window)?,
            };
            l.init_theta(rng);
            layers.push(Layer::Kan(l));
            prev = w;
        }
        Ok(Self {
            kind,
            task,
            d_in,
            layers,
        })
    }

    /// MLP baseline: `hidden` affine+activation layers, then an affine output.
    pub fn mlp<R: Rng + ?Sized>(
        d_in: usize,
        hidden: &[usize],
        activation: Activation,
        task: Task,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return shape_err(format!("mlp hidden widths must be non-empty and positive: {hidden:?}"));
        }
        let mut layers = Vec::new();
        let mut prev = d_in;
        for &h in hidden {
            layers.push(Layer::Dense(DenseLayer::new(prev, h, Some(activation), rng)));
            prev = h;
        }
        layers.push(Layer::Dense(DenseLayer::new(prev, task.output_dim(), None, rng)));
        Ok(Self {
            kind: ModelKind::Mlp {
                hidden: hidden.to_vec(),
            },
            task,
            d_in,
            layers,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, ModelVars)> {
        let mut h = x;
        let mut bindings = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            match layer {
                Layer::Kan(l) => {
                    let (o, v) = l.forward(tape, h, mode)?;
                    h = o;
                    bindings.push(LayerBinding::Kan(v));
                }
                Layer::Dense(l) => {
                    let (o, v) = l.forward(tape, h, mode)?;
                    h = o;
                    bindings.push(LayerBinding::Dense(v));
                }
            }
        }
        Ok((h, ModelVars { layers: bindings }))
    }

    /// Forward pass on a plain feature matrix without keeping the tape.
    pub fn predict(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (out, _) = self.forward(&mut tape, xv, mode)?;
        Ok(tape.value(out).clone())
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &ModelVars) {
        for (layer, b) in self.layers.iter_mut().zip(&vars.layers) {
            match (layer, b) {
                (Layer::Kan(l), LayerBinding::Kan(v)) => l.accumulate(grads, v),
                (Layer::Dense(l), LayerBinding::Dense([w, bv])) => {
                    l.ensure_grads();
                    if let Some(g) = grads.get(*w) {
                        for (a, b) in l.weight_grad.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    if let Some(g) = grads.get(*bv) {
                        for (a, b) in l.bias_grad.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
                _ => unreachable!("bindings follow layer order"),
            }
        }
    }

    pub fn kan_layers(&self) -> impl Iterator<Item = &KanLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Kan(k) => Some(k),
            Layer::Dense(_) => None,
        })
    }

    pub fn kan_layers_mut(&mut self) -> impl Iterator<Item = &mut KanLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Kan(k) => Some(k),
            Layer::Dense(_) => None,
        })
    }

    pub fn kan_layer_mut(&mut self, i: usize) -> Option<&mut KanLayer> {
        match self.layers.get_mut(i)? {
            Layer::Kan(k) => Some(k),
            Layer::Dense(_) => None,
        }
    }

    pub fn ks(&self) -> Vec<usize> {
        self.kan_layers().map(|l| l.k()).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.kan_layers().map(|l| l.window.lambda_bar).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Kan(k) => k.param_count(),
                Layer::Dense(d) => d.param_count(),
            })
            .sum()
    }

    /// Index of each layer's first parameter slot in [`Parameters::param_slots`].
    pub fn slot_offsets(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &mut self.layers {
            out.push(off);
            off += match l {
                Layer::Kan(k) => k.param_slots().len(),
                Layer::Dense(_) => 2,
            };
        }
        out
    }

    pub fn clamp_lambdas(&mut self) {
        for l in self.kan_layers_mut() {
            l.window.clamp();
        }
    }
}

fn check_widths(widths: &[usize], task: Task) -> Result<()> {
    match widths.last() {
        None => shape_err("at least one layer width is required"),
        Some(_) if widths.contains(&0) => shape_err(format!("layer widths must be positive: {widths:?}")),
        Some(&last) if last != task.output_dim() => Err(Error::Shape(format!(
            "last layer width {last} does not match the task output dimension {}",
            task.output_dim()
        ))),
        Some(_) => Ok(()),
    }
}

impl Parameters for Model {
    fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Kan(k) => {
                    for mut s in k.param_slots() {
                        s.name = format!("layers.{i}.{}", s.name);
                        out.push(s);
                    }
                }
                Layer::Dense(d) => {
                    d.ensure_grads();
                    out.push(ParamSlot {
                        name: format!("layers.{i}.weight"),
                        value: d.weight.data_mut(),
                        grad: &mut d.weight_grad,
                        decay: true,
                        trainable: true,
                    });
                    out.push(ParamSlot {
                        name: format!("layers.{i}.bias"),
                        value: &mut d.bias,
                        grad: &mut d.bias_grad,
                        decay: true,
                        trainable: true,
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::mlp(2, &[32], Activation::Relu, Task::Classification { classes: 3 }, &mut rng).unwrap();
        let x = Tensor::new(vec![5, 2], vec![0.1; 10]).unwrap();
        assert_eq!(m.predict(&x, Mode::Eval).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn width_chain_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = KanSpec::new(BasisFamily::Chebyshev, 2.0);
        let r = Model::infinity_kan(2, &[8, 3], Task::Classification { classes: 2 }, spec, &mut rng);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn param_count_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = KanSpec::new(BasisFamily::Chebyshev, 4.0);
        let m = Model::infinity_kan(2, &[8, 2], Task::Classification { classes: 2 }, spec, &mut rng).unwrap();
        // K = 5 per layer (one-sided, lambda 4)
        let expected = (8 * 2 * 5 + 2 * 2 + 1) + (2 * 8 * 5 + 2 * 8 + 1);
        assert_eq!(m.param_count(), expected);
        let spec = KanSpec::new(BasisFamily::Piecewise(Activation::Relu), 2.0);
        let m = Model::fixed_kan(2, &[8, 2], Task::Classification { classes: 2 }, spec, 10, &mut rng).unwrap();
        assert_eq!(m.param_count(), (8 * 2 * 10 + 4) + (2 * 8 * 10 + 16));
    }
}
