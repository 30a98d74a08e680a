//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::ResizeEvent;
use crate::param::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step_count: u64,
    /// First and second moments, one buffer per parameter slot.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns the pre-clipping global gradient norm.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P) -> Result<f64> {
        let c = self.config;
        let mut slots = params.param_slots();
        if self.m.len() != slots.len() {
            self.m = slots.iter().map(|s| vec![0.0; s.value.len()]).collect();
            self.v = self.m.clone();
        }
        let sq: f64 = slots
            .iter()
            .filter(|s| s.trainable)
            .flat_map(|s| s.grad.iter())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, s) in slots.iter_mut().enumerate() {
            if s.trainable {
                if self.m[i].len() != s.value.len() {
                    self.m[i] = vec![0.0; s.value.len()];
                    self.v[i] = vec![0.0; s.value.len()];
                }
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                for j in 0..s.value.len() {
                    let g = s.grad[j] * scale;
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    let mut upd = mh / (vh.sqrt() + c.eps);
                    if s.decay {
                        upd += c.weight_decay * s.value[j];
                    }
                    s.value[j] -= c.lr * upd;
                }
            }
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(norm)
    }

    /// Carries the moments of slot `slot` through a coefficient resize.
    pub fn remap_slot(&mut self, slot: usize, event: &ResizeEvent, rows: usize) {
        if slot >= self.m.len() {
            return;
        }
        if self.m[slot].len() != rows * event.old_k {
            self.m[slot] = vec![0.0; rows * event.new_k];
            self.v[slot] = vec![0.0; rows * event.new_k];
            return;
        }
        self.m[slot] = event.remap_aux(&self.m[slot], rows, false);
        self.v[slot] = event.remap_aux(&self.v[slot], rows, true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamSlot;

    struct Quad {
        x: Vec<f64>,
        g: Vec<f64>,
        decay: bool,
    }

    impl Parameters for Quad {
        fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
            vec![ParamSlot {
                name: "x".into(),
                value: &mut self.x,
                grad: &mut self.g,
                decay: self.decay,
                trainable: true,
            }]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut q = Quad {
            x: vec![1.0, -2.0],
            g: vec![3.0, -0.5],
            decay: false,
        };
        let mut opt = AdamW::new(AdamConfig {
            clip_norm: None,
            ..Default::default()
        });
        opt.step(&mut q).unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((q.x[0] - (1.0 - 1e-2)).abs() < 1e-9);
        assert!((q.x[1] - (-2.0 + 1e-2)).abs() < 1e-9);
        assert_eq!(q.g, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut q = Quad {
            x: vec![0.3, 0.7],
            g: vec![1.0, 1.0],
            decay: true,
        };
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        for _ in 0..10 {
            q.g = vec![5.0, -5.0];
            opt.step(&mut q).unwrap();
        }
        assert_eq!(q.x, vec![0.3, 0.7]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quad {
            x: vec![2.0, -3.0],
            g: vec![0.0; 2],
            decay: false,
        };
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            q.g = q.x.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut q).unwrap();
        }
        assert!(q.x.iter().all(|x| x.abs() < 1e-3), "{:?}", q.x);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut q = Quad {
            x: vec![0.0],
            g: vec![1e6],
            decay: false,
        };
        let mut opt = AdamW::new(AdamConfig::default());
        let n = opt.step(&mut q).unwrap();
        assert_eq!(n, 1e6);
        assert!((opt.m[0][0] - 0.1 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_errors() {
        let mut q = Quad {
            x: vec![0.0],
            g: vec![f64::NAN],
            decay: false,
        };
        assert!(matches!(AdamW::new(AdamConfig::default()).step(&mut q), Err(Error::Numeric(_))));
    }

    #[test]
    fn remap_keeps_second_moment_non_negative() {
        let ev = ResizeEvent {
            old_k: 2,
            new_k: 3,
            matrix: Some(nalgebra::DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.5, -1.0, 0.0])),
        };
        let mut opt = AdamW::new(AdamConfig::default());
        opt.m = vec![vec![1.0, 2.0]];
        opt.v = vec![vec![4.0, 2.0]];
        opt.remap_slot(0, &ev, 1);
        assert_eq!(opt.m[0], vec![1.0, 1.5, -1.0]);
        assert_eq!(opt.v[0], vec![4.0, 3.0, 0.0]);
    }
}
