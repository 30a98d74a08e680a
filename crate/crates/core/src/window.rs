//! Truncated sigmoid weighting over basis indices.
//!
//! `w(x) = 1 / (1 + exp(-beta * lambda + beta * gamma * |x|))`, sampled at
//! `K` points. The grid length is the truncation: with `m = ceil(lambda)`,
//! a symmetric window has `K = 2m + 1` points `x = -2m, -2m + 2, ..., 2m`
//! and a one-sided window has `K = m + 1` points `x = 0, 1, ..., m`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSide {
    Symmetric,
    OneSided,
}

impl fmt::Display for WindowSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowSide::Symmetric => "symmetric",
            WindowSide::OneSided => "one_sided",
        })
    }
}

impl FromStr for WindowSide {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "symmetric" => Ok(WindowSide::Symmetric),
            "one_sided" | "onesided" | "one-sided" => Ok(WindowSide::OneSided),
            o => Err(format!("unknown window side `{o}` (expected symmetric or one_sided)")),
        }
    }
}

pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    /// Learnable mean of the basis-count distribution. Kept `>= 0`.
    pub lambda_bar: f64,
    pub beta: f64,
    pub gamma: f64,
    pub side: WindowSide,
}

/// Number of basis functions active in a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EffectiveOrder(pub usize);

impl WindowParams {
    pub fn new(lambda_bar: f64, side: WindowSide) -> Self {
        Self {
            lambda_bar: lambda_bar.max(0.0),
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            side,
        }
    }

    pub fn with_shape(mut self, beta: f64, gamma: f64) -> Self {
        self.beta = beta;
        self.gamma = gamma;
        self
    }

    pub fn clamp(&mut self) {
        if !(self.lambda_bar >= 0.0) {
            self.lambda_bar = 0.0;
        }
    }

    /// Integer half-width `ceil(lambda_bar)`.
    pub fn half_width(&self) -> usize {
        self.lambda_bar.max(0.0).ceil() as usize
    }

    pub fn effective_order(&self) -> EffectiveOrder {
        order_for_half_width(self.side, self.half_width())
    }

    /// Sample positions for a window of `k` points.
    pub fn positions(side: WindowSide, k: usize) -> Vec<f64> {
        match side {
            WindowSide::Symmetric => (0..k).map(|i| 2.0 * i as f64 - (k as f64 - 1.0)).collect(),
            WindowSide::OneSided => (0..k).map(|i| i as f64).collect(),
        }
    }

    /// Window value at position `x` and its derivative in `lambda_bar`.
    pub fn value_at(&self, x: f64) -> (f64, f64) {
        let w = sigmoid(self.beta * self.lambda_bar - self.beta * self.gamma * x.abs());
        (w, self.beta * w * (1.0 - w))
    }

    /// Window sampled on a grid of `k` points (not necessarily the current K).
    pub fn values_for(&self, k: usize) -> Vec<f64> {
        Self::positions(self.side, k).into_iter().map(|x| self.value_at(x).0).collect()
    }

    /// Window sampled on its own effective grid.
    pub fn values(&self) -> Vec<f64> {
        self.values_for(self.effective_order().0)
    }

    pub fn mass(&self) -> f64 {
        self.values().iter().sum()
    }

    /// `K - mass`, summed from the complementary sigmoids so it stays
    /// accurate when every weight is within rounding of 1.
    pub fn deficit(&self) -> f64 {
        Self::positions(self.side, self.effective_order().0)
            .into_iter()
            .map(|x| sigmoid(self.beta * self.gamma * x.abs() - self.beta * self.lambda_bar))
            .sum()
    }

    /// `other.mass() - self.mass()`, computed from the change in `K` and in
    /// [`WindowParams::deficit`].
    pub fn mass_increase_to(&self, other: &WindowParams) -> f64 {
        let dk = other.effective_order().0 as f64 - self.effective_order().0 as f64;
        dk + (self.deficit() - other.deficit())
    }

    /// Derivative of [`WindowParams::mass`] in `lambda_bar` with `K` held fixed.
    pub fn mass_gradient(&self) -> f64 {
        let k = self.effective_order().0;
        Self::positions(self.side, k).into_iter().map(|x| self.value_at(x).1).sum()
    }

    /// Records the `k`-point window on a tape as a function of the scalar
    /// variable `lambda`.
    pub fn record(&self, tape: &mut Tape, lambda: Var, k: usize) -> Result<Var> {
        let offsets: Vec<f64> = Self::positions(self.side, k)
            .into_iter()
            .map(|x| -self.beta * self.gamma * x.abs())
            .collect();
        let c = tape.constant(Tensor::vector(offsets))?;
        let bl = tape.scale(lambda, self.beta)?;
        let z = tape.add(c, bl)?;
        tape.sigmoid(z)
    }
}

pub fn order_for_half_width(side: WindowSide, m: usize) -> EffectiveOrder {
    match side {
        WindowSide::Symmetric => EffectiveOrder(2 * m + 1),
        WindowSide::OneSided => EffectiveOrder(m + 1),
    }
}

/// Smallest half-width whose effective order is at least `k`.
pub fn half_width_for_order(side: WindowSide, k: usize) -> usize {
    match side {
        WindowSide::Symmetric => k.saturating_sub(1).div_ceil(2),
        WindowSide::OneSided => k.saturating_sub(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_center_value() {
        let p = WindowParams::new(3.0, WindowSide::Symmetric);
        let w = p.values();
        assert_eq!(w.len(), 7);
        let expected = 1.0 / (1.0 + (-6.0f64).exp());
        assert!((w[3] - expected).abs() < 1e-15);
        assert!((w[3] - 0.997527).abs() < 1e-6);
    }

    #[test]
    fn one_sided_zero() {
        let p = WindowParams::new(0.0, WindowSide::OneSided);
        assert_eq!(p.values(), vec![0.5]);
    }

    #[test]
    fn symmetric_is_symmetric() {
        let p = WindowParams::new(2.0, WindowSide::Symmetric);
        let xs = WindowParams::positions(p.side, 5);
        assert_eq!(xs, vec![-4.0, -2.0, 0.0, 2.0, 4.0]);
        let w = p.values();
        assert_eq!(w[0], w[4]);
        assert_eq!(w[1], w[3]);
    }

    #[test]
    fn effective_orders() {
        let s = |l| WindowParams::new(l, WindowSide::Symmetric).effective_order().0;
        let o = |l| WindowParams::new(l, WindowSide::OneSided).effective_order().0;
        assert_eq!(s(2.0), 5);
        assert_eq!(s(2.3), 7);
        assert_eq!(o(4.0), 5);
        assert_eq!(s(0.0), 1);
        for k in 1..20 {
            let m = half_width_for_order(WindowSide::OneSided, k);
            assert_eq!(order_for_half_width(WindowSide::OneSided, m).0, k);
            let m = half_width_for_order(WindowSide::Symmetric, 2 * k + 1);
            assert_eq!(order_for_half_width(WindowSide::Symmetric, m).0, 2 * k + 1);
        }
    }

    #[test]
    fn mass_at_zero_and_ordering() {
        let p = WindowParams::new(0.0, WindowSide::Symmetric);
        assert_eq!(p.mass(), 0.5);
        let m = |l| WindowParams::new(l, WindowSide::Symmetric).mass();
        assert!(m(5.0) > m(3.0) && m(3.0) > m(1.0));
    }

    #[test]
    fn mass_increase_matches_naive_difference_and_survives_saturation() {
        let a = WindowParams::new(2.5, WindowSide::Symmetric);
        let b = WindowParams::new(3.0, WindowSide::Symmetric);
        assert!((a.mass_increase_to(&b) - (b.mass() - a.mass())).abs() < 1e-12);
        let p = |l| WindowParams::new(l, WindowSide::OneSided).with_shape(4.0, 0.5);
        assert_eq!(p(19.5).mass(), p(20.0).mass());
        assert!(p(19.5).mass_increase_to(&p(20.0)) > 0.0);
    }

    #[test]
    fn mass_gradient_positive_and_matches_fd() {
        for side in [WindowSide::Symmetric, WindowSide::OneSided] {
            for l in 1..=10 {
                let p = WindowParams::new(l as f64, side);
                let g = p.mass_gradient();
                assert!(g > 0.0);
                // K fixed: evaluate on the same grid length.
                let k = p.effective_order().0;
                let h = 1e-6;
                let f = |lam: f64| {
                    let q = WindowParams { lambda_bar: lam, ..p };
                    q.values_for(k).iter().sum::<f64>()
                };
                let fd = (f(l as f64 + h) - f(l as f64 - h)) / (2.0 * h);
                assert!(((fd - g) / g).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn half_value_at_shoulder() {
        for l in [0.5, 1.0, 2.7, 6.0] {
            let p = WindowParams::new(l, WindowSide::Symmetric);
            assert_eq!(p.value_at(l).0, 0.5);
            assert_eq!(p.value_at(-l).0, 0.5);
        }
    }

    #[test]
    fn recorded_window_matches_direct() {
        let p = WindowParams::new(2.4, WindowSide::Symmetric).with_shape(4.0, 0.5);
        let mut t = Tape::new();
        let lam = t.param(Tensor::scalar(p.lambda_bar)).unwrap();
        let w = p.record(&mut t, lam, 7).unwrap();
        let direct = p.values_for(7);
        for (a, b) in t.value(w).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap().get(lam).unwrap()[0];
        let analytic: f64 = WindowParams::positions(p.side, 7).iter().map(|&x| p.value_at(x).1).sum();
        assert!((g - analytic).abs() < 1e-12);
    }
}
