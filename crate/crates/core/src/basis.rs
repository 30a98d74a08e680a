//! Generating functions of the univariate basis on `[-1, 1]`.
//!
//! Indices are zero-based throughout: Chebyshev index `j` is `T_j`, piecewise
//! index `j` is `g(x - t_j)` for knot `t_j`, and the real Fourier basis is
//! ordered `const, cos(pi x), sin(pi x), cos(2 pi x), sin(2 pi x), ...`, all
//! scaled by `1/sqrt(2)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{unary_eval, Tensor, Unary};
use crate::error::{Error, Result};

/// Activation used to generate a piecewise basis by shifting it to each knot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Prelu,
    Silu,
    Gelu,
    Relu6,
}

/// Negative-side slope of the fixed leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

impl Activation {
    /// Value, derivative in `t`, and derivative in the PReLU slope.
    pub fn eval(self, t: f64, slope: f64) -> (f64, f64, f64) {
        match self {
            Activation::Relu => {
                let (v, d) = unary_eval(Unary::Relu, t);
                (v, d, 0.0)
            }
            Activation::LeakyRelu => {
                let (v, d) = unary_eval(Unary::LeakyRelu(LEAKY_SLOPE), t);
                (v, d, 0.0)
            }
            Activation::Prelu => {
                if t > 0.0 {
                    (t, 1.0, 0.0)
                } else {
                    (slope * t, slope, t)
                }
            }
            Activation::Silu => {
                let (v, d) = unary_eval(Unary::Silu, t);
                (v, d, 0.0)
            }
            Activation::Gelu => {
                let (v, d) = unary_eval(Unary::Gelu, t);
                (v, d, 0.0)
            }
            Activation::Relu6 => {
                let (v, d) = unary_eval(Unary::Relu6, t);
                (v, d, 0.0)
            }
        }
    }

    pub fn as_unary(self, slope: f64) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::LeakyRelu => Unary::LeakyRelu(LEAKY_SLOPE),
            Activation::Prelu => Unary::LeakyRelu(slope),
            Activation::Silu => Unary::Silu,
            Activation::Gelu => Unary::Gelu,
            Activation::Relu6 => Unary::Relu6,
        }
    }
}

/// One of the supported basis families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Piecewise(Activation),
    Chebyshev,
    Fourier,
}

impl BasisFamily {
    /// Whether a change in basis count needs coefficient interpolation.
    /// Chebyshev and Fourier coefficients are shared across counts.
    pub fn requires_interp(self) -> bool {
        matches!(self, BasisFamily::Piecewise(_))
    }

    pub const DOMAIN: (f64, f64) = (-1.0, 1.0);

    pub fn has_slope(self) -> bool {
        matches!(self, BasisFamily::Piecewise(Activation::Prelu))
    }

    /// Evaluates all `grid.n` basis functions at `x`, writing values,
    /// x-derivatives and slope-derivatives into the output slices.
    pub fn eval_row(
        self,
        grid: &BasisGrid,
        x: f64,
        slope: f64,
        vals: &mut [f64],
        dx: &mut [f64],
        dslope: &mut [f64],
    ) {
        let n = grid.n;
        match self {
            BasisFamily::Piecewise(act) => {
                for j in 0..n {
                    let (v, d, s) = act.eval(x - grid.knots[j], slope);
                    vals[j] = v;
                    dx[j] = d;
                    dslope[j] = s;
                }
            }
            BasisFamily::Chebyshev => {
                vals[0] = 1.0;
                dx[0] = 0.0;
                if n > 1 {
                    vals[1] = x;
                    dx[1] = 1.0;
                }
                for j in 2..n {
                    vals[j] = 2.0 * x * vals[j - 1] - vals[j - 2];
                    dx[j] = 2.0 * vals[j - 1] + 2.0 * x * dx[j - 1] - dx[j - 2];
                }
                dslope[..n].iter_mut().for_each(|v| *v = 0.0);
            }
            BasisFamily::Fourier => {
                for j in 0..n {
                    let (v, d) = fourier(j, x);
                    vals[j] = v;
                    dx[j] = d;
                    dslope[j] = 0.0;
                }
            }
        }
    }

    /// Value and x-derivative of basis function `j`.
    pub fn eval_one(self, grid: &BasisGrid, j: usize, x: f64, slope: f64) -> Result<(f64, f64)> {
        if j >= grid.n {
            return Err(Error::Index(format!("basis index {j} out of range for n = {}", grid.n)));
        }
        Ok(match self {
            BasisFamily::Piecewise(act) => {
                let (v, d, _) = act.eval(x - grid.knots[j], slope);
                (v, d)
            }
            BasisFamily::Chebyshev => {
                let (mut t0, mut t1) = (1.0, x);
                let (mut d0, mut d1) = (0.0, 1.0);
                if j == 0 {
                    return Ok((1.0, 0.0));
                }
                for _ in 1..j {
                    let t2 = 2.0 * x * t1 - t0;
                    let d2 = 2.0 * t1 + 2.0 * x * d1 - d0;
                    t0 = t1;
                    t1 = t2;
                    d0 = d1;
                    d1 = d2;
                }
                (t1, d1)
            }
            BasisFamily::Fourier => fourier(j, x),
        })
    }
}

fn fourier(j: usize, x: f64) -> (f64, f64) {
    if j == 0 {
        return (FRAC_1_SQRT_2, 0.0);
    }
    let w = PI * j.div_ceil(2) as f64;
    if j % 2 == 1 {
        (FRAC_1_SQRT_2 * (w * x).cos(), -FRAC_1_SQRT_2 * w * (w * x).sin())
    } else {
        (FRAC_1_SQRT_2 * (w * x).sin(), FRAC_1_SQRT_2 * w * (w * x).cos())
    }
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BasisFamily::Piecewise(Activation::Relu) => "relu",
            BasisFamily::Piecewise(Activation::LeakyRelu) => "leaky_relu",
            BasisFamily::Piecewise(Activation::Prelu) => "prelu",
            BasisFamily::Piecewise(Activation::Silu) => "silu",
            BasisFamily::Piecewise(Activation::Gelu) => "gelu",
            BasisFamily::Piecewise(Activation::Relu6) => "relu6",
            BasisFamily::Chebyshev => "chebyshev",
            BasisFamily::Fourier => "fourier",
        };
        f.write_str(s)
    }
}

impl FromStr for BasisFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "relu" => BasisFamily::Piecewise(Activation::Relu),
            "leaky_relu" | "leakyrelu" => BasisFamily::Piecewise(Activation::LeakyRelu),
            "prelu" => BasisFamily::Piecewise(Activation::Prelu),
            "silu" => BasisFamily::Piecewise(Activation::Silu),
            "gelu" => BasisFamily::Piecewise(Activation::Gelu),
            "relu6" => BasisFamily::Piecewise(Activation::Relu6),
            "chebyshev" | "cheb" => BasisFamily::Chebyshev,
            "fourier" => BasisFamily::Fourier,
            other => {
                return Err(format!(
                    "unknown basis `{other}` (expected relu, leaky_relu, prelu, silu, gelu, relu6, chebyshev, fourier)"
                ))
            }
        })
    }
}

/// Basis count and, for piecewise families, the uniform knots on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisGrid {
    pub n: usize,
    pub knots: Vec<f64>,
}

impl BasisGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Index("basis count must be at least 1".into()));
        }
        let knots = if n == 1 {
            vec![-1.0]
        } else {
            let h = 2.0 / (n - 1) as f64;
            (0..n).map(|k| if k == n - 1 { 1.0 } else { -1.0 + h * k as f64 }).collect()
        };
        Ok(Self { n, knots })
    }
}

/// Elementwise `phi_j(x)` over a tensor of points.
pub fn eval_basis(family: BasisFamily, grid: &BasisGrid, j: usize, x: &Tensor) -> Result<Tensor> {
    eval_basis_with_slope(family, grid, j, x, PRELU_INIT)
}

pub fn eval_basis_with_slope(
    family: BasisFamily,
    grid: &BasisGrid,
    j: usize,
    x: &Tensor,
    slope: f64,
) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .map(|&v| family.eval_one(grid, j, v, slope).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(x.shape().to_vec(), data)
}

/// Matrix with entry `(i, j) = phi_j(points[i])`.
pub fn design_matrix(family: BasisFamily, grid: &BasisGrid, points: &[f64], slope: f64) -> DMatrix<f64> {
    let n = grid.n;
    let mut m = DMatrix::zeros(points.len(), n);
    let mut vals = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut ds = vec![0.0; n];
    for (i, &x) in points.iter().enumerate() {
        family.eval_row(grid, x, slope, &mut vals, &mut dx, &mut ds);
        for j in 0..n {
            m[(i, j)] = vals[j];
        }
    }
    m
}

/// Gram matrix of the first `n` basis functions under the family's weight:
/// Gauss-Chebyshev quadrature (weight `1/sqrt(1 - x^2)`) for Chebyshev and
/// the trapezoid rule (unit weight) for Fourier.
pub fn gram_matrix(family: BasisFamily, n: usize, quadrature_points: usize) -> Result<DMatrix<f64>> {
    let grid = BasisGrid::new(n)?;
    let (nodes, weights): (Vec<f64>, Vec<f64>) = match family {
        BasisFamily::Chebyshev => {
            let q = quadrature_points;
            (1..=q)
                .map(|i| ((2 * i - 1) as f64 * PI / (2 * q) as f64).cos())
                .map(|x| (x, PI / q as f64))
                .unzip()
        }
        BasisFamily::Fourier => {
            let q = quadrature_points.max(2);
            let h = 2.0 / (q - 1) as f64;
            (0..q)
                .map(|i| {
                    let w = if i == 0 || i == q - 1 { 0.5 * h } else { h };
                    (-1.0 + h * i as f64, w)
                })
                .unzip()
        }
        BasisFamily::Piecewise(_) => {
            return Err(Error::Unsupported(
                "piecewise activation bases carry no orthogonality property".into(),
            ))
        }
    };
    let phi = design_matrix(family, &grid, &nodes, 0.0);
    let mut g = DMatrix::zeros(n, n);
    for (r, w) in weights.iter().enumerate() {
        for a in 0..n {
            for b in 0..n {
                g[(a, b)] += w * phi[(r, a)] * phi[(r, b)];
            }
        }
    }
    Ok(g)
}

/// Largest off-diagonal magnitude of [`gram_matrix`].
pub fn check_orthogonality(family: BasisFamily, n: usize, quadrature_points: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Index("orthogonality needs at least two basis functions".into()));
    }
    let g = gram_matrix(family, n, quadrature_points)?;
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                worst = worst.max(g[(a, b)].abs());
            }
        }
    }
    Ok(worst)
}
