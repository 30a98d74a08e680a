//! Coefficient remapping when the basis count changes.
//!
//! Three schemes: a collocation least-squares solve through the
//! pseudo-inverse of the new design matrix, linear interpolation of the
//! coefficient sequence (piecewise families only), and a lazy copy that
//! truncates or pads.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisFamily, BasisGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpScheme {
    Pinv,
    Linear,
    Lazy,
}

impl fmt::Display for InterpScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterpScheme::Pinv => "pinv",
            InterpScheme::Linear => "linear",
            InterpScheme::Lazy => "lazy",
        })
    }
}

impl FromStr for InterpScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pinv" => Ok(InterpScheme::Pinv),
            "linear" => Ok(InterpScheme::Linear),
            "lazy" => Ok(InterpScheme::Lazy),
            o => Err(format!("unknown interpolation scheme `{o}` (expected pinv, linear, lazy)")),
        }
    }
}

/// Relative singular-value cutoff of the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;

/// Evaluation points used by the collocation solve when remapping
/// `old_k -> new_k` coefficients.
///
/// Piecewise families use the new knots. Chebyshev uses the Gauss points of
/// order `max(old_k, new_k)`; Fourier uses `2 max(old_k, new_k) + 1`
/// equispaced points on the period. Both choices make the discrete inner
/// products exact, so the solve reduces to zero-padding or truncation.
pub fn collocation_points(family: BasisFamily, old_k: usize, new_k: usize) -> Vec<f64> {
    match family {
        BasisFamily::Piecewise(_) => BasisGrid::new(new_k).map(|g| g.knots).unwrap_or_default(),
        BasisFamily::Chebyshev => {
            let q = old_k.max(new_k);
            (1..=q)
                .map(|i| ((2 * i - 1) as f64 * std::f64::consts::PI / (2 * q) as f64).cos())
                .collect()
        }
        BasisFamily::Fourier => {
            let q = 2 * old_k.max(new_k) + 1;
            (0..q).map(|i| -1.0 + 2.0 * i as f64 / q as f64).collect()
        }
    }
}

/// Moore-Penrose pseudo-inverse via SVD with cutoff `rtol * sigma_max`.
pub fn pseudo_inverse(m: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pseudo-inverse of a non-finite matrix".into()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = rtol * smax;
    svd.pseudo_inverse(eps.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numeric(format!("pseudo-inverse failed: {e}")))
}

/// Linear map taking `old_k` coefficients to `new_k` via collocation,
/// `(Phi_new)^+ Phi_old`.
pub fn pinv_matrix(family: BasisFamily, old_k: usize, new_k: usize, slope: f64) -> Result<DMatrix<f64>> {
    let g_old = BasisGrid::new(old_k)?;
    let g_new = BasisGrid::new(new_k)?;
    let pts = collocation_points(family, old_k, new_k);
    let phi_new = design_matrix(family, &g_new, &pts, slope);
    let phi_old = design_matrix(family, &g_old, &pts, slope);
    Ok(pseudo_inverse(&phi_new, PINV_RTOL)? * phi_old)
}

pub fn pinv_remap(family: BasisFamily, old: &[f64], new_k: usize, slope: f64) -> Result<Vec<f64>> {
    let m = pinv_matrix(family, old.len(), new_k, slope)?;
    let out = m * DVector::from_column_slice(old);
    Ok(out.iter().copied().collect())
}

/// Linear map of the linear-interpolation scheme. Endpoints are copied;
/// interior index `k` of `n'` blends old entries `j` and `j + 1` with
/// `j = floor(k n / n')`, clipped to the last interior interval.
pub fn linear_matrix(old_k: usize, new_k: usize) -> DMatrix<f64> {
    let (n, np) = (old_k, new_k);
    let mut m = DMatrix::zeros(np, n);
    if n == 1 {
        m.column_mut(0).fill(1.0);
        return m;
    }
    if np == 1 {
        m[(0, 0)] = 1.0;
        return m;
    }
    m[(0, 0)] = 1.0;
    m[(np - 1, n - 1)] = 1.0;
    for k in 1..np - 1 {
        // position of new index k on the old index axis [0, n - 1]
        let pos = k as f64 * (n - 1) as f64 / (np - 1) as f64;
        let j = (pos.floor() as usize).min(n - 2);
        let frac = pos - j as f64;
        m[(k, j)] += 1.0 - frac;
        m[(k, j + 1)] += frac;
    }
    m
}

pub fn linear_remap(family: BasisFamily, old: &[f64], new_k: usize) -> Result<Vec<f64>> {
    if !family.requires_interp() {
        return Err(Error::Unsupported(format!(
            "linear interpolation is only defined for piecewise bases, not {family}"
        )));
    }
    let m = linear_matrix(old.len(), new_k);
    Ok((m * DVector::from_column_slice(old)).iter().copied().collect())
}

/// Truncates, or copies and fills the new tail with `N(0, prior_sigma^2)` draws.
pub fn lazy_remap<R: Rng + ?Sized>(old: &[f64], new_k: usize, prior_sigma: f64, rng: &mut R) -> Vec<f64> {
    if new_k <= old.len() {
        return old[..new_k].to_vec();
    }
    let mut out = old.to_vec();
    if prior_sigma > 0.0 {
        let normal = Normal::new(0.0, prior_sigma).expect("positive sigma");
        out.extend((old.len()..new_k).map(|_| normal.sample(rng)));
    } else {
        out.resize(new_k, 0.0);
    }
    out
}

/// Linear part of a remap (`new = M old`) for schemes that have one.
pub fn remap_matrix(
    scheme: InterpScheme,
    family: BasisFamily,
    old_k: usize,
    new_k: usize,
    slope: f64,
) -> Result<DMatrix<f64>> {
    match scheme {
        InterpScheme::Pinv => pinv_matrix(family, old_k, new_k, slope),
        InterpScheme::Linear => {
            if !family.requires_interp() {
                return Err(Error::Unsupported(format!(
                    "linear interpolation is only defined for piecewise bases, not {family}"
                )));
            }
            Ok(linear_matrix(old_k, new_k))
        }
        InterpScheme::Lazy => {
            let mut m = DMatrix::zeros(new_k, old_k);
            for i in 0..old_k.min(new_k) {
                m[(i, i)] = 1.0;
            }
            Ok(m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const RELU: BasisFamily = BasisFamily::Piecewise(Activation::Relu);

    fn function_at(family: BasisFamily, coeffs: &[f64], x: f64) -> f64 {
        let g = BasisGrid::new(coeffs.len()).unwrap();
        (0..coeffs.len())
            .map(|j| coeffs[j] * family.eval_one(&g, j, x, 0.25).unwrap().0)
            .sum()
    }

    #[test]
    fn pinv_identity_on_same_grid() {
        for fam in [RELU, BasisFamily::Chebyshev, BasisFamily::Fourier] {
            let old = vec![0.3, -1.2, 0.8, 2.0, -0.4];
            let new = pinv_remap(fam, &old, 5, 0.25).unwrap();
            // the last ReLU knot contributes nothing on [-1, 1]; compare functions there
            for x in collocation_points(fam, 5, 5) {
                let (a, b) = (function_at(fam, &old, x), function_at(fam, &new, x));
                assert!((a - b).abs() < 1e-12, "{fam}");
            }
            if fam != RELU {
                for (a, b) in old.iter().zip(&new) {
                    assert!((a - b).abs() < 1e-12, "{fam}");
                }
            }
        }
    }

    #[test]
    fn pinv_relu_grow_preserves_values_at_new_knots() {
        let old = vec![0.7, -1.1, 0.4];
        let new = pinv_remap(RELU, &old, 5, 0.0).unwrap();
        for &x in &BasisGrid::new(5).unwrap().knots {
            let a = function_at(RELU, &old, x);
            let b = function_at(RELU, &new, x);
            assert!((a - b).abs() < 1e-8, "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn pinv_chebyshev_pads_and_truncates() {
        let old = vec![0.5, -0.25, 1.5, 0.125];
        let grown = pinv_remap(BasisFamily::Chebyshev, &old, 6, 0.0).unwrap();
        let padded = [0.5, -0.25, 1.5, 0.125, 0.0, 0.0];
        for (a, b) in grown.iter().zip(padded) {
            assert!((a - b).abs() < 1e-10);
        }
        let shrunk = pinv_remap(BasisFamily::Chebyshev, &old, 2, 0.0).unwrap();
        assert!((shrunk[0] - 0.5).abs() < 1e-10 && (shrunk[1] + 0.25).abs() < 1e-10);
    }

    #[test]
    fn pinv_fourier_pads_and_truncates() {
        let old = vec![0.5, -0.25, 1.5, 0.125, 0.9];
        let grown = pinv_remap(BasisFamily::Fourier, &old, 8, 0.0).unwrap();
        for (j, g) in grown.iter().enumerate() {
            let want = old.get(j).copied().unwrap_or(0.0);
            assert!((g - want).abs() < 1e-10);
        }
        let shrunk = pinv_remap(BasisFamily::Fourier, &old, 3, 0.0).unwrap();
        for j in 0..3 {
            assert!((shrunk[j] - old[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_examples() {
        assert_eq!(linear_remap(RELU, &[0.0, 1.0, 2.0], 5).unwrap(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let same = linear_remap(RELU, &[3.0, -1.0, 4.0, 1.5], 4).unwrap();
        assert_eq!(same, vec![3.0, -1.0, 4.0, 1.5]);
        for np in 1..12 {
            let out = linear_remap(RELU, &[2.5; 6], np).unwrap();
            assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-15));
        }
        assert!(matches!(
            linear_remap(BasisFamily::Chebyshev, &[1.0], 2),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn lazy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(lazy_remap(&[1.0, 2.0, 3.0, 4.0], 2, 1.0, &mut rng), vec![1.0, 2.0]);
        assert_eq!(lazy_remap(&[1.0, 2.0], 4, 0.0, &mut rng), vec![1.0, 2.0, 0.0, 0.0]);
        let a = lazy_remap(&[1.0, 2.0], 4, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = lazy_remap(&[1.0, 2.0], 4, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(&a[..2], &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(pseudo_inverse(&m, PINV_RTOL), Err(Error::Numeric(_))));
    }
}
