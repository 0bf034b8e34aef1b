//! Least-squares Monte Carlo regression: empirical conditional expectations
//! by polynomial regression on the Markov state `W_{t_i}`.
//!
//! Basis: total-degree multivariate monomials in the standardized features
//! (per-column mean/spread over the sample). Standardization changes nothing
//! in the fitted span and keeps the normal matrix well scaled. The ridge
//! penalty is applied to every column except the constant, so fitted values
//! preserve the empirical target mean exactly; backward cost recursions rely
//! on that.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Ridge policy for the normal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `1e-10 * trace(normal matrix) / basis size` — conditioning floor
    /// without visible bias.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct RegressionConfig {
    /// Total polynomial degree of the basis.
    pub degree: usize,
    pub ridge: Ridge,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            degree: 3,
            ridge: Ridge::Auto,
        }
    }
}

impl RegressionConfig {
    pub fn with_degree(degree: usize) -> Self {
        RegressionConfig {
            degree,
            ..Default::default()
        }
    }
}

/// `C(d + D, D)` monomials of total degree <= D in d variables.
pub fn basis_size(d: usize, degree: usize) -> usize {
    // binomial(d + degree, degree)
    let mut num = 1usize;
    let mut den = 1usize;
    for i in 1..=degree {
        num *= d + i;
        den *= i;
    }
    num / den
}

fn multi_indices(d: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; d]];
    for total in 1..=degree as u32 {
        let mut idx = vec![0u32; d];
        fn rec(idx: &mut Vec<u32>, pos: usize, rem: u32, out: &mut Vec<Vec<u32>>) {
            if pos + 1 == idx.len() {
                idx[pos] = rem;
                out.push(idx.clone());
                return;
            }
            for e in (0..=rem).rev() {
                idx[pos] = e;
                rec(idx, pos + 1, rem - e, out);
            }
        }
        rec(&mut idx, 0, total, &mut out);
    }
    out
}

/// Standardized monomial basis frozen on one feature sample.
#[derive(Debug, Clone)]
pub struct PolynomialBasis {
    pub dim: usize,
    pub degree: usize,
    powers: Vec<Vec<u32>>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl PolynomialBasis {
    fn from_sample(features: ArrayView2<'_, f64>, degree: usize) -> Self {
        let (m, d) = features.dim();
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col = features.column(j);
            let mean = col.sum() / m as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            shift[j] = mean;
            scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        PolynomialBasis {
            dim: d,
            degree,
            powers: multi_indices(d, degree),
            shift,
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }

    pub fn eval_into(&self, w: &[f64], out: &mut [f64]) {
        debug_assert_eq!(w.len(), self.dim);
        debug_assert_eq!(out.len(), self.powers.len());
        for (o, p) in out.iter_mut().zip(&self.powers) {
            let mut acc = 1.0;
            for (j, &e) in p.iter().enumerate() {
                if e > 0 {
                    let x = (w[j] - self.shift[j]) / self.scale[j];
                    acc *= x.powi(e as i32);
                }
            }
            *o = acc;
        }
    }
}

/// A fitted polynomial map `R^d -> R^q`, reusable away from the sample.
#[derive(Debug, Clone)]
pub struct PolyFit {
    pub basis: PolynomialBasis,
    /// coefficient matrix, shape (B, q)
    pub coeffs: Array2<f64>,
}

impl PolyFit {
    pub fn predict_into(&self, w: &[f64], row: &mut [f64], out: &mut [f64]) {
        self.basis.eval_into(w, row);
        let (b, q) = self.coeffs.dim();
        for c in out.iter_mut() {
            *c = 0.0;
        }
        for j in 0..b {
            let phi = row[j];
            if phi != 0.0 {
                for t in 0..q {
                    out[t] += phi * self.coeffs[(j, t)];
                }
            }
        }
    }

    pub fn predict(&self, w: &[f64]) -> Vec<f64> {
        let mut row = vec![0.0; self.basis.len()];
        let mut out = vec![0.0; self.coeffs.ncols()];
        self.predict_into(w, &mut row, &mut out);
        out
    }
}

/// Design matrix, normal equations and Cholesky factor for one feature
/// sample; fits any number of target columns against it.
pub struct Regressor {
    basis: PolynomialBasis,
    design: Array2<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    /// columns carried in the solve (zero-spread columns are dropped and
    /// their coefficients forced to 0)
    active: Vec<usize>,
}

impl Regressor {
    pub fn new(features: ArrayView2<'_, f64>, config: &RegressionConfig) -> Result<Self> {
        let (m, _d) = features.dim();
        let basis = PolynomialBasis::from_sample(features, config.degree);
        let b = basis.len();
        if b > m / 10 {
            return Err(Error::config(format!(
                "basis size {b} exceeds paths/10 = {} (degree {} too high for {m} paths)",
                m / 10,
                config.degree
            )));
        }

        let mut design = Array2::zeros((m, b));
        let mut row = vec![0.0; b];
        let mut feat = vec![0.0; basis.dim];
        for i in 0..m {
            for (j, f) in feat.iter_mut().enumerate() {
                *f = features[(i, j)];
            }
            basis.eval_into(&feat, &mut row);
            for j in 0..b {
                design[(i, j)] = row[j];
            }
        }

        // drop identically-zero columns (e.g. all features equal at t_0)
        let active: Vec<usize> = (0..b)
            .filter(|&j| design.column(j).iter().any(|x| *x != 0.0))
            .collect();
        let ba = active.len();

        let mut gram = DMatrix::<f64>::zeros(ba, ba);
        for (r, &jr) in active.iter().enumerate() {
            for (c, &jc) in active.iter().enumerate().skip(r) {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += design[(i, jr)] * design[(i, jc)];
                }
                gram[(r, c)] = acc;
                gram[(c, r)] = acc;
            }
        }

        let lambda = match config.ridge {
            Ridge::Fixed(l) => {
                if l < 0.0 {
                    return Err(Error::config(format!("ridge must be nonnegative, got {l}")));
                }
                l
            }
            Ridge::Auto => 1e-10 * gram.trace() / b as f64,
        };
        // constant column stays unpenalized
        for (r, &jr) in active.iter().enumerate() {
            if jr != 0 {
                gram[(r, r)] += lambda;
            }
        }

        let cond = {
            let mut lo = f64::INFINITY;
            let mut hi = 0.0_f64;
            for r in 0..ba {
                lo = lo.min(gram[(r, r)]);
                hi = hi.max(gram[(r, r)]);
            }
            if lo > 0.0 {
                hi / lo
            } else {
                f64::INFINITY
            }
        };
        let max_diag = (0..ba).map(|r| gram[(r, r)]).fold(0.0, f64::max);
        let chol = Cholesky::new(gram).ok_or(Error::Numerical {
            context: "regression normal equations".into(),
            cond,
        })?;
        // nalgebra tolerates a numerically-zero pivot; a singular Gram shows
        // up with pivot^2 at the eps * max_diag rounding scale
        let pivot_floor = (4.0 * f64::EPSILON * max_diag).sqrt();
        for r in 0..ba {
            let piv = chol.l_dirty()[(r, r)];
            if !(piv > pivot_floor) || !piv.is_finite() {
                return Err(Error::Numerical {
                    context: "regression normal equations (vanishing pivot)".into(),
                    cond,
                });
            }
        }

        Ok(Regressor {
            basis,
            design,
            chol,
            active,
        })
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    /// Solve for `targets` (M x q); returns the coefficient matrix (B x q).
    pub fn solve(&self, targets: ArrayView2<'_, f64>) -> PolyFit {
        let (m, q) = targets.dim();
        let b = self.basis.len();
        let ba = self.active.len();
        let mut rhs = DMatrix::<f64>::zeros(ba, q);
        for (r, &jr) in self.active.iter().enumerate() {
            for t in 0..q {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += self.design[(i, jr)] * targets[(i, t)];
                }
                rhs[(r, t)] = acc;
            }
        }
        self.chol.solve_mut(&mut rhs);
        let mut coeffs = Array2::zeros((b, q));
        for (r, &jr) in self.active.iter().enumerate() {
            for t in 0..q {
                coeffs[(jr, t)] = rhs[(r, t)];
            }
        }
        PolyFit {
            basis: self.basis.clone(),
            coeffs,
        }
    }

    /// Fitted values at the sample's own feature points (M x q).
    pub fn fitted(&self, fit: &PolyFit, q: usize) -> Array2<f64> {
        let m = self.design.nrows();
        let b = self.basis.len();
        let mut out = Array2::zeros((m, q));
        for i in 0..m {
            for j in 0..b {
                let phi = self.design[(i, j)];
                if phi != 0.0 {
                    for t in 0..q {
                        out[(i, t)] += phi * fit.coeffs[(j, t)];
                    }
                }
            }
        }
        out
    }
}

/// One-shot form: fit `targets` on `basis(features)` and return the fitted
/// values at each sample point.
pub fn regress(
    features: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    config: &RegressionConfig,
) -> Result<Array2<f64>> {
    let reg = Regressor::new(features, config)?;
    let fit = reg.solve(targets);
    Ok(reg.fitted(&fit, targets.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_features(m: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((m, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn basis_size_matches_enumeration() {
        for d in 1..=3 {
            for deg in 0..=4 {
                assert_eq!(basis_size(d, deg), multi_indices(d, deg).len());
            }
        }
        assert_eq!(basis_size(1, 3), 4);
        assert_eq!(basis_size(2, 3), 10);
    }

    #[test]
    fn constants_reproduced_exactly() {
        let feats = gaussian_features(500, 1, 1);
        let targets = Array2::from_elem((500, 1), 3.25);
        for deg in 0..=3 {
            let cfg = RegressionConfig::with_degree(deg);
            let fitted = regress(feats.view(), targets.view(), &cfg).unwrap();
            for v in fitted.iter() {
                assert!((v - 3.25).abs() <= 1e-12, "degree {deg}: {v}");
            }
        }
    }

    #[test]
    fn linear_functions_reproduced() {
        let feats = gaussian_features(1000, 1, 2);
        let targets = feats.clone();
        let cfg = RegressionConfig {
            degree: 1,
            ridge: Ridge::Fixed(0.0),
        };
        let fitted = regress(feats.view(), targets.view(), &cfg).unwrap();
        for (f, t) in fitted.iter().zip(targets.iter()) {
            assert!((f - t).abs() <= 1e-10);
        }
        let cfg = RegressionConfig {
            degree: 3,
            ridge: Ridge::Fixed(0.0),
        };
        let fitted = regress(feats.view(), targets.view(), &cfg).unwrap();
        for (f, t) in fitted.iter().zip(targets.iter()) {
            assert!((f - t).abs() <= 1e-10);
        }
    }

    #[test]
    fn quadratic_with_noise_recovered() {
        let m = 20_000;
        let feats = gaussian_features(m, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let targets = Array2::from_shape_fn((m, 1), |(i, _)| {
            let x = feats[(i, 0)];
            let eps: f64 = StandardNormal.sample(&mut rng);
            x * x + eps
        });
        let cfg = RegressionConfig::with_degree(2);
        let fitted = regress(feats.view(), targets.view(), &cfg).unwrap();
        let rms = (0..m)
            .map(|i| {
                let x = feats[(i, 0)];
                (fitted[(i, 0)] - x * x).powi(2)
            })
            .sum::<f64>()
            / m as f64;
        assert!(rms.sqrt() <= 0.05, "rms {}", rms.sqrt());
    }

    #[test]
    fn degenerate_features_fall_back_to_mean() {
        // every feature identical (the t_0 situation): fitted = plain mean
        let feats = Array2::zeros((100, 1));
        let targets = Array2::from_shape_fn((100, 1), |(i, _)| i as f64);
        let fitted = regress(feats.view(), targets.view(), &RegressionConfig::default()).unwrap();
        for v in fitted.iter() {
            assert!((v - 49.5).abs() <= 1e-10);
        }
    }

    #[test]
    fn singular_normal_equations_reported() {
        // features in {-1, +1}: the squared column duplicates the intercept,
        // so the unridged Gram is exactly singular
        let feats = Array2::from_shape_fn((200, 1), |(i, _)| if i % 2 == 0 { -1.0 } else { 1.0 });
        let targets = Array2::zeros((200, 1));
        let cfg = RegressionConfig {
            degree: 2,
            ridge: Ridge::Fixed(0.0),
        };
        match regress(feats.view(), targets.view(), &cfg) {
            Err(crate::error::Error::Numerical { cond, .. }) => assert!(cond >= 1.0),
            other => panic!("expected numerical error, got {:?}", other.map(|_| ())),
        }
        // the auto ridge restores solvability
        let cfg = RegressionConfig::with_degree(2);
        assert!(regress(feats.view(), targets.view(), &cfg).is_ok());
    }

    #[test]
    fn basis_wellposedness_enforced() {
        let feats = gaussian_features(30, 1, 4);
        let targets = Array2::zeros((30, 1));
        let cfg = RegressionConfig::with_degree(3); // basis 4 > 30/10
        assert!(regress(feats.view(), targets.view(), &cfg).is_err());
    }

    #[test]
    fn fitted_means_preserve_target_means() {
        // unpenalized intercept: empirical mean of fitted == mean of targets
        let feats = gaussian_features(2000, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let targets = Array2::from_shape_fn((2000, 1), |(i, _)| {
            let x: f64 = feats[(i, 0)];
            let noise: f64 = StandardNormal.sample(&mut rng);
            x.sin() + 0.3 * noise
        });
        let fitted = regress(feats.view(), targets.view(), &RegressionConfig::default()).unwrap();
        let tm = targets.column(0).sum() / 2000.0;
        let fm = fitted.column(0).sum() / 2000.0;
        assert!((tm - fm).abs() <= 1e-12, "{tm} vs {fm}");
    }
}
