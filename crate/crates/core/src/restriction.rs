//! Cost-restriction transform: absorb the running cost into one extra state
//! component so the problem has purely terminal cost.
//!
//! The auxiliary scalar BSDE `dx = h(t, y, z, v) dt + k dW`, `x_T = eta`, is
//! stacked under the base system, giving the (n+1)-dimensional system with
//! drift `(b, h)`, terminal data `(xi, eta)` and terminal cost
//! `g~(y, x) = g(y) - x`. The restricted cost `J~(v) = E[g~(y_0, x_0)] + E[eta]`
//! equals `J(v)`; the augmented system is a plain problem spec solved by the
//! unmodified solver, with no running cost of its own.

use std::sync::Arc;

use serde::Serialize;

use crate::adjoint::AdjointPath;
use crate::error::{Error, Result};
use crate::model::{ControlLaw, Dimensions, ProblemSpec};
use crate::solver::{CostEstimate, Trajectory};

type EtaFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// The augmented (n+1)-dimensional problem together with its eta choice.
#[derive(Clone)]
pub struct AugmentedProblem {
    pub spec: ProblemSpec,
    pub base_dims: Dimensions,
    pub eta: Arc<EtaFn>,
}

pub fn eta_zero() -> Arc<EtaFn> {
    Arc::new(|_| 0.0)
}

/// Build the augmented problem. `eta` must be square-integrable; here it is
/// any measurable function of `W_T`.
pub fn augment_problem(base: &ProblemSpec, eta: Arc<EtaFn>) -> AugmentedProblem {
    let Dimensions { n, d, k } = base.dims;
    let an = n + 1;
    let dims = Dimensions { n: an, d, k };

    let b = base.clone();
    let drift = {
        let b = b.clone();
        move |t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]| {
            // base sees the first n state rows and the first n rows of z
            let (yb, zb) = split_state(y, z, n, d);
            b.drift(t, yb, zb, v, &mut out[..n]);
            out[n] = b.running_cost(t, yb, zb, v);
        }
    };
    let drift_dy = {
        let b = b.clone();
        move |t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]| {
            let (yb, zb) = split_state(y, z, n, d);
            out.fill(0.0);
            let mut by = vec![0.0; n * n];
            b.drift_dy(t, yb, zb, v, &mut by);
            for r in 0..n {
                for c in 0..n {
                    out[r * an + c] = by[r * n + c];
                }
            }
            let mut hy = vec![0.0; n];
            b.running_cost_dy(t, yb, zb, v, &mut hy);
            for c in 0..n {
                out[n * an + c] = hy[c];
            }
            // the x-column is identically zero: neither b nor h sees x
        }
    };
    let drift_dz = {
        let b = b.clone();
        move |t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]| {
            let (yb, zb) = split_state(y, z, n, d);
            out.fill(0.0);
            let mut bz = vec![0.0; n * n * d];
            b.drift_dz(t, yb, zb, v, &mut bz);
            for r in 0..n {
                for j in 0..n {
                    for l in 0..d {
                        out[r * an * d + j * d + l] = bz[r * n * d + j * d + l];
                    }
                }
            }
            let mut hz = vec![0.0; n * d];
            b.running_cost_dz(t, yb, zb, v, &mut hz);
            for j in 0..n {
                for l in 0..d {
                    out[n * an * d + j * d + l] = hz[j * d + l];
                }
            }
            // the k-row of z is never an argument of (b, h)
        }
    };
    let terminal_cost = {
        let b = b.clone();
        move |y: &[f64]| b.terminal_cost(&y[..n]) - y[n]
    };
    let terminal_cost_dy = {
        let b = b.clone();
        move |y: &[f64], out: &mut [f64]| {
            b.terminal_cost_dy(&y[..n], &mut out[..n]);
            out[n] = -1.0;
        }
    };
    let terminal_data = {
        let b = b.clone();
        let eta = eta.clone();
        move |w: &[f64], out: &mut [f64]| {
            b.terminal_data(w, &mut out[..n]);
            out[n] = eta(w);
        }
    };
    let running_cost = |_t: f64, _y: &[f64], _z: &[f64], _v: &[f64]| 0.0;
    let running_cost_dy = move |_t: f64, _y: &[f64], _z: &[f64], _v: &[f64], out: &mut [f64]| {
        out.fill(0.0);
    };
    let running_cost_dz = move |_t: f64, _y: &[f64], _z: &[f64], _v: &[f64], out: &mut [f64]| {
        out.fill(0.0);
    };

    AugmentedProblem {
        spec: ProblemSpec {
            dims,
            control_set: base.control_set.clone(),
            label: format!("{}~", base.label),
            drift: Arc::new(drift),
            drift_dy: Arc::new(drift_dy),
            drift_dz: Arc::new(drift_dz),
            running_cost: Arc::new(running_cost),
            running_cost_dy: Arc::new(running_cost_dy),
            running_cost_dz: Arc::new(running_cost_dz),
            terminal_cost: Arc::new(terminal_cost),
            terminal_cost_dy: Arc::new(terminal_cost_dy),
            terminal_data: Arc::new(terminal_data),
        },
        base_dims: base.dims,
        eta,
    }
}

fn split_state<'a>(y: &'a [f64], z: &'a [f64], n: usize, d: usize) -> (&'a [f64], &'a [f64]) {
    (&y[..n], &z[..n * d])
}

/// Restricted-cost comparison artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RestrictionCheck {
    pub cost: f64,
    pub restricted_cost: f64,
    pub diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `J~(v) = E[g(y_0) - x_0] + E[eta(W_T)]` along an augmented trajectory.
pub fn restricted_cost(
    aug: &AugmentedProblem,
    _control: &ControlLaw,
    aug_traj: &Trajectory,
) -> Result<CostEstimate> {
    let n = aug.base_dims.n;
    if aug_traj.n != n + 1 {
        return Err(Error::config(format!(
            "trajectory has state dimension {}, expected augmented {}",
            aug_traj.n,
            n + 1
        )));
    }
    let m_paths = aug_traj.paths();
    let n_steps = aug_traj.grid.steps;
    let d = aug_traj.d;
    let mut w = vec![0.0; d];
    let mut samples = Vec::with_capacity(m_paths);
    for m in 0..m_paths {
        let state = aug_traj.y_at(m, 0);
        for l in 0..d {
            w[l] = aug_traj.bundle.w[(m, n_steps, l)];
        }
        samples.push((aug.eta)(&w) + (aug.spec.terminal_cost)(state));
    }
    Ok(CostEstimate::from_samples(&samples))
}

/// Project an augmented adjoint onto the base dimensions, asserting that the
/// x-component stayed at -1 (its dynamics are identically zero).
pub fn reduce_adjoint(aug_path: &AdjointPath, base_dims: Dimensions) -> Result<AdjointPath> {
    let an = aug_path.n;
    let n = base_dims.n;
    if an != n + 1 {
        return Err(Error::config(format!(
            "adjoint has dimension {an}, expected augmented {}",
            n + 1
        )));
    }
    let m_paths = aug_path.p.dim().0;
    let n_nodes = aug_path.p.dim().1;
    let mut p = ndarray::Array3::zeros((m_paths, n_nodes, n));
    for m in 0..m_paths {
        for i in 0..n_nodes {
            let last = aug_path.p[(m, i, n)];
            if (last + 1.0).abs() > 1e-10 {
                return Err(Error::ReductionInvariant(format!(
                    "augmented adjoint component {} is {last} at path {m}, node {i} (expected -1 within 1e-10)",
                    n
                )));
            }
            for j in 0..n {
                p[(m, i, j)] = aug_path.p[(m, i, j)];
            }
        }
    }
    Ok(AdjointPath {
        grid: aug_path.grid.clone(),
        n,
        p,
        bundle: aug_path.bundle.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid, sample_brownian, ControlLaw, Dimensions};
    use crate::problems;
    use crate::regression::RegressionConfig;
    use crate::solver::{evaluate_cost, solve_bsde};
    use std::sync::Arc;

    fn setup(m: usize, seed: u64) -> Arc<crate::model::BrownianBundle> {
        let grid = build_grid(1.0, 64).unwrap();
        let dims = Dimensions::new(1, 1, 1).unwrap();
        Arc::new(sample_brownian(&grid, &dims, m, seed).unwrap())
    }

    #[test]
    fn augmented_dimensions_and_default_eta() {
        let p = problems::get_problem("P1").unwrap();
        let aug = augment_problem(&p.spec, eta_zero());
        assert_eq!(aug.spec.dims, Dimensions { n: 2, d: 1, k: 1 });
        let mut out = vec![0.0; 2];
        aug.spec.terminal_data(&[0.7], &mut out);
        assert_eq!(out, vec![0.7, 0.0]);
    }

    #[test]
    fn augmented_partials_match_finite_differences() {
        let p = problems::get_problem("P1").unwrap();
        let aug = augment_problem(&p.spec, eta_zero());
        let r = crate::model::validate_spec(&aug.spec, 40, 7).unwrap();
        assert!(r.max_rel_error <= 1e-6, "max rel {}", r.max_rel_error);
    }

    #[test]
    fn unit_running_cost_restricts_to_one() {
        // g = 0, h = 1: E[-x_0] = int h dt = 1 exactly
        let spec = problems::custom_scalar_spec(
            "unit-h",
            |_t, _y, _z, _v| 0.0,
            |_y| 0.0,
            |_t, _y, _z, _v| 1.0,
            |_w| 0.0,
            crate::model::ControlSet::Atoms(vec![vec![0.0]]),
        );
        let bundle = setup(500, 7);
        let law = ControlLaw::constant(vec![0.0]);
        let aug = augment_problem(&spec, eta_zero());
        let traj = solve_bsde(&aug.spec, &law, &bundle, &RegressionConfig::default()).unwrap();
        let c = restricted_cost(&aug, &law, &traj).unwrap();
        assert!((c.value - 1.0).abs() <= 1e-12, "{}", c.value);
    }

    #[test]
    fn restriction_identity_on_builtins() {
        let bundle = setup(4000, 7);
        let cfg = RegressionConfig::default();
        for name in ["P0", "P1", "P2"] {
            let p = problems::get_problem(name).unwrap();
            for c in [1.0, -1.0] {
                let law = ControlLaw::constant(vec![c]);
                let traj = solve_bsde(&p.spec, &law, &bundle, &cfg).unwrap();
                let j = evaluate_cost(&p.spec, &law, &traj);
                let aug = augment_problem(&p.spec, eta_zero());
                let atraj = solve_bsde(&aug.spec, &law, &bundle, &cfg).unwrap();
                let jt = restricted_cost(&aug, &law, &atraj).unwrap();
                let tol = 3.0 * (j.stderr + jt.stderr) + 1e-12;
                assert!(
                    (j.value - jt.value).abs() <= tol,
                    "{name} const {c}: J = {}, J~ = {}, tol = {tol}",
                    j.value,
                    jt.value
                );
            }
        }
    }

    #[test]
    fn eta_invariance_in_expectation() {
        // mean-preserving eta change leaves the restricted cost unchanged
        let p = problems::get_problem("P1").unwrap();
        let bundle = setup(4000, 11);
        let law = ControlLaw::constant(vec![1.0]);
        let cfg = RegressionConfig::default();

        let aug0 = augment_problem(&p.spec, eta_zero());
        let t0 = solve_bsde(&aug0.spec, &law, &bundle, &cfg).unwrap();
        let c0 = restricted_cost(&aug0, &law, &t0).unwrap();

        let augw = augment_problem(&p.spec, Arc::new(|w: &[f64]| w[0]));
        let tw = solve_bsde(&augw.spec, &law, &bundle, &cfg).unwrap();
        let cw = restricted_cost(&augw, &law, &tw).unwrap();

        let tol = 3.0 * (c0.stderr + cw.stderr) + 1e-12;
        assert!((c0.value - cw.value).abs() <= tol, "{} vs {}", c0.value, cw.value);
    }

    #[test]
    fn reduce_checks_last_component() {
        let grid = build_grid(1.0, 4).unwrap();
        let dims = Dimensions::new(1, 1, 1).unwrap();
        let bundle = Arc::new(sample_brownian(&grid, &dims, 3, 1).unwrap());

        // p~ = (p, -1) exactly: projection succeeds
        let mut p = ndarray::Array3::zeros((3, 5, 2));
        for m in 0..3 {
            for i in 0..5 {
                p[(m, i, 0)] = (m + i) as f64;
                p[(m, i, 1)] = -1.0;
            }
        }
        let ap = AdjointPath {
            grid: grid.clone(),
            n: 2,
            p,
            bundle: bundle.clone(),
        };
        let red = reduce_adjoint(&ap, dims).unwrap();
        assert_eq!(red.n, 1);
        assert_eq!(red.p[(2, 3, 0)], 5.0);

        // drifted last component: invariant violation
        let mut p = ndarray::Array3::zeros((3, 5, 2));
        for m in 0..3 {
            for i in 0..5 {
                p[(m, i, 1)] = -0.9;
            }
        }
        let ap = AdjointPath {
            grid,
            n: 2,
            p,
            bundle,
        };
        match reduce_adjoint(&ap, dims) {
            Err(crate::error::Error::ReductionInvariant(_)) => {}
            other => panic!("expected reduction violation, got {:?}", other.map(|_| ())),
        }
    }
}
