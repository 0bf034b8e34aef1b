//! Hamiltonian `H(t, y, z, p, v) = p . b(t, y, z, v) - h(t, y, z, v)` and the
//! adjoint process: the forward SDE
//!
//! `-dp = H_y dt + H_z dW`, `p_0 = g_y(y_0)`,
//!
//! integrated by Euler-Maruyama with the same increments as the backward
//! solver (common random numbers), coefficients evaluated along the solved
//! trajectory. `H_z` has the (n x d) layout of `z` and contracts with `dW` as
//! a matrix-vector product.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::model::{BrownianBundle, ControlLaw, ProblemSpec, TimeGrid};
use crate::solver::Trajectory;
use std::sync::Arc;

/// Discrete adjoint paths, shape (M, N+1, n).
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub grid: TimeGrid,
    pub n: usize,
    pub p: Array3<f64>,
    pub bundle: Arc<BrownianBundle>,
}

impl AdjointPath {
    pub fn p_at(&self, m: usize, i: usize) -> &[f64] {
        let n = self.n;
        let base = (m * (self.grid.steps + 1) + i) * n;
        &self.p.as_slice().unwrap()[base..base + n]
    }
}

pub fn hamiltonian(spec: &ProblemSpec, t: f64, y: &[f64], z: &[f64], p: &[f64], v: &[f64]) -> f64 {
    let n = spec.dims.n;
    let mut b = vec![0.0; n];
    spec.drift(t, y, z, v, &mut b);
    let mut acc = 0.0;
    for j in 0..n {
        acc += p[j] * b[j];
    }
    acc - spec.running_cost(t, y, z, v)
}

/// `H_y = b_y^T p - h_y` and `H_z[j,l] = sum_r p_r db_r/dz_jl - dh/dz_jl`.
pub fn hamiltonian_partials(
    spec: &ProblemSpec,
    t: f64,
    y: &[f64],
    z: &[f64],
    p: &[f64],
    v: &[f64],
    h_y: &mut [f64],
    h_z: &mut [f64],
) {
    let n = spec.dims.n;
    let d = spec.dims.d;
    let mut by = vec![0.0; n * n];
    let mut bz = vec![0.0; n * n * d];
    spec.drift_dy(t, y, z, v, &mut by);
    spec.drift_dz(t, y, z, v, &mut bz);
    spec.running_cost_dy(t, y, z, v, h_y);
    spec.running_cost_dz(t, y, z, v, h_z);
    // h_y currently holds dh/dy: flip and add b_y^T p
    for c in 0..n {
        let mut acc = -h_y[c];
        for r in 0..n {
            acc += by[r * n + c] * p[r];
        }
        h_y[c] = acc;
    }
    for j in 0..n {
        for l in 0..d {
            let mut acc = -h_z[j * d + l];
            for r in 0..n {
                acc += bz[r * n * d + j * d + l] * p[r];
            }
            h_z[j * d + l] = acc;
        }
    }
}

/// Forward Euler sweep of the adjoint along `traj`'s bundle and control.
pub fn solve_adjoint(spec: &ProblemSpec, control: &ControlLaw, traj: &Trajectory) -> Result<AdjointPath> {
    let n = spec.dims.n;
    let d = spec.dims.d;
    if traj.n != n {
        return Err(Error::config(format!(
            "trajectory dimension {} does not match spec dimension {n}",
            traj.n
        )));
    }
    let grid = traj.grid.clone();
    let bundle = &traj.bundle;
    let m_paths = traj.paths();
    let n_steps = grid.steps;
    let dt = grid.dt;

    let mut p = Array3::zeros((m_paths, n_steps + 1, n));
    // y_0 is identical across paths; p_0 = g_y(y_0) likewise
    let mut p0 = vec![0.0; n];
    spec.terminal_cost_dy(traj.y_at(0, 0), &mut p0);
    for m in 0..m_paths {
        for j in 0..n {
            p[(m, 0, j)] = p0[j];
        }
    }

    let mut w = vec![0.0; d];
    let mut v = vec![0.0; control.k];
    let mut hy = vec![0.0; n];
    let mut hz = vec![0.0; n * d];
    let mut pcur = vec![0.0; n];
    for m in 0..m_paths {
        for i in 0..n_steps {
            let t = grid.nodes[i];
            for l in 0..d {
                w[l] = bundle.w[(m, i, l)];
            }
            control.value_into(i, &w, &mut v);
            for j in 0..n {
                pcur[j] = p[(m, i, j)];
            }
            hamiltonian_partials(spec, t, traj.y_at(m, i), traj.z_at(m, i), &pcur, &v, &mut hy, &mut hz);
            for j in 0..n {
                let mut dp = hy[j] * dt;
                for l in 0..d {
                    dp += hz[j * d + l] * bundle.dw[(m, i, l)];
                }
                let next = pcur[j] - dp;
                if !next.is_finite() {
                    return Err(Error::Divergence { step: i, path: m });
                }
                p[(m, i + 1, j)] = next;
            }
        }
    }

    Ok(AdjointPath {
        grid,
        n,
        p,
        bundle: Arc::clone(bundle),
    })
}
