//! Built-in test problems with closed forms, and an exhaustive
//! piecewise-constant enumeration oracle.
//!
//! All built-ins are n = d = k = 1 on the canonical horizon T = 1:
//!
//! * P0 "deterministic tradeoff": b = v, h = y^2, g = (y-1)^2, xi = 0,
//!   U = [-1, 1] (5 oracle atoms). Reduces to a backward ODE.
//! * P1 "stochastic spike testbed": b = v, h = y^2, g = y^2, xi = W_T,
//!   U = {-1, 0, +1}.
//! * P2 "chattering gap": b = v, h = y^2, g = 0, xi = 0, U = {-1, +1}.
//!   Relaxed value 0 at weights (1/2, 1/2); no strict control attains it.
//! * P3a: b = 0.5 y, xi = W_T; y_t = e^{0.5(t-T)} W_t, z_t = e^{0.5(t-T)}.
//! * P3b: b = 0.3 z, xi = W_T; y_t = W_t + 0.3 (t-T), z_t = 1.
//!
//! The oracle integrates the deterministic backward ODE with its own RK4
//! stepper; it shares no code with the regression solver on purpose.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ControlLaw, ControlSet, Dimensions, ProblemSpec, TimeGrid};

pub const CANONICAL_HORIZON: f64 = 1.0;
const P3A_ALPHA: f64 = 0.5;
const P3B_BETA: f64 = 0.3;
const ORACLE_BUDGET: usize = 1_000_000;

/// A catalogued problem plus its oracle parameters.
#[derive(Clone)]
pub struct BuiltinProblem {
    pub name: String,
    pub spec: ProblemSpec,
    pub horizon: f64,
    /// Default block count for the enumeration oracle.
    pub oracle_blocks: usize,
    /// Atoms the oracle enumerates over.
    pub oracle_atoms: Vec<Vec<f64>>,
    /// RK4 substeps per block.
    pub oracle_fine: usize,
    pub description: &'static str,
}

/// Build a scalar (n = d = k = 1) problem from primal maps; partials by
/// central differences. Handy for tests and one-off variants; the catalogued
/// problems carry analytic partials instead.
pub fn custom_scalar_spec(
    label: &str,
    b: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    g: impl Fn(f64) -> f64 + Send + Sync + 'static,
    h: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    xi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    control_set: ControlSet,
) -> ProblemSpec {
    let b = Arc::new(b);
    let g = Arc::new(g);
    let h = Arc::new(h);
    let e = 1e-6;
    let b1 = b.clone();
    let b2 = b.clone();
    let b3 = b.clone();
    let h1 = h.clone();
    let h2 = h.clone();
    let h3 = h.clone();
    let g1 = g.clone();
    let g2 = g.clone();
    ProblemSpec {
        dims: Dimensions { n: 1, d: 1, k: 1 },
        control_set,
        label: label.to_string(),
        drift: Arc::new(move |t, y, z, v, out: &mut [f64]| out[0] = b1(t, y[0], z[0], v[0])),
        drift_dy: Arc::new(move |t, y, z, v, out: &mut [f64]| {
            out[0] = (b2(t, y[0] + e, z[0], v[0]) - b2(t, y[0] - e, z[0], v[0])) / (2.0 * e)
        }),
        drift_dz: Arc::new(move |t, y, z, v, out: &mut [f64]| {
            out[0] = (b3(t, y[0], z[0] + e, v[0]) - b3(t, y[0], z[0] - e, v[0])) / (2.0 * e)
        }),
        running_cost: Arc::new(move |t, y, z, v| h1(t, y[0], z[0], v[0])),
        running_cost_dy: Arc::new(move |t, y, z, v, out: &mut [f64]| {
            out[0] = (h2(t, y[0] + e, z[0], v[0]) - h2(t, y[0] - e, z[0], v[0])) / (2.0 * e)
        }),
        running_cost_dz: Arc::new(move |t, y, z, v, out: &mut [f64]| {
            out[0] = (h3(t, y[0], z[0] + e, v[0]) - h3(t, y[0], z[0] - e, v[0])) / (2.0 * e)
        }),
        terminal_cost: Arc::new(move |y| g1(y[0])),
        terminal_cost_dy: Arc::new(move |y, out: &mut [f64]| {
            out[0] = (g2(y[0] + e) - g2(y[0] - e)) / (2.0 * e)
        }),
        terminal_data: Arc::new(move |w, out: &mut [f64]| out[0] = xi(w[0])),
    }
}

/// Scalar spec with analytic partials supplied explicitly.
#[allow(clippy::too_many_arguments)]
fn scalar_spec(
    label: &str,
    control_set: ControlSet,
    b: fn(f64, f64, f64, f64) -> f64,
    b_y: fn(f64, f64, f64, f64) -> f64,
    b_z: fn(f64, f64, f64, f64) -> f64,
    h: fn(f64, f64, f64, f64) -> f64,
    h_y: fn(f64, f64, f64, f64) -> f64,
    h_z: fn(f64, f64, f64, f64) -> f64,
    g: fn(f64) -> f64,
    g_y: fn(f64) -> f64,
    xi: fn(f64) -> f64,
) -> ProblemSpec {
    ProblemSpec {
        dims: Dimensions { n: 1, d: 1, k: 1 },
        control_set,
        label: label.to_string(),
        drift: Arc::new(move |t, y, z, v, out: &mut [f64]| out[0] = b(t, y[0], z[0], v[0])),
        drift_dy: Arc::new(move |t, y, z, v, out: &mut [f64]| out[0] = b_y(t, y[0], z[0], v[0])),
        drift_dz: Arc::new(move |t, y, z, v, out: &mut [f64]| out[0] = b_z(t, y[0], z[0], v[0])),
        running_cost: Arc::new(move |t, y, z, v| h(t, y[0], z[0], v[0])),
        running_cost_dy: Arc::new(move |t, y, z, v, out: &mut [f64]| out[0] = h_y(t, y[0], z[0], v[0])),
        running_cost_dz: Arc::new(move |t, y, z, v, out: &mut [f64]| out[0] = h_z(t, y[0], z[0], v[0])),
        terminal_cost: Arc::new(move |y| g(y[0])),
        terminal_cost_dy: Arc::new(move |y, out: &mut [f64]| out[0] = g_y(y[0])),
        terminal_data: Arc::new(move |w, out: &mut [f64]| out[0] = xi(w[0])),
    }
}

pub fn get_problem(name: &str) -> Result<BuiltinProblem> {
    let five_atoms: Vec<Vec<f64>> = vec![vec![-1.0], vec![-0.5], vec![0.0], vec![0.5], vec![1.0]];
    match name {
        "P0" => Ok(BuiltinProblem {
            name: "P0".into(),
            spec: scalar_spec(
                "P0",
                ControlSet::Box {
                    lo: vec![-1.0],
                    hi: vec![1.0],
                    resolution: 21,
                },
                |_t, _y, _z, v| v,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_t, y, _z, _v| y * y,
                |_t, y, _z, _v| 2.0 * y,
                |_t, _y, _z, _v| 0.0,
                |y| (y - 1.0) * (y - 1.0),
                |y| 2.0 * (y - 1.0),
                |_w| 0.0,
            ),
            horizon: CANONICAL_HORIZON,
            oracle_blocks: 8,
            oracle_atoms: five_atoms,
            oracle_fine: 16,
            description: "deterministic tradeoff: b = v, h = y^2, g = (y-1)^2, xi = 0",
        }),
        "P1" => Ok(BuiltinProblem {
            name: "P1".into(),
            spec: scalar_spec(
                "P1",
                ControlSet::Atoms(vec![vec![-1.0], vec![0.0], vec![1.0]]),
                |_t, _y, _z, v| v,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_t, y, _z, _v| y * y,
                |_t, y, _z, _v| 2.0 * y,
                |_t, _y, _z, _v| 0.0,
                |y| y * y,
                |y| 2.0 * y,
                |w| w,
            ),
            horizon: CANONICAL_HORIZON,
            oracle_blocks: 8,
            oracle_atoms: vec![vec![-1.0], vec![0.0], vec![1.0]],
            oracle_fine: 16,
            description: "stochastic spike testbed: b = v, h = y^2, g = y^2, xi = W_T",
        }),
        "P2" => Ok(BuiltinProblem {
            name: "P2".into(),
            spec: scalar_spec(
                "P2",
                ControlSet::Atoms(vec![vec![-1.0], vec![1.0]]),
                |_t, _y, _z, v| v,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_t, y, _z, _v| y * y,
                |_t, y, _z, _v| 2.0 * y,
                |_t, _y, _z, _v| 0.0,
                |_y| 0.0,
                |_y| 0.0,
                |_w| 0.0,
            ),
            horizon: CANONICAL_HORIZON,
            oracle_blocks: 8,
            oracle_atoms: vec![vec![-1.0], vec![1.0]],
            oracle_fine: 16,
            description: "chattering gap: b = v, h = y^2, g = 0, xi = 0; relaxed value 0 not attained strictly",
        }),
        "P3a" => Ok(BuiltinProblem {
            name: "P3a".into(),
            spec: scalar_spec(
                "P3a",
                ControlSet::Atoms(vec![vec![0.0]]),
                |_t, y, _z, _v| P3A_ALPHA * y,
                |_t, _y, _z, _v| P3A_ALPHA,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_y| 0.0,
                |_y| 0.0,
                |w| w,
            ),
            horizon: CANONICAL_HORIZON,
            oracle_blocks: 1,
            oracle_atoms: vec![vec![0.0]],
            oracle_fine: 16,
            description: "linear BSDE validation, y-driver: b = 0.5 y, xi = W_T (alpha = 0.5)",
        }),
        "P3b" => Ok(BuiltinProblem {
            name: "P3b".into(),
            spec: scalar_spec(
                "P3b",
                ControlSet::Atoms(vec![vec![0.0]]),
                |_t, _y, z, _v| P3B_BETA * z,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| P3B_BETA,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_t, _y, _z, _v| 0.0,
                |_y| 0.0,
                |_y| 0.0,
                |w| w,
            ),
            horizon: CANONICAL_HORIZON,
            oracle_blocks: 1,
            oracle_atoms: vec![vec![0.0]],
            oracle_fine: 16,
            description: "linear BSDE validation, z-driver: b = 0.3 z, xi = W_T (beta = 0.3)",
        }),
        other => Err(Error::config(format!(
            "unknown problem '{other}' (known: P0, P1, P2, P3a, P3b)"
        ))),
    }
}

/// P2 with the running cost negated: H becomes convex in y; used to exercise
/// the sufficiency checks' failure path.
pub fn p2_negated_running_cost() -> ProblemSpec {
    let mut spec = get_problem("P2").unwrap().spec;
    spec.label = "P2-neg-h".into();
    spec.running_cost = Arc::new(|_t, y: &[f64], _z: &[f64], _v: &[f64]| -(y[0] * y[0]));
    spec.running_cost_dy = Arc::new(|_t, y: &[f64], _z: &[f64], _v: &[f64], out: &mut [f64]| {
        out[0] = -2.0 * y[0]
    });
    spec
}

/// Closed-form `(y, z)` for P3a/P3b at `(t, w)` on the canonical horizon.
pub fn analytic_solution(name: &str, t: f64, w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let big_t = CANONICAL_HORIZON;
    match name {
        "P3a" => {
            let phi = (P3A_ALPHA * (t - big_t)).exp();
            Ok((vec![phi * w[0]], vec![phi]))
        }
        "P3b" => Ok((vec![w[0] + P3B_BETA * (t - big_t)], vec![1.0])),
        other => Err(Error::OracleInapplicable(format!(
            "no closed form for '{other}' (only P3a, P3b)"
        ))),
    }
}

/// Brute-force optimum over piecewise-constant time-only controls.
#[derive(Debug, Clone, Serialize)]
pub struct OracleSolution {
    pub value: f64,
    /// chosen atom per block
    pub pattern: Vec<Vec<f64>>,
    pub blocks: usize,
}

impl OracleSolution {
    /// Feedback law holding the block pattern; valid for grids over the same
    /// horizon.
    pub fn law(&self, grid: &TimeGrid) -> ControlLaw {
        let pattern = self.pattern.clone();
        let blocks = self.blocks;
        let horizon = grid.horizon;
        let nodes = grid.nodes.clone();
        ControlLaw::from_fn(
            format!("oracle:B{blocks}"),
            pattern[0].len(),
            move |i, _w, out| {
                let t = nodes[i.min(nodes.len() - 1)];
                let blk = ((t / horizon * blocks as f64) as usize).min(blocks - 1);
                out.copy_from_slice(&pattern[blk]);
            },
        )
    }
}

/// Enumerate all |atoms|^blocks piecewise-constant controls, integrating the
/// deterministic backward system (y, running cost) with RK4, and return the
/// cost-minimizing one. Tie-break: lexicographically smallest atom-index
/// vector (enumeration order guarantees it).
pub fn brute_force_optimum(
    spec: &ProblemSpec,
    horizon: f64,
    blocks: usize,
    atoms: &[Vec<f64>],
    fine: usize,
) -> Result<OracleSolution> {
    assert_deterministic_reducible(spec)?;
    if atoms.is_empty() || blocks == 0 {
        return Err(Error::config("oracle needs at least one block and one atom"));
    }
    let n_cand = (atoms.len() as f64).powi(blocks as i32);
    if n_cand > ORACLE_BUDGET as f64 {
        return Err(Error::Budget(format!(
            "{}^{blocks} = {n_cand:.0} candidates exceeds {ORACLE_BUDGET}",
            atoms.len()
        )));
    }

    let n = spec.dims.n;
    let d = spec.dims.d;
    let mut xi0 = vec![0.0; n];
    spec.terminal_data(&vec![0.0; d], &mut xi0);

    let mut best_value = f64::INFINITY;
    let mut best_idx: Option<Vec<usize>> = None;
    let mut idx = vec![0usize; blocks];
    let zero_z = vec![0.0; n * d];

    loop {
        // integrate (y, C) backward from (xi, 0); C(t) = int_t^T h
        let mut y = xi0.clone();
        let mut cost_int = 0.0;
        for blk in (0..blocks).rev() {
            let v = &atoms[idx[blk]];
            let t1 = horizon * (blk + 1) as f64 / blocks as f64;
            let t0 = horizon * blk as f64 / blocks as f64;
            let hstep = (t1 - t0) / fine as f64;
            let mut t = t1;
            for _ in 0..fine {
                rk4_backward_step(spec, &mut y, &mut cost_int, t, hstep, v, &zero_z, n);
                t -= hstep;
            }
        }
        let value = spec.terminal_cost(&y) + cost_int;
        if value < best_value {
            best_value = value;
            best_idx = Some(idx.clone());
        }
        // next candidate in lexicographic order
        let mut pos = blocks;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < atoms.len() {
                break;
            }
            idx[pos] = 0;
            if pos == 0 {
                pos = usize::MAX;
                break;
            }
        }
        if pos == usize::MAX {
            break;
        }
    }

    let chosen = best_idx.expect("at least one candidate");
    Ok(OracleSolution {
        value: best_value,
        pattern: chosen.iter().map(|&i| atoms[i].clone()).collect(),
        blocks,
    })
}

/// One RK4 step of `dy/dt = b(t, y, 0, v)`, `dC/dt = -h(t, y, 0, v)`,
/// integrating backward (hstep > 0 decreases t).
#[allow(clippy::too_many_arguments)]
fn rk4_backward_step(
    spec: &ProblemSpec,
    y: &mut [f64],
    cost_int: &mut f64,
    t: f64,
    hstep: f64,
    v: &[f64],
    zero_z: &[f64],
    n: usize,
) {
    let eval = |t: f64, y: &[f64]| -> (Vec<f64>, f64) {
        let mut b = vec![0.0; n];
        spec.drift(t, y, zero_z, v, &mut b);
        let h = spec.running_cost(t, y, zero_z, v);
        (b, h)
    };
    let (k1, c1) = eval(t, y);
    let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a - 0.5 * hstep * k).collect();
    let (k2, c2) = eval(t - 0.5 * hstep, &y2);
    let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, k)| a - 0.5 * hstep * k).collect();
    let (k3, c3) = eval(t - 0.5 * hstep, &y3);
    let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, k)| a - hstep * k).collect();
    let (k4, c4) = eval(t - hstep, &y4);
    for j in 0..n {
        y[j] -= hstep / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    *cost_int += hstep / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
}

/// The oracle applies only to deterministic-reducible problems: deterministic
/// terminal data and z-independent coefficients. Probed numerically.
fn assert_deterministic_reducible(spec: &ProblemSpec) -> Result<()> {
    let n = spec.dims.n;
    let d = spec.dims.d;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for probe in [0.7, -1.3, 2.1] {
        spec.terminal_data(&vec![0.0; d], &mut a);
        spec.terminal_data(&vec![probe; d], &mut b);
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12) {
            return Err(Error::OracleInapplicable(
                "terminal data depends on W_T (not deterministic)".into(),
            ));
        }
    }
    let atoms = spec.control_set.grid_atoms();
    let v = &atoms[0];
    let y = vec![0.37; n];
    for probe in [0.9, -0.4] {
        let z0 = vec![0.0; n * d];
        let z1 = vec![probe; n * d];
        spec.drift(0.5, &y, &z0, v, &mut a);
        spec.drift(0.5, &y, &z1, v, &mut b);
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12) {
            return Err(Error::OracleInapplicable("drift depends on z".into()));
        }
        let h0 = spec.running_cost(0.5, &y, &z0, v);
        let h1 = spec.running_cost(0.5, &y, &z1, v);
        if (h0 - h1).abs() > 1e-12 {
            return Err(Error::OracleInapplicable("running cost depends on z".into()));
        }
    }
    Ok(())
}
