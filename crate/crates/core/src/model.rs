//! Core model: dimensions, time grid, Brownian driver, problem coefficients
//! and control representations shared by every solver.
//!
//! Conventions used throughout the crate:
//!
//! * the state equation is `dy = b(t, y, z, v) dt + z dW` with terminal data
//!   `y_T = xi(W_T)` (note the `+b` sign; comparisons against sources using the
//!   `-f` generator convention must flip signs);
//! * `y` lives in `R^n`, `z` in `R^{n x d}` stored row-major (`z[j*d + l]`),
//!   `v` in `U` a subset of `R^k`;
//! * partial-derivative layouts: `b_y[r*n + c] = db_r/dy_c`,
//!   `b_z[r*n*d + j*d + l] = db_r/dz_{jl}`, `h_z[j*d + l] = dh/dz_{jl}`.
//!
//! Controls are feedback maps on `(time index, W_{t_i})`, which makes
//! adaptedness structural; raw path-indexed control arrays are not
//! representable.

use std::sync::Arc;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// State / Brownian / control dimensions `(n, d, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimensions {
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

impl Dimensions {
    pub fn new(n: usize, d: usize, k: usize) -> Result<Self> {
        if n == 0 || d == 0 || k == 0 {
            return Err(Error::config(format!(
                "dimensions must be positive, got n={n}, d={d}, k={k}"
            )));
        }
        Ok(Dimensions { n, d, k })
    }
}

/// Uniform grid `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
    pub nodes: Vec<f64>,
}

pub fn build_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::config(format!("horizon must be positive, got {horizon}")));
    }
    if steps == 0 {
        return Err(Error::config("grid needs at least one step"));
    }
    let nodes = (0..=steps)
        .map(|i| horizon * i as f64 / steps as f64)
        .collect();
    Ok(TimeGrid {
        horizon,
        steps,
        dt: horizon / steps as f64,
        nodes,
    })
}

/// Seeded Brownian increments and cumulative paths.
///
/// Path `m` draws from an independent ChaCha8 substream (`set_stream(m)`), so
/// regeneration is bit-identical for a given seed and independent of any
/// future parallel scheduling of the path loop.
#[derive(Debug, Clone)]
pub struct BrownianBundle {
    pub grid: TimeGrid,
    pub d: usize,
    pub paths: usize,
    pub seed: u64,
    /// increments, shape (M, N, d)
    pub dw: Array3<f64>,
    /// cumulative paths, shape (M, N+1, d), w[m][0] = 0
    pub w: Array3<f64>,
}

pub fn sample_brownian(grid: &TimeGrid, dims: &Dimensions, paths: usize, seed: u64) -> Result<BrownianBundle> {
    if paths == 0 {
        return Err(Error::config("need at least one Monte Carlo path"));
    }
    let (n_steps, d) = (grid.steps, dims.d);
    let sqrt_dt = grid.dt.sqrt();
    let mut dw = Array3::zeros((paths, n_steps, d));
    let mut w = Array3::zeros((paths, n_steps + 1, d));
    for m in 0..paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        for i in 0..n_steps {
            for l in 0..d {
                let g: f64 = StandardNormal.sample(&mut rng);
                let inc = g * sqrt_dt;
                dw[(m, i, l)] = inc;
                w[(m, i + 1, l)] = w[(m, i, l)] + inc;
            }
        }
    }
    Ok(BrownianBundle {
        grid: grid.clone(),
        d,
        paths,
        seed,
        dw,
        w,
    })
}

/// Control-set descriptor: a finite atom list or a box with a grid resolution.
#[derive(Debug, Clone)]
pub enum ControlSet {
    Atoms(Vec<Vec<f64>>),
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        resolution: usize,
    },
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Atoms(a) => a.first().map_or(0, |v| v.len()),
            ControlSet::Box { lo, .. } => lo.len(),
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        match self {
            ControlSet::Atoms(atoms) => atoms.iter().any(|a| a.as_slice() == v),
            ControlSet::Box { lo, hi, .. } => {
                v.len() == lo.len()
                    && v.iter()
                        .zip(lo.iter().zip(hi.iter()))
                        .all(|(x, (a, b))| *a <= *x && *x <= *b)
            }
        }
    }

    /// Whether the descriptor is a convex set (box yes, finite atoms no
    /// unless a single point).
    pub fn is_convex(&self) -> bool {
        match self {
            ControlSet::Atoms(a) => a.len() <= 1,
            ControlSet::Box { .. } => true,
        }
    }

    /// Finite maximization grid: the atoms themselves, or a uniform grid of
    /// `resolution` points per axis for a box.
    pub fn grid_atoms(&self) -> Vec<Vec<f64>> {
        match self {
            ControlSet::Atoms(a) => a.clone(),
            ControlSet::Box { lo, hi, resolution } => {
                let r = (*resolution).max(1);
                let k = lo.len();
                let mut atoms: Vec<Vec<f64>> = vec![vec![]];
                for j in 0..k {
                    let mut next = Vec::with_capacity(atoms.len() * r);
                    for prefix in &atoms {
                        for s in 0..r {
                            let x = if r == 1 {
                                0.5 * (lo[j] + hi[j])
                            } else {
                                lo[j] + (hi[j] - lo[j]) * s as f64 / (r - 1) as f64
                            };
                            let mut v = prefix.clone();
                            v.push(x);
                            next.push(v);
                        }
                    }
                    atoms = next;
                }
                atoms
            }
        }
    }
}

type LawFn = dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync;

/// Adapted feedback control: a deterministic map `(i, W_{t_i}) -> v in U`.
#[derive(Clone)]
pub struct ControlLaw {
    pub label: String,
    pub k: usize,
    map: Arc<LawFn>,
}

impl std::fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ControlLaw({})", self.label)
    }
}

impl ControlLaw {
    pub fn from_fn(
        label: impl Into<String>,
        k: usize,
        map: impl Fn(usize, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        ControlLaw {
            label: label.into(),
            k,
            map: Arc::new(map),
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let label = format!(
            "const:{}",
            value.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        );
        let k = value.len();
        ControlLaw::from_fn(label, k, move |_, _, out| out.copy_from_slice(&value))
    }

    pub fn value_into(&self, i: usize, w: &[f64], out: &mut [f64]) {
        (self.map)(i, w, out)
    }

    pub fn value(&self, i: usize, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.value_into(i, w, &mut out);
        out
    }
}

type VecFieldFn = dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;
type ScalarFieldFn = dyn Fn(f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync;
type TerminalCostFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type TerminalGradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type TerminalDataFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// The coefficient bundle `(b, h, g, xi, U)` of one control problem, with
/// analytic partials.
#[derive(Clone)]
pub struct ProblemSpec {
    pub dims: Dimensions,
    pub control_set: ControlSet,
    pub label: String,
    pub drift: Arc<VecFieldFn>,
    pub drift_dy: Arc<VecFieldFn>,
    pub drift_dz: Arc<VecFieldFn>,
    pub running_cost: Arc<ScalarFieldFn>,
    pub running_cost_dy: Arc<VecFieldFn>,
    pub running_cost_dz: Arc<VecFieldFn>,
    pub terminal_cost: Arc<TerminalCostFn>,
    pub terminal_cost_dy: Arc<TerminalGradFn>,
    pub terminal_data: Arc<TerminalDataFn>,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ProblemSpec({}, n={}, d={}, k={})", self.label, self.dims.n, self.dims.d, self.dims.k)
    }
}

impl ProblemSpec {
    pub fn drift(&self, t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]) {
        (self.drift)(t, y, z, v, out)
    }
    pub fn drift_dy(&self, t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]) {
        (self.drift_dy)(t, y, z, v, out)
    }
    pub fn drift_dz(&self, t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]) {
        (self.drift_dz)(t, y, z, v, out)
    }
    pub fn running_cost(&self, t: f64, y: &[f64], z: &[f64], v: &[f64]) -> f64 {
        (self.running_cost)(t, y, z, v)
    }
    pub fn running_cost_dy(&self, t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]) {
        (self.running_cost_dy)(t, y, z, v, out)
    }
    pub fn running_cost_dz(&self, t: f64, y: &[f64], z: &[f64], v: &[f64], out: &mut [f64]) {
        (self.running_cost_dz)(t, y, z, v, out)
    }
    pub fn terminal_cost(&self, y: &[f64]) -> f64 {
        (self.terminal_cost)(y)
    }
    pub fn terminal_cost_dy(&self, y: &[f64], out: &mut [f64]) {
        (self.terminal_cost_dy)(y, out)
    }
    pub fn terminal_data(&self, w_t: &[f64], out: &mut [f64]) {
        (self.terminal_data)(w_t, out)
    }
}

/// Outcome of the finite-difference coefficient audit.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    pub max_rel_error: f64,
    pub worst_partial: String,
    pub unbounded_flags: Vec<String>,
    pub samples: usize,
    pub tolerance: f64,
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

/// Scale-guarded relative error used by every gradient check in the crate.
pub fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

/// Check every analytic partial of `spec` against central finite differences
/// at `samples` random points, and probe for coefficient growth that violates
/// the boundedness assumptions (flagged, not fatal).
pub fn validate_spec(spec: &ProblemSpec, samples: usize, seed: u64) -> Result<ValidationReport> {
    let Dimensions { n, d, k } = spec.dims;
    // decorrelate from path sampling streams
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let atoms = spec.control_set.grid_atoms();

    let mut max_rel = 0.0_f64;
    let mut worst = String::from("none");
    let mut record = |name: &str, e: f64| {
        if e > max_rel {
            max_rel = e;
            worst = name.to_string();
        }
    };

    let mut b_plus = vec![0.0; n];
    let mut b_minus = vec![0.0; n];
    let mut ana_by = vec![0.0; n * n];
    let mut ana_bz = vec![0.0; n * n * d];
    let mut ana_hy = vec![0.0; n];
    let mut ana_hz = vec![0.0; n * d];
    let mut ana_gy = vec![0.0; n];

    for s in 0..samples {
        let t: f64 = StandardNormal.sample(&mut rng);
        let t = (t.abs() % 1.0).min(1.0);
        let mut y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = atoms[s % atoms.len()].clone();

        spec.drift_dy(t, &y, &z, &v, &mut ana_by);
        spec.drift_dz(t, &y, &z, &v, &mut ana_bz);
        spec.running_cost_dy(t, &y, &z, &v, &mut ana_hy);
        spec.running_cost_dz(t, &y, &z, &v, &mut ana_hz);
        spec.terminal_cost_dy(&y, &mut ana_gy);

        for c in 0..n {
            let y0 = y[c];
            y[c] = y0 + FD_STEP;
            spec.drift(t, &y, &z, &v, &mut b_plus);
            let h_plus = spec.running_cost(t, &y, &z, &v);
            let g_plus = spec.terminal_cost(&y);
            y[c] = y0 - FD_STEP;
            spec.drift(t, &y, &z, &v, &mut b_minus);
            let h_minus = spec.running_cost(t, &y, &z, &v);
            let g_minus = spec.terminal_cost(&y);
            y[c] = y0;
            for r in 0..n {
                let fd = (b_plus[r] - b_minus[r]) / (2.0 * FD_STEP);
                record("b_y", rel_err(fd, ana_by[r * n + c]));
            }
            record("h_y", rel_err((h_plus - h_minus) / (2.0 * FD_STEP), ana_hy[c]));
            record("g_y", rel_err((g_plus - g_minus) / (2.0 * FD_STEP), ana_gy[c]));
        }
        for jl in 0..n * d {
            let z0 = z[jl];
            z[jl] = z0 + FD_STEP;
            spec.drift(t, &y, &z, &v, &mut b_plus);
            let h_plus = spec.running_cost(t, &y, &z, &v);
            z[jl] = z0 - FD_STEP;
            spec.drift(t, &y, &z, &v, &mut b_minus);
            let h_minus = spec.running_cost(t, &y, &z, &v);
            z[jl] = z0;
            for r in 0..n {
                let fd = (b_plus[r] - b_minus[r]) / (2.0 * FD_STEP);
                record("b_z", rel_err(fd, ana_bz[r * n * d + jl]));
            }
            record("h_z", rel_err((h_plus - h_minus) / (2.0 * FD_STEP), ana_hz[jl]));
        }
        let _ = k;
    }

    if max_rel > FD_TOL {
        return Err(Error::GradientMismatch {
            partial: worst,
            max_rel,
            tol: FD_TOL,
        });
    }

    Ok(ValidationReport {
        max_rel_error: max_rel,
        worst_partial: worst,
        unbounded_flags: boundedness_flags(spec),
        samples,
        tolerance: FD_TOL,
    })
}

/// Growth probe: superlinear primal maps or derivative growth at |y| = 1e3
/// relative to scale 1. Quadratic test costs trip this on purpose.
fn boundedness_flags(spec: &ProblemSpec) -> Vec<String> {
    let Dimensions { n, d, .. } = spec.dims;
    let atoms = spec.control_set.grid_atoms();
    let v = atoms[0].clone();
    let big = 1e3;

    let probe = |scale: f64, name: &str| -> f64 {
        let y = vec![scale; n];
        let z = vec![0.0; n * d];
        match name {
            "b" => {
                let mut b = vec![0.0; n];
                spec.drift(0.5, &y, &z, &v, &mut b);
                b.iter().map(|x| x.abs()).fold(0.0, f64::max)
            }
            "h" => spec.running_cost(0.5, &y, &z, &v).abs(),
            "b_y" => {
                let mut by = vec![0.0; n * n];
                spec.drift_dy(0.5, &y, &z, &v, &mut by);
                by.iter().map(|x| x.abs()).fold(0.0, f64::max)
            }
            "h_y" => {
                let mut hy = vec![0.0; n];
                spec.running_cost_dy(0.5, &y, &z, &v, &mut hy);
                hy.iter().map(|x| x.abs()).fold(0.0, f64::max)
            }
            "g_y" => {
                let mut gy = vec![0.0; n];
                spec.terminal_cost_dy(&y, &mut gy);
                gy.iter().map(|x| x.abs()).fold(0.0, f64::max)
            }
            _ => unreachable!(),
        }
    };

    let mut flags = Vec::new();
    // primal growth: C(1 + |y|) is allowed, flag anything clearly superlinear
    for name in ["b", "h"] {
        if probe(big, name) > 10.0 * probe(1.0, name).max(1.0) * (1.0 + big) {
            flags.push(format!("unbounded {name}"));
        }
    }
    // derivative boundedness
    for name in ["b_y", "h_y", "g_y"] {
        if probe(big, name) > 10.0 * probe(1.0, name).max(1.0) {
            flags.push(format!("unbounded {name}"));
        }
    }
    flags
}
