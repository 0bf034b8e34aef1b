//! Measure-valued (relaxed) controls over a finite atom set: relaxed BSDE
//! and cost, relaxed Hamiltonian and adjoint, the chattering approximation
//! with its stability diagnostics, the control metric, and the relaxed
//! necessary/sufficient condition checks.
//!
//! A relaxed law assigns each `(i, W_{t_i})` a probability vector over the
//! atoms. Averaging the coefficients over the weights turns the relaxed
//! problem into a plain problem whose "control" is the weight vector itself,
//! so the unmodified solvers apply; every relaxed quantity is exactly linear
//! in the weights, and a Dirac weight vector reproduces the strict pipeline
//! bit for bit.

use std::sync::Arc;

use serde::Serialize;

use crate::adjoint::{hamiltonian, solve_adjoint, AdjointPath};
use crate::error::{Error, Result};
use crate::maximum_principle::{build_report, check_necessary, ViolationReport};
use crate::model::{BrownianBundle, ControlLaw, ControlSet, ProblemSpec, TimeGrid};
use crate::regression::RegressionConfig;
use crate::solver::{evaluate_cost, solve_bsde, CostEstimate, Trajectory};

type WeightFn = dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync;

/// Adapted probability weights over a finite atom subset of U.
#[derive(Clone)]
pub struct RelaxedControlLaw {
    pub label: String,
    pub atoms: Vec<Vec<f64>>,
    weights: Arc<WeightFn>,
}

impl std::fmt::Debug for RelaxedControlLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RelaxedControlLaw({}, {} atoms)", self.label, self.atoms.len())
    }
}

impl RelaxedControlLaw {
    pub fn from_weights_fn(
        label: impl Into<String>,
        atoms: Vec<Vec<f64>>,
        weights: impl Fn(usize, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        RelaxedControlLaw {
            label: label.into(),
            atoms,
            weights: Arc::new(weights),
        }
    }

    /// State-independent weights.
    pub fn constant_weights(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != atoms.len() {
            return Err(Error::config("one weight per atom required"));
        }
        if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "weights must be a probability vector, got {weights:?}"
            )));
        }
        let label = format!(
            "relaxed:({})",
            weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        );
        Ok(RelaxedControlLaw::from_weights_fn(label, atoms, move |_, _, out| {
            out.copy_from_slice(&weights)
        }))
    }

    pub fn weights_into(&self, i: usize, w: &[f64], out: &mut [f64]) {
        (self.weights)(i, w, out)
    }

    pub fn weights_at(&self, i: usize, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.atoms.len()];
        self.weights_into(i, w, &mut out);
        out
    }

    /// The weight map viewed as a plain control law (control = weight
    /// vector), which is what the averaged problem consumes.
    pub fn weight_law(&self) -> ControlLaw {
        let weights = self.weights.clone();
        ControlLaw::from_fn(self.label.clone(), self.atoms.len(), move |i, w, out| {
            weights(i, w, out)
        })
    }
}

/// Dirac weights at the atom matched by the strict law's value.
///
/// Values must coincide exactly with an atom; anything else is a caller
/// configuration error and panics when the law is evaluated.
pub fn embed_strict(control: &ControlLaw, atoms: &[Vec<f64>]) -> RelaxedControlLaw {
    let base = control.clone();
    let atom_list = atoms.to_vec();
    let k = control.k;
    RelaxedControlLaw::from_weights_fn(
        format!("dirac:{}", base.label),
        atoms.to_vec(),
        move |i, w, out| {
            let mut v = vec![0.0; k];
            base.value_into(i, w, &mut v);
            let idx = atom_list
                .iter()
                .position(|a| a.as_slice() == v.as_slice())
                .unwrap_or_else(|| {
                    panic!(
                        "configuration error: control value {v:?} at node {i} is not in the atom list"
                    )
                });
            out.fill(0.0);
            out[idx] = 1.0;
        },
    )
}

/// Weight-averaged coefficients: a plain problem whose control argument is
/// the weight vector. Partials are averaged identically; everything is
/// linear in the weights by construction.
pub fn average_coefficients(spec: &ProblemSpec, q: &RelaxedControlLaw) -> ProblemSpec {
    let atoms = q.atoms.clone();
    let len = atoms.len();
    let base = spec.clone();
    let n = spec.dims.n;
    let d = spec.dims.d;

    macro_rules! averaged_field {
        ($method:ident, $size:expr) => {{
            let base = base.clone();
            let atoms = atoms.clone();
            let size = $size;
            Arc::new(move |t: f64, y: &[f64], z: &[f64], wts: &[f64], out: &mut [f64]| {
                let mut buf = vec![0.0; size];
                out.fill(0.0);
                for (a, wl) in atoms.iter().zip(wts.iter()) {
                    base.$method(t, y, z, a, &mut buf);
                    for (o, b) in out.iter_mut().zip(buf.iter()) {
                        *o += wl * b;
                    }
                }
            })
        }};
    }

    let running_cost = {
        let base = base.clone();
        let atoms = atoms.clone();
        Arc::new(move |t: f64, y: &[f64], z: &[f64], wts: &[f64]| {
            let mut acc = 0.0;
            for (a, wl) in atoms.iter().zip(wts.iter()) {
                acc += wl * base.running_cost(t, y, z, a);
            }
            acc
        })
    };

    ProblemSpec {
        dims: crate::model::Dimensions {
            n,
            d,
            k: len,
        },
        control_set: ControlSet::Box {
            lo: vec![0.0; len],
            hi: vec![1.0; len],
            resolution: 2,
        },
        label: format!("{}|{}", spec.label, q.label),
        drift: averaged_field!(drift, n),
        drift_dy: averaged_field!(drift_dy, n * n),
        drift_dz: averaged_field!(drift_dz, n * n * d),
        running_cost,
        running_cost_dy: averaged_field!(running_cost_dy, n),
        running_cost_dz: averaged_field!(running_cost_dz, n * d),
        terminal_cost: base.terminal_cost.clone(),
        terminal_cost_dy: base.terminal_cost_dy.clone(),
        terminal_data: base.terminal_data.clone(),
    }
}

/// Solve the relaxed BSDE: the averaged problem driven by the weight law.
pub fn solve_relaxed_bsde(
    spec: &ProblemSpec,
    q: &RelaxedControlLaw,
    bundle: &Arc<BrownianBundle>,
    config: &RegressionConfig,
) -> Result<Trajectory> {
    let avg = average_coefficients(spec, q);
    solve_bsde(&avg, &q.weight_law(), bundle, config)
}

pub fn relaxed_cost(spec: &ProblemSpec, q: &RelaxedControlLaw, traj: &Trajectory) -> CostEstimate {
    let avg = average_coefficients(spec, q);
    evaluate_cost(&avg, &q.weight_law(), traj)
}

/// `H^mu = sum_l w_l H(t, y, z, p, a_l)` — exactly linear in the weights.
pub fn relaxed_hamiltonian(
    spec: &ProblemSpec,
    t: f64,
    y: &[f64],
    z: &[f64],
    p: &[f64],
    weights: &[f64],
    atoms: &[Vec<f64>],
) -> f64 {
    let mut acc = 0.0;
    for (a, wl) in atoms.iter().zip(weights.iter()) {
        acc += wl * hamiltonian(spec, t, y, z, p, a);
    }
    acc
}

pub fn solve_relaxed_adjoint(
    spec: &ProblemSpec,
    q: &RelaxedControlLaw,
    traj: &Trajectory,
) -> Result<AdjointPath> {
    let avg = average_coefficients(spec, q);
    solve_adjoint(&avg, &q.weight_law(), traj)
}

/// A chattering level: the strict law that time-multiplexes the atoms in
/// proportion to the weights over blocks of `N/level` nodes.
#[derive(Clone)]
pub struct ChatteringSchedule {
    pub level: usize,
    pub law: ControlLaw,
    pub source_label: String,
}

/// Partition the grid into `level` blocks; within a block the node at
/// in-block fraction `s` takes the first atom whose cumulative weight
/// (time-frozen at the block's first node) exceeds `s`.
pub fn chattering_sequence(
    q: &RelaxedControlLaw,
    level: usize,
    grid: &TimeGrid,
) -> Result<ChatteringSchedule> {
    if level == 0 || grid.steps % level != 0 {
        return Err(Error::config(format!(
            "chattering level {level} must divide the {}-step grid",
            grid.steps
        )));
    }
    let block = grid.steps / level;
    let atoms = q.atoms.clone();
    let weights = q.clone();
    let k = atoms[0].len();
    let law = ControlLaw::from_fn(
        format!("chatter:{}@{}", q.label, level),
        k,
        move |i, w, out| {
            let block_start = (i / block) * block;
            let s = (i - block_start) as f64 / block as f64;
            let wts = weights.weights_at(block_start, w);
            let mut cum = 0.0;
            let mut pick = atoms.len() - 1;
            for (l, wl) in wts.iter().enumerate() {
                cum += wl;
                if cum > s {
                    pick = l;
                    break;
                }
            }
            out.copy_from_slice(&atoms[pick]);
        },
    );
    Ok(ChatteringSchedule {
        level,
        law,
        source_label: q.label.clone(),
    })
}

/// One diagnostic row: level, test-function name, gap.
#[derive(Debug, Clone, Serialize)]
pub struct StableRow {
    pub level: usize,
    pub test_fn: String,
    pub gap: f64,
}

pub type TestFunction = (String, Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>);

/// Weak-in-time convergence diagnostic: per path, the sup over nodes of the
/// running integral of `f(t, u^n_t) - sum_l w_l f(t, a_l)`; this block-
/// averaging error decays like 1/level for balanced constructions.
pub fn stable_convergence_diagnostic(
    q: &RelaxedControlLaw,
    levels: &[usize],
    test_fns: &[TestFunction],
    grid: &TimeGrid,
    bundle: &BrownianBundle,
) -> Result<Vec<StableRow>> {
    if levels.len() < 2 {
        return Err(Error::config("need at least 2 chattering levels"));
    }
    if test_fns.is_empty() {
        return Err(Error::config("need at least one test function"));
    }
    let m_paths = bundle.paths;
    let n_steps = grid.steps;
    let d = bundle.d;
    let mut rows = Vec::new();
    for &level in levels {
        let sched = chattering_sequence(q, level, grid)?;
        for (name, f) in test_fns {
            let mut mean_sup = 0.0;
            let mut w = vec![0.0; d];
            let mut v = vec![0.0; q.atoms[0].len()];
            for m in 0..m_paths {
                let mut running = 0.0;
                let mut sup = 0.0_f64;
                for i in 0..n_steps {
                    let t = grid.nodes[i];
                    for l in 0..d {
                        w[l] = bundle.w[(m, i, l)];
                    }
                    sched.law.value_into(i, &w, &mut v);
                    let strict_val = f(t, &v);
                    let wts = q.weights_at(i, &w);
                    let relaxed_val: f64 = q
                        .atoms
                        .iter()
                        .zip(wts.iter())
                        .map(|(a, wl)| wl * f(t, a))
                        .sum();
                    running += (strict_val - relaxed_val) * grid.dt;
                    sup = sup.max(running.abs());
                }
                mean_sup += sup;
            }
            rows.push(StableRow {
                level,
                test_fn: name.clone(),
                gap: mean_sup / m_paths as f64,
            });
        }
    }
    Ok(rows)
}

/// One row of the trajectory/cost stability table.
#[derive(Debug, Clone, Serialize)]
pub struct ChatteringRow {
    pub level: usize,
    pub y_moment: f64,
    pub z_moment: f64,
    pub cost_gap: f64,
}

/// Common-bundle comparison of chattering trajectories and costs against the
/// relaxed solution: `E sup_t |y^n - y^q|^2`, `E int |z^n - z^q|^2 dt`,
/// `|J(u^n) - J(q)|`.
pub fn chattering_convergence_study(
    spec: &ProblemSpec,
    q: &RelaxedControlLaw,
    levels: &[usize],
    bundle: &Arc<BrownianBundle>,
    config: &RegressionConfig,
) -> Result<Vec<ChatteringRow>> {
    let relaxed_traj = solve_relaxed_bsde(spec, q, bundle, config)?;
    let relaxed_value = relaxed_cost(spec, q, &relaxed_traj);
    let m_paths = relaxed_traj.paths();
    let n_steps = relaxed_traj.grid.steps;
    let n = relaxed_traj.n;
    let d = relaxed_traj.d;
    let dt = relaxed_traj.grid.dt;

    let mut rows = Vec::new();
    for &level in levels {
        let sched = chattering_sequence(q, level, &bundle.grid)?;
        let traj = solve_bsde(spec, &sched.law, bundle, config)?;
        let cost = evaluate_cost(spec, &sched.law, &traj);
        let mut y_moment = 0.0;
        let mut z_moment = 0.0;
        for m in 0..m_paths {
            let mut sup = 0.0_f64;
            for i in 0..=n_steps {
                let mut s = 0.0;
                for j in 0..n {
                    let diff = traj.y[(m, i, j)] - relaxed_traj.y[(m, i, j)];
                    s += diff * diff;
                }
                sup = sup.max(s);
            }
            y_moment += sup;
            let mut zint = 0.0;
            for i in 0..n_steps {
                let mut s = 0.0;
                for jl in 0..n * d {
                    let diff = traj.z[(m, i, jl)] - relaxed_traj.z[(m, i, jl)];
                    s += diff * diff;
                }
                zint += s * dt;
            }
            z_moment += zint;
        }
        rows.push(ChatteringRow {
            level,
            y_moment: y_moment / m_paths as f64,
            z_moment: z_moment / m_paths as f64,
            cost_gap: (cost.value - relaxed_value.value).abs(),
        });
    }
    Ok(rows)
}

/// `d(u, v) = E[dt x #{i : u != v}]`: the product-measure of the disagreement
/// set, estimated over the bundle. Exact metric axioms hold by construction.
pub fn control_distance(
    u: &ControlLaw,
    v: &ControlLaw,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
) -> f64 {
    let m_paths = bundle.paths;
    let n_steps = grid.steps;
    let d = bundle.d;
    let mut w = vec![0.0; d];
    let mut a = vec![0.0; u.k];
    let mut b = vec![0.0; v.k];
    let mut total = 0.0;
    for m in 0..m_paths {
        let mut count = 0usize;
        for i in 0..n_steps {
            for l in 0..d {
                w[l] = bundle.w[(m, i, l)];
            }
            u.value_into(i, &w, &mut a);
            v.value_into(i, &w, &mut b);
            if a != b {
                count += 1;
            }
        }
        total += grid.dt * count as f64;
    }
    total / m_paths as f64
}

/// Near-optimality structure at one chattering level.
#[derive(Debug, Clone, Serialize)]
pub struct NearOptimalityReport {
    pub level: usize,
    /// cost gap J(u^n) - J(q*), clamped at 0 when negative within noise
    pub epsilon: f64,
    pub epsilon_clamped: bool,
    pub cost_stderr: f64,
    pub hamiltonian: ViolationReport,
    /// max Hamiltonian gap / epsilon (infinite when epsilon = 0)
    pub gap_to_epsilon_ratio: f64,
}

/// For each level: chatter `q_star`, measure the cost gap `eps_n`, run the
/// strict necessary check on the chattered control with its own trajectory
/// and adjoint, and report the max-gap / eps_n ratio.
pub fn near_optimality_check(
    spec: &ProblemSpec,
    q_star: &RelaxedControlLaw,
    levels: &[usize],
    bundle: &Arc<BrownianBundle>,
    config: &RegressionConfig,
    ugrid: &[Vec<f64>],
) -> Result<Vec<NearOptimalityReport>> {
    let relaxed_traj = solve_relaxed_bsde(spec, q_star, bundle, config)?;
    let relaxed_value = relaxed_cost(spec, q_star, &relaxed_traj);

    let mut reports = Vec::new();
    for &level in levels {
        let sched = chattering_sequence(q_star, level, &bundle.grid)?;
        let traj = solve_bsde(spec, &sched.law, bundle, config)?;
        let cost = evaluate_cost(spec, &sched.law, &traj);
        let raw = cost.value - relaxed_value.value;
        let stderr = cost.stderr + relaxed_value.stderr;
        let clamped = raw < 0.0;
        let epsilon = if clamped { 0.0 } else { raw };
        let adj = solve_adjoint(spec, &sched.law, &traj)?;
        let ham = check_necessary(spec, &sched.law, &traj, &adj, ugrid, None)?;
        let ratio = if epsilon > 0.0 {
            ham.max_gap / epsilon
        } else {
            f64::INFINITY
        };
        reports.push(NearOptimalityReport {
            level,
            epsilon,
            epsilon_clamped: clamped,
            cost_stderr: stderr,
            hamiltonian: ham,
            gap_to_epsilon_ratio: ratio,
        });
    }
    Ok(reports)
}

/// Relaxed necessary condition: gap between the best atom and the weighted
/// Hamiltonian (vertex optimality makes max over P(U) = max over atoms),
/// plus the support condition (weight mass within tolerance of the max).
pub fn check_relaxed_necessary(
    spec: &ProblemSpec,
    q: &RelaxedControlLaw,
    traj: &Trajectory,
    adj: &AdjointPath,
    ugrid: &[Vec<f64>],
    tolerance: Option<f64>,
) -> Result<ViolationReport> {
    if ugrid.is_empty() {
        return Err(Error::config("empty U grid"));
    }
    let m_paths = traj.paths();
    let n_steps = traj.grid.steps;
    let d = traj.d;
    let bundle = &traj.bundle;

    let mut gaps = Vec::with_capacity(m_paths * n_steps);
    let mut per_path = vec![0.0; m_paths];
    let mut worst = (0usize, 0usize, ugrid[0].clone());
    let mut worst_gap = -1.0;
    let mut support_acc = 0.0;
    let mut w = vec![0.0; d];
    for m in 0..m_paths {
        let mut acc = 0.0;
        for i in 0..n_steps {
            let t = traj.grid.nodes[i];
            for l in 0..d {
                w[l] = bundle.w[(m, i, l)];
            }
            let y = traj.y_at(m, i);
            let z = traj.z_at(m, i);
            let p = adj.p_at(m, i);
            let wts = q.weights_at(i, &w);
            let held = relaxed_hamiltonian(spec, t, y, z, p, &wts, &q.atoms);
            let mut best = f64::NEG_INFINITY;
            let mut best_atom = 0usize;
            for (ai, a) in ugrid.iter().enumerate() {
                let hv = hamiltonian(spec, t, y, z, p, a);
                if hv > best {
                    best = hv;
                    best_atom = ai;
                }
            }
            let gap = (best - held).max(0.0);
            if gap > worst_gap {
                worst_gap = gap;
                worst = (i, m, ugrid[best_atom].clone());
            }
            gaps.push(gap);
            acc += gap;

            // support condition: mass on atoms whose H is within tol of max
            let tol_here = tolerance.unwrap_or(1e-3);
            let mass: f64 = q
                .atoms
                .iter()
                .zip(wts.iter())
                .map(|(a, wl)| {
                    if best - hamiltonian(spec, t, y, z, p, a) <= tol_here {
                        *wl
                    } else {
                        0.0
                    }
                })
                .sum();
            support_acc += mass;
        }
        per_path[m] = acc / n_steps as f64;
    }
    let support_mass = support_acc / (m_paths * n_steps) as f64;
    Ok(build_report(gaps, per_path, worst, tolerance, Some(support_mass)))
}

/// Relaxed sufficiency: exact linearity of the relaxed Hamiltonian in the
/// weights, and midpoint concavity of `(y, z) -> H^q`.
#[derive(Debug, Clone, Serialize)]
pub struct RelaxedSufficiencyReport {
    pub linearity_defect: f64,
    pub h_concavity_defect: f64,
    pub samples: usize,
    pub pass: bool,
}

pub fn check_relaxed_sufficient(
    spec: &ProblemSpec,
    samples: usize,
    seed: u64,
) -> Result<RelaxedSufficiencyReport> {
    use rand::Rng;
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x2e1a_77d4_90cb_5a13);
    let normal = rand_distr::StandardNormal;
    let n = spec.dims.n;
    let d = spec.dims.d;
    let atoms = spec.control_set.grid_atoms();
    let len = atoms.len();

    let mut lin_defect = 0.0_f64;
    let mut conc_defect = f64::NEG_INFINITY;
    for _ in 0..samples {
        let mut draw = |len: usize, scale: f64| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    let x: f64 = normal.sample(&mut rng);
                    scale * x
                })
                .collect()
        };
        let y1 = draw(n, 1.5);
        let y2 = draw(n, 1.5);
        let z1 = draw(n * d, 1.5);
        let z2 = draw(n * d, 1.5);
        let p = draw(n, 2.0);
        let t: f64 = rng.gen::<f64>();

        let simplex = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let raw: Vec<f64> = (0..len).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        };
        let w1 = simplex(&mut rng);
        let w2 = simplex(&mut rng);
        let alpha: f64 = rng.gen();
        let wm: Vec<f64> = w1
            .iter()
            .zip(&w2)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();

        // linearity in the weights (exact algebraic identity)
        let hm = relaxed_hamiltonian(spec, t, &y1, &z1, &p, &wm, &atoms);
        let h1 = relaxed_hamiltonian(spec, t, &y1, &z1, &p, &w1, &atoms);
        let h2 = relaxed_hamiltonian(spec, t, &y1, &z1, &p, &w2, &atoms);
        lin_defect = lin_defect.max((hm - (alpha * h1 + (1.0 - alpha) * h2)).abs());

        // midpoint concavity in (y, z) at frozen weights
        let ym: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| 0.5 * (a + b)).collect();
        let zm: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * (a + b)).collect();
        let ha = relaxed_hamiltonian(spec, t, &y1, &z1, &p, &w1, &atoms);
        let hb = relaxed_hamiltonian(spec, t, &y2, &z2, &p, &w1, &atoms);
        let hmid = relaxed_hamiltonian(spec, t, &ym, &zm, &p, &w1, &atoms);
        conc_defect = conc_defect.max(0.5 * (ha + hb) - hmid);
    }

    Ok(RelaxedSufficiencyReport {
        linearity_defect: lin_defect,
        h_concavity_defect: conc_defect,
        samples,
        pass: lin_defect <= 1e-12 && conc_defect <= 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid, sample_brownian, Dimensions};
    use crate::problems;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn bundle(n_steps: usize, m: usize, seed: u64) -> Arc<BrownianBundle> {
        let grid = build_grid(1.0, n_steps).unwrap();
        let dims = Dimensions::new(1, 1, 1).unwrap();
        Arc::new(sample_brownian(&grid, &dims, m, seed).unwrap())
    }

    fn p2_half() -> (ProblemSpec, RelaxedControlLaw) {
        let p2 = problems::get_problem("P2").unwrap();
        let atoms = p2.spec.control_set.grid_atoms();
        let q = RelaxedControlLaw::constant_weights(atoms, vec![0.5, 0.5]).unwrap();
        (p2.spec, q)
    }

    #[test]
    fn dirac_embedding_reproduces_strict_pipeline() {
        let p2 = problems::get_problem("P2").unwrap();
        let atoms = p2.spec.control_set.grid_atoms();
        let law = ControlLaw::constant(vec![1.0]);
        let q = embed_strict(&law, &atoms);
        let b = bundle(32, 1000, 7);
        let cfg = RegressionConfig::default();

        let strict = solve_bsde(&p2.spec, &law, &b, &cfg).unwrap();
        let relaxed = solve_relaxed_bsde(&p2.spec, &q, &b, &cfg).unwrap();
        for m in (0..1000).step_by(53) {
            for i in 0..=32 {
                assert!((strict.y[(m, i, 0)] - relaxed.y[(m, i, 0)]).abs() <= 1e-12);
                assert!((strict.z[(m, i, 0)] - relaxed.z[(m, i, 0)]).abs() <= 1e-12);
            }
        }
        let cs = evaluate_cost(&p2.spec, &law, &strict);
        let cr = relaxed_cost(&p2.spec, &q, &relaxed);
        assert!((cs.value - cr.value).abs() <= 1e-12);

        let adj_s = solve_adjoint(&p2.spec, &law, &strict).unwrap();
        let adj_r = solve_relaxed_adjoint(&p2.spec, &q, &relaxed).unwrap();
        for m in (0..1000).step_by(53) {
            for i in 0..=32 {
                assert!((adj_s.p[(m, i, 0)] - adj_r.p[(m, i, 0)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "configuration error")]
    fn embed_rejects_non_atom_values() {
        let q = embed_strict(&ControlLaw::constant(vec![0.3]), &[vec![-1.0], vec![1.0]]);
        q.weights_at(0, &[0.0]);
    }

    #[test]
    fn averaged_coefficients_oddity_and_linearity() {
        let (spec, q) = p2_half();
        let avg = average_coefficients(&spec, &q);
        let mut out = vec![0.0];
        // (1/2, 1/2) on {-1, +1}: averaged drift vanishes
        avg.drift(0.3, &[0.7], &[0.0], &q.weights_at(0, &[0.0]), &mut out);
        assert_eq!(out[0], 0.0);

        // linearity in the weight vector, exact
        let w1 = vec![0.25, 0.75];
        let w2 = vec![0.8, 0.2];
        let alpha = 0.3;
        let wm: Vec<f64> = w1
            .iter()
            .zip(&w2)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let mut o1 = vec![0.0];
        let mut o2 = vec![0.0];
        let mut om = vec![0.0];
        avg.drift(0.1, &[0.4], &[0.0], &w1, &mut o1);
        avg.drift(0.1, &[0.4], &[0.0], &w2, &mut o2);
        avg.drift(0.1, &[0.4], &[0.0], &wm, &mut om);
        assert!((om[0] - (alpha * o1[0] + (1.0 - alpha) * o2[0])).abs() <= 1e-15);
    }

    #[test]
    fn relaxed_p2_half_is_exactly_zero() {
        let (spec, q) = p2_half();
        let b = bundle(64, 2000, 7);
        let traj = solve_relaxed_bsde(&spec, &q, &b, &RegressionConfig::default()).unwrap();
        let c = relaxed_cost(&spec, &q, &traj);
        assert!(c.value.abs() <= 1e-10, "relaxed value {}", c.value);
        for m in (0..2000).step_by(111) {
            for i in 0..=64 {
                assert!(traj.y[(m, i, 0)].abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relaxed_p2_three_quarters_closed_form() {
        // weights (3/4, 1/4): averaged drift -1/2, y_i = (N-i) dt / 2 exactly
        let p2 = problems::get_problem("P2").unwrap();
        let atoms = p2.spec.control_set.grid_atoms();
        let q = RelaxedControlLaw::constant_weights(atoms, vec![0.75, 0.25]).unwrap();
        let b = bundle(64, 800, 7);
        let traj = solve_relaxed_bsde(&p2.spec, &q, &b, &RegressionConfig::default()).unwrap();
        let dt = 1.0 / 64.0;
        for i in (0..=64).step_by(8) {
            let expect = 0.5 * (64 - i) as f64 * dt;
            assert!((traj.y[(0, i, 0)] - expect).abs() <= 1e-10, "i={i}");
        }
        let c = relaxed_cost(&p2.spec, &q, &traj);
        // continuum value T^3/12; discrete left sum = (1/4) dt^3 sum j^2
        let exact = 0.25 * dt.powi(3) * (1..=64).map(|j| (j * j) as f64).sum::<f64>();
        assert!((c.value - exact).abs() <= 1e-12);
        assert!((c.value - 1.0 / 12.0).abs() <= 0.01);

        // relaxed adjoint follows the scalar recursion p_{i+1} = p_i + 2 y_i dt
        let adj = solve_relaxed_adjoint(&p2.spec, &q, &traj).unwrap();
        let mut expect_p = 0.0;
        for i in 0..64 {
            expect_p += 2.0 * (0.5 * (64 - i) as f64 * dt) * dt;
        }
        assert!((adj.p[(5, 64, 0)] - expect_p).abs() <= 1e-10);
    }

    #[test]
    fn relaxed_hamiltonian_odd_average() {
        // (1/2, 1/2) on {-1, +1} with b = v and no v-dependent cost: the
        // drift term averages out for every p
        let p2 = problems::get_problem("P2").unwrap();
        let atoms = p2.spec.control_set.grid_atoms();
        for pv in [-3.0, 0.0, 2.5] {
            let h = relaxed_hamiltonian(&p2.spec, 0.2, &[0.0], &[0.0], &[pv], &[0.5, 0.5], &atoms);
            assert_eq!(h, 0.0);
        }
        // Dirac weights reproduce the strict Hamiltonian exactly
        let hd = relaxed_hamiltonian(&p2.spec, 0.2, &[0.4], &[0.0], &[1.5], &[0.0, 1.0], &atoms);
        assert_eq!(hd, hamiltonian(&p2.spec, 0.2, &[0.4], &[0.0], &[1.5], &[1.0]));
    }

    #[test]
    fn relaxed_hamiltonian_vertex_optimality() {
        use rand::Rng;
        use rand::SeedableRng;
        let p2 = problems::get_problem("P2").unwrap();
        let atoms = p2.spec.control_set.grid_atoms();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let y = [rng.gen::<f64>() * 2.0 - 1.0];
            let z = [rng.gen::<f64>() * 2.0 - 1.0];
            let p = [rng.gen::<f64>() * 4.0 - 2.0];
            let atom_max = atoms
                .iter()
                .map(|a| hamiltonian(&p2.spec, 0.5, &y, &z, &p, a))
                .fold(f64::NEG_INFINITY, f64::max);
            for _ in 0..20 {
                let raw: Vec<f64> = (0..atoms.len()).map(|_| rng.gen::<f64>() + 1e-9).collect();
                let s: f64 = raw.iter().sum();
                let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
                let hm = relaxed_hamiltonian(&p2.spec, 0.5, &y, &z, &p, &w, &atoms);
                assert!(hm <= atom_max + 1e-12);
            }
        }
    }

    #[test]
    fn chattering_block_structure() {
        let (_, q) = p2_half();
        let grid = build_grid(1.0, 64).unwrap();
        let sched = chattering_sequence(&q, 4, &grid).unwrap();
        // blocks of 16: 8 nodes of -1 then 8 nodes of +1
        for i in 0..64 {
            let in_block = i % 16;
            let expect = if in_block < 8 { -1.0 } else { 1.0 };
            assert_eq!(sched.law.value(i, &[0.0])[0], expect, "node {i}");
        }
        // Dirac source: constant at its atom for every level
        let dq = RelaxedControlLaw::constant_weights(q.atoms.clone(), vec![1.0, 0.0]).unwrap();
        for level in [1, 2, 4, 8] {
            let s = chattering_sequence(&dq, level, &grid).unwrap();
            for i in 0..64 {
                assert_eq!(s.law.value(i, &[0.0])[0], -1.0);
            }
        }
        // level must divide N
        assert!(chattering_sequence(&q, 3, &grid).is_err());
    }

    #[test]
    fn chattering_occupation_accounting() {
        let p2 = problems::get_problem("P2").unwrap();
        let atoms = p2.spec.control_set.grid_atoms();
        let grid = build_grid(1.0, 64).unwrap();
        for weights in [vec![0.5, 0.5], vec![0.75, 0.25], vec![0.6, 0.4]] {
            let q = RelaxedControlLaw::constant_weights(atoms.clone(), weights.clone()).unwrap();
            let level = 4;
            let sched = chattering_sequence(&q, level, &grid).unwrap();
            let mut occ = 0.0;
            for i in 0..64 {
                if sched.law.value(i, &[0.0])[0] == -1.0 {
                    occ += grid.dt;
                }
            }
            let bound = grid.dt * level as f64;
            assert!(
                (occ - weights[0]).abs() <= bound,
                "weights {weights:?}: occupation {occ}"
            );
        }
    }

    #[test]
    fn stable_diagnostic_rows() {
        let (_, q) = p2_half();
        // level 64 needs blocks of >= 2 nodes for an even split
        let grid = build_grid(1.0, 128).unwrap();
        let dims = Dimensions::new(1, 1, 1).unwrap();
        let b = sample_brownian(&grid, &dims, 50, 7).unwrap();
        let fns: Vec<TestFunction> = vec![
            ("a".into(), Arc::new(|_t: f64, a: &[f64]| a[0])),
            ("const".into(), Arc::new(|_t: f64, _a: &[f64]| 2.0)),
        ];
        let rows = stable_convergence_diagnostic(&q, &[4, 16, 64], &fns, &grid, &b).unwrap();
        // f independent of a: zero gap at every level
        for r in rows.iter().filter(|r| r.test_fn == "const") {
            assert_eq!(r.gap, 0.0);
        }
        // f(t, a) = a: exact block-averaging error T/(2 level)
        let a_gaps: Vec<f64> = rows.iter().filter(|r| r.test_fn == "a").map(|r| r.gap).collect();
        assert!((a_gaps[0] - 0.125).abs() <= 1e-12);
        assert!((a_gaps[1] - 0.03125).abs() <= 1e-12);
        assert!(a_gaps[0] / a_gaps[1] >= 2.0 && a_gaps[1] / a_gaps[2] >= 2.0);

        // Dirac source: zero gap for every f
        let dq = RelaxedControlLaw::constant_weights(q.atoms.clone(), vec![0.0, 1.0]).unwrap();
        let rows = stable_convergence_diagnostic(&dq, &[4, 16], &fns, &grid, &b).unwrap();
        for r in rows {
            assert_eq!(r.gap, 0.0);
        }
    }

    #[test]
    fn chattering_study_on_p2() {
        let (spec, q) = p2_half();
        let b = bundle(128, 1000, 7);
        let rows =
            chattering_convergence_study(&spec, &q, &[4, 16, 64], &b, &RegressionConfig::default())
                .unwrap();
        for w in rows.windows(2) {
            assert!(w[1].y_moment <= 1.1 * w[0].y_moment);
            assert!(w[1].z_moment <= 1.1 * w[0].z_moment);
            assert!(w[1].cost_gap <= 1.1 * w[0].cost_gap);
        }
        assert!(rows[2].y_moment <= 1e-2);
        // triangle wave of amplitude T/(2n): sup^2 = (16 dt)^2 at level 4
        let dt: f64 = 1.0 / 128.0;
        assert!((rows[0].y_moment - (16.0 * dt).powi(2)).abs() <= 1e-10);

        // Dirac source: all columns zero
        let dq = RelaxedControlLaw::constant_weights(q.atoms.clone(), vec![1.0, 0.0]).unwrap();
        let rows =
            chattering_convergence_study(&spec, &dq, &[4, 16], &b, &RegressionConfig::default())
                .unwrap();
        for r in rows {
            assert!(r.y_moment <= 1e-24);
            assert!(r.cost_gap <= 1e-12);
        }
    }

    #[test]
    fn metric_axioms_and_spike_distance() {
        let grid = build_grid(1.0, 64).unwrap();
        let dims = Dimensions::new(1, 1, 1).unwrap();
        let b = sample_brownian(&grid, &dims, 100, 7).unwrap();
        let u = ControlLaw::constant(vec![-1.0]);
        let v = ControlLaw::constant(vec![1.0]);
        assert_eq!(control_distance(&u, &u, &grid, &b), 0.0);
        assert_eq!(control_distance(&u, &v, &grid, &b), 1.0);
        assert_eq!(
            control_distance(&u, &v, &grid, &b),
            control_distance(&v, &u, &grid, &b)
        );

        // grid-aligned spike of width theta: distance exactly theta
        let p2 = problems::get_problem("P2").unwrap();
        let spike = crate::maximum_principle::SpikeSpec {
            tau: 0.25,
            width: 0.25,
            replacement: vec![1.0],
        };
        let spiked =
            crate::maximum_principle::spike_perturb(&u, &spike, &grid, &p2.spec.control_set)
                .unwrap();
        assert_eq!(control_distance(&u, &spiked, &grid, &b), 0.25);
    }

    proptest! {
        #[test]
        fn metric_triangle_inequality(pattern_a in proptest::collection::vec(0usize..3, 8),
                                      pattern_b in proptest::collection::vec(0usize..3, 8),
                                      pattern_c in proptest::collection::vec(0usize..3, 8)) {
            let grid = build_grid(1.0, 8).unwrap();
            let dims = Dimensions::new(1, 1, 1).unwrap();
            let b = sample_brownian(&grid, &dims, 20, 5).unwrap();
            let atoms = [-1.0, 0.0, 1.0];
            let mk = |pat: Vec<usize>| {
                ControlLaw::from_fn("pat", 1, move |i, _w, out| {
                    out[0] = atoms[pat[i.min(7)]];
                })
            };
            let (ua, ub, uc) = (mk(pattern_a), mk(pattern_b), mk(pattern_c));
            let dab = control_distance(&ua, &ub, &grid, &b);
            let dbc = control_distance(&ub, &uc, &grid, &b);
            let dac = control_distance(&ua, &uc, &grid, &b);
            prop_assert!(dac <= dab + dbc + 1e-15);
            prop_assert!((control_distance(&ua, &ub, &grid, &b) - dab).abs() == 0.0);
        }

        #[test]
        fn relaxed_linearity_in_weights(w1 in 0.0f64..1.0, yv in -2.0f64..2.0, pv in -2.0f64..2.0) {
            let p2 = problems::get_problem("P2").unwrap();
            let atoms = p2.spec.control_set.grid_atoms();
            let wts1 = vec![w1, 1.0 - w1];
            let wts2 = vec![1.0 - w1, w1];
            let alpha = 0.4;
            let wm: Vec<f64> = wts1.iter().zip(&wts2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let h1 = relaxed_hamiltonian(&p2.spec, 0.3, &[yv], &[0.1], &[pv], &wts1, &atoms);
            let h2 = relaxed_hamiltonian(&p2.spec, 0.3, &[yv], &[0.1], &[pv], &wts2, &atoms);
            let hm = relaxed_hamiltonian(&p2.spec, 0.3, &[yv], &[0.1], &[pv], &wm, &atoms);
            prop_assert!((hm - (alpha * h1 + (1.0 - alpha) * h2)).abs() <= 1e-12);
        }
    }

    #[test]
    fn relaxed_necessary_on_p2() {
        let (spec, q) = p2_half();
        let b = bundle(64, 1000, 7);
        let cfg = RegressionConfig::default();
        let traj = solve_relaxed_bsde(&spec, &q, &b, &cfg).unwrap();
        let adj = solve_relaxed_adjoint(&spec, &q, &traj).unwrap();
        let atoms = spec.control_set.grid_atoms();
        let rep = check_relaxed_necessary(&spec, &q, &traj, &adj, &atoms, None).unwrap();
        assert!(rep.pass, "mean gap {}", rep.mean_gap);
        assert!(rep.mean_gap <= 1e-12);
        assert!(rep.support_mass.unwrap() >= 0.999);

        // Dirac at +1 fails: p_t < 0 makes -1 strictly better on (0, T]
        let dq = RelaxedControlLaw::constant_weights(q.atoms.clone(), vec![0.0, 1.0]).unwrap();
        let traj = solve_relaxed_bsde(&spec, &dq, &b, &cfg).unwrap();
        let adj = solve_relaxed_adjoint(&spec, &dq, &traj).unwrap();
        let rep = check_relaxed_necessary(&spec, &dq, &traj, &adj, &atoms, None).unwrap();
        assert!(!rep.pass);
        assert!(rep.mean_gap >= 10.0 * rep.tolerance);
    }

    #[test]
    fn relaxed_check_matches_strict_for_dirac() {
        let p1 = problems::get_problem("P1").unwrap();
        let atoms = p1.spec.control_set.grid_atoms();
        let law = ControlLaw::constant(vec![0.0]);
        let q = embed_strict(&law, &atoms);
        let b = bundle(32, 500, 9);
        let cfg = RegressionConfig::default();

        let traj = solve_bsde(&p1.spec, &law, &b, &cfg).unwrap();
        let adj = solve_adjoint(&p1.spec, &law, &traj).unwrap();
        let strict = check_necessary(&p1.spec, &law, &traj, &adj, &atoms, None).unwrap();

        let rtraj = solve_relaxed_bsde(&p1.spec, &q, &b, &cfg).unwrap();
        let radj = solve_relaxed_adjoint(&p1.spec, &q, &rtraj).unwrap();
        let relaxed = check_relaxed_necessary(&p1.spec, &q, &rtraj, &radj, &atoms, None).unwrap();

        assert!((strict.mean_gap - relaxed.mean_gap).abs() <= 1e-12);
        assert!((strict.max_gap - relaxed.max_gap).abs() <= 1e-12);
        assert_eq!(strict.pass, relaxed.pass);
    }

    #[test]
    fn near_optimality_structure() {
        let (spec, q) = p2_half();
        let b = bundle(128, 500, 7);
        let cfg = RegressionConfig::default();
        let atoms = spec.control_set.grid_atoms();
        let reports = near_optimality_check(&spec, &q, &[4, 16, 64], &b, &cfg, &atoms).unwrap();
        // both eps_n and the Hamiltonian gap decrease with the level
        for w in reports.windows(2) {
            assert!(w[1].epsilon < w[0].epsilon);
            assert!(w[1].hamiltonian.max_gap < w[0].hamiltonian.max_gap);
        }

        // degenerate case: control-independent Hamiltonian, everything 0
        let flat = problems::custom_scalar_spec(
            "flat",
            |_t, _y, _z, _v| 0.0,
            |_y| 0.0,
            |_t, _y, _z, _v| 0.0,
            |_w| 0.0,
            ControlSet::Atoms(vec![vec![-1.0], vec![1.0]]),
        );
        let fq = RelaxedControlLaw::constant_weights(
            vec![vec![-1.0], vec![1.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let fr = near_optimality_check(&flat, &fq, &[4], &b, &cfg, &[vec![-1.0], vec![1.0]])
            .unwrap();
        assert!(fr[0].epsilon <= 3.0 * fr[0].cost_stderr + 1e-12);
        assert!(fr[0].hamiltonian.max_gap <= 1e-12);
    }

    #[test]
    fn relaxed_sufficiency_signs() {
        let p2 = problems::get_problem("P2").unwrap();
        let rep = check_relaxed_sufficient(&p2.spec, 300, 7).unwrap();
        assert!(rep.pass, "lin {} conc {}", rep.linearity_defect, rep.h_concavity_defect);

        let neg = problems::p2_negated_running_cost();
        let rep = check_relaxed_sufficient(&neg, 300, 7).unwrap();
        assert!(!rep.pass);
        assert!(rep.h_concavity_defect > 1e-9);
    }
}
