//! The acceptance-criteria registry behind the `suite` command.
//!
//! Each criterion is a self-contained check with pinned parameters and
//! tolerances; `suite` runs the registry in order and prints one PASS/FAIL
//! line per criterion. The registry is the single source of truth: the
//! integration tests iterate it, so a criterion cannot exist without being
//! wired in here.
//!
//! C5 is expected to fail: P0's optimum sits on a singular arc (v = 0 with
//! p identically 0), which a block-enumeration oracle can only approach to
//! its block resolution; the leftover adjoint tail keeps the mean
//! Hamiltonian gap near 4e-2 against the 1e-3 tolerance for any enumerable
//! block count. The check and its tolerance are implemented as stated and
//! the red verdict is reported honestly.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::adjoint::{hamiltonian, hamiltonian_partials, solve_adjoint};
use crate::error::{Error, Result};
use crate::export::{write_csv, write_json, Meta};
use crate::maximum_principle::{
    check_necessary, check_sufficient_assumptions, spike_convergence_study, spike_perturb,
    SpikeSpec,
};
use crate::model::{
    build_grid, rel_err, sample_brownian, validate_spec, BrownianBundle, ControlLaw, Dimensions,
};
use crate::problems::{brute_force_optimum, get_problem, p2_negated_running_cost};
use crate::regression::RegressionConfig;
use crate::relaxed::{
    chattering_convergence_study, chattering_sequence, check_relaxed_necessary, control_distance,
    embed_strict, near_optimality_check, relaxed_cost, solve_relaxed_adjoint, solve_relaxed_bsde,
    stable_convergence_diagnostic, RelaxedControlLaw, TestFunction,
};
use crate::restriction::{augment_problem, eta_zero, restricted_cost};
use crate::solver::{evaluate_cost, solve_bsde};

pub const CRITERION_IDS: [u8; 14] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14];

pub fn criterion_title(id: u8) -> &'static str {
    match id {
        1 => "BSDE solver vs closed forms (P3a, P3b)",
        2 => "cost-restriction identity on common bundles",
        3 => "Hamiltonian reduction and adjoint x-component",
        4 => "spike perturbation second-order rates (P1)",
        5 => "strict necessary condition on P0 (oracle passes, constants fail)",
        6 => "sufficiency hypotheses (P2 passes, negated-h mutant fails)",
        7 => "chattering stability columns (P2)",
        8 => "stable-convergence diagnostic decay (P2)",
        9 => "adjoint convergence along chattering levels (P2)",
        10 => "relaxed necessary condition and Dirac consistency (P2)",
        11 => "near-optimality structure (P2)",
        12 => "control-metric axioms and exact spike distance",
        13 => "analytic partials vs central finite differences",
        14 => "byte-identical artifacts on replay",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub details: String,
}

#[derive(Debug, Clone)]
pub struct SuiteContext {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl SuiteContext {
    pub fn new(seed: u64, out_dir: Option<PathBuf>) -> Self {
        SuiteContext { seed, out_dir }
    }

    fn artifact(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }
}

const N_DEFAULT: usize = 64;
const M_DEFAULT: usize = 20_000;
/// Chattering criteria need blocks of >= 2 nodes at level 64.
const N_CHATTER: usize = 128;

fn scalar_bundle(seed: u64, steps: usize, paths: usize) -> Result<Arc<BrownianBundle>> {
    let grid = build_grid(1.0, steps)?;
    let dims = Dimensions::new(1, 1, 1)?;
    Ok(Arc::new(sample_brownian(&grid, &dims, paths, seed)?))
}

fn p2_uniform() -> Result<(crate::model::ProblemSpec, RelaxedControlLaw)> {
    let p2 = get_problem("P2")?;
    let atoms = p2.spec.control_set.grid_atoms();
    let q = RelaxedControlLaw::constant_weights(atoms, vec![0.5, 0.5])?;
    Ok((p2.spec, q))
}

pub fn run_criterion(id: u8, ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let run = match id {
        1 => c01_closed_forms,
        2 => c02_restriction_identity,
        3 => c03_hamiltonian_reduction,
        4 => c04_spike_rates,
        5 => c05_strict_necessary,
        6 => c06_sufficiency,
        7 => c07_chattering_stability,
        8 => c08_stable_convergence,
        9 => c09_adjoint_convergence,
        10 => c10_relaxed_necessary,
        11 => c11_near_optimality,
        12 => c12_metric,
        13 => c13_gradients,
        14 => c14_determinism,
        other => return Err(Error::config(format!("unknown criterion {other}"))),
    };
    run(ctx)
}

/// Run the full registry, printing one line per criterion.
pub fn run_suite(ctx: &SuiteContext, quiet: bool) -> Result<Vec<CriterionOutcome>> {
    let mut outcomes = Vec::with_capacity(CRITERION_IDS.len());
    for id in CRITERION_IDS {
        let outcome = run_criterion(id, ctx)?;
        if !quiet {
            println!(
                "C{:02} {} — {} [{}]",
                outcome.id,
                if outcome.passed { "PASS" } else { "FAIL" },
                outcome.title,
                outcome.details
            );
        }
        outcomes.push(outcome);
    }
    if let Some(dir) = &ctx.out_dir {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &RegressionConfig::default());
        #[derive(Serialize)]
        struct SuiteArtifact<'a> {
            outcomes: &'a [CriterionOutcome],
        }
        write_json(&dir.join("suite.json"), &meta, &SuiteArtifact { outcomes: &outcomes })?;
    }
    Ok(outcomes)
}

// --------------------------------------------------------------------- C1

#[derive(Serialize)]
struct ClosedFormRow {
    problem: String,
    rmse_y_max: f64,
    rmse_z_max: f64,
    rmse_y_ensemble: f64,
    rmse_z_ensemble: f64,
}

fn c01_closed_forms(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let bundle = scalar_bundle(ctx.seed, N_DEFAULT, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let law = ControlLaw::constant(vec![0.0]);
    let mut rows = Vec::new();
    let mut passed = true;
    let mut details = String::new();
    for name in ["P3a", "P3b"] {
        let p = get_problem(name)?;
        let traj = solve_bsde(&p.spec, &law, &bundle, &cfg)?;
        let n_steps = traj.grid.steps;
        let m_paths = traj.paths();
        let mut max_y = 0.0_f64;
        let mut max_z = 0.0_f64;
        let mut sum_y = 0.0;
        let mut sum_z = 0.0;
        for i in 0..=n_steps {
            let t = traj.grid.nodes[i];
            let mut sy = 0.0;
            let mut sz = 0.0;
            for m in 0..m_paths {
                let w = traj.bundle.w[(m, i, 0)];
                let (y_true, z_true) = crate::problems::analytic_solution(name, t, &[w])?;
                sy += (traj.y[(m, i, 0)] - y_true[0]).powi(2);
                if i < n_steps {
                    sz += (traj.z[(m, i, 0)] - z_true[0]).powi(2);
                }
            }
            max_y = max_y.max((sy / m_paths as f64).sqrt());
            sum_y += sy / m_paths as f64;
            if i < n_steps {
                max_z = max_z.max((sz / m_paths as f64).sqrt());
                sum_z += sz / m_paths as f64;
            }
        }
        let ens_y = (sum_y / (n_steps + 1) as f64).sqrt();
        let ens_z = (sum_z / n_steps as f64).sqrt();
        passed &= max_y <= 0.02 && max_z <= 0.05;
        details.push_str(&format!(
            "{name}: rmse_y={max_y:.4} (<=0.02), rmse_z={max_z:.4} (<=0.05); "
        ));
        rows.push(ClosedFormRow {
            problem: name.into(),
            rmse_y_max: max_y,
            rmse_z_max: max_z,
            rmse_y_ensemble: ens_y,
            rmse_z_ensemble: ens_z,
        });
    }
    if let Some(path) = ctx.artifact("c01_closed_forms.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &RegressionConfig::default());
        #[derive(Serialize)]
        struct A {
            rows: Vec<ClosedFormRow>,
        }
        write_json(&path, &meta, &A { rows })?;
    }
    Ok(CriterionOutcome {
        id: 1,
        title: criterion_title(1),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C2

#[derive(Serialize)]
struct RestrictionRow {
    problem: String,
    control: String,
    cost: f64,
    restricted: f64,
    diff: f64,
    tolerance: f64,
    pass: bool,
}

fn c02_restriction_identity(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let bundle = scalar_bundle(ctx.seed, N_DEFAULT, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let mut rows = Vec::new();
    let mut passed = true;

    for name in ["P0", "P1", "P2"] {
        let p = get_problem(name)?;
        let mut controls: Vec<(String, ControlLaw)> = vec![
            ("const:+1".into(), ControlLaw::constant(vec![1.0])),
            ("const:-1".into(), ControlLaw::constant(vec![-1.0])),
        ];
        // the oracle's own precondition excludes P1 (stochastic terminal data)
        match brute_force_optimum(&p.spec, p.horizon, p.oracle_blocks, &p.oracle_atoms, p.oracle_fine)
        {
            Ok(sol) => controls.push((format!("oracle:B{}", sol.blocks), sol.law(&bundle.grid))),
            Err(Error::OracleInapplicable(_)) => {}
            Err(e) => return Err(e),
        }

        for (label, law) in controls {
            let traj = solve_bsde(&p.spec, &law, &bundle, &cfg)?;
            let j = evaluate_cost(&p.spec, &law, &traj);
            let aug = augment_problem(&p.spec, eta_zero());
            let atraj = solve_bsde(&aug.spec, &law, &bundle, &cfg)?;
            let jt = restricted_cost(&aug, &law, &atraj)?;
            let tol = 3.0 * (j.stderr + jt.stderr) + 1e-12;
            let ok = (j.value - jt.value).abs() <= tol;
            passed &= ok;
            rows.push(RestrictionRow {
                problem: name.into(),
                control: label,
                cost: j.value,
                restricted: jt.value,
                diff: (j.value - jt.value).abs(),
                tolerance: tol,
                pass: ok,
            });
        }
    }
    let worst = rows
        .iter()
        .map(|r| r.diff)
        .fold(0.0_f64, f64::max);
    let details = format!("{} combinations, worst |J - J~| = {worst:.2e}", rows.len());
    if let Some(path) = ctx.artifact("c02_restriction.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &RegressionConfig::default());
        #[derive(Serialize)]
        struct A {
            rows: Vec<RestrictionRow>,
        }
        write_json(&path, &meta, &A { rows })?;
    }
    Ok(CriterionOutcome {
        id: 2,
        title: criterion_title(2),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C3

fn c03_hamiltonian_reduction(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let p1 = get_problem("P1")?;
    let aug = augment_problem(&p1.spec, eta_zero());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.seed ^ 0xc3);
    let atoms = p1.spec.control_set.grid_atoms();

    // algebraic identity H~((y,x),(z,k),(p,-1),v) = H(y,z,p,v)
    let mut worst_identity = 0.0_f64;
    for s in 0..10_000 {
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
            let x: f64 = StandardNormal.sample(rng);
            1.5 * x
        };
        let (y, x, z, k, p) = (
            draw(&mut rng),
            draw(&mut rng),
            draw(&mut rng),
            draw(&mut rng),
            draw(&mut rng),
        );
        let t = (s as f64 / 10_000.0).fract();
        let v = &atoms[s % atoms.len()];
        let h_aug = hamiltonian(&aug.spec, t, &[y, x], &[z, k], &[p, -1.0], v);
        let h = hamiltonian(&p1.spec, t, &[y], &[z], &[p], v);
        worst_identity = worst_identity.max((h_aug - h).abs());
    }

    // restricted adjoint keeps its x-component at -1 on every node and path
    let bundle = scalar_bundle(ctx.seed, N_DEFAULT, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let law = ControlLaw::constant(vec![1.0]);
    let atraj = solve_bsde(&aug.spec, &law, &bundle, &cfg)?;
    let aadj = solve_adjoint(&aug.spec, &law, &atraj)?;
    let mut worst_component = 0.0_f64;
    for m in 0..atraj.paths() {
        for i in 0..=N_DEFAULT {
            worst_component = worst_component.max((aadj.p[(m, i, 1)] + 1.0).abs());
        }
    }

    let passed = worst_identity <= 1e-10 && worst_component <= 1e-10;
    let details = format!(
        "identity defect {worst_identity:.2e} (<=1e-10), x-component defect {worst_component:.2e} (<=1e-10)"
    );
    if let Some(path) = ctx.artifact("c03_reduction.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &RegressionConfig::default());
        #[derive(Serialize)]
        struct A {
            identity_defect: f64,
            adjoint_x_defect: f64,
        }
        write_json(
            &path,
            &meta,
            &A {
                identity_defect: worst_identity,
                adjoint_x_defect: worst_component,
            },
        )?;
    }
    Ok(CriterionOutcome {
        id: 3,
        title: criterion_title(3),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C4

fn c04_spike_rates(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let p1 = get_problem("P1")?;
    let bundle = scalar_bundle(ctx.seed, N_DEFAULT, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let thetas = [0.25, 0.125, 0.0625, 0.03125];
    let study = spike_convergence_study(
        &p1.spec,
        &ControlLaw::constant(vec![0.0]),
        0.75,
        &[1.0],
        &thetas,
        &bundle,
        &cfg,
    )?;
    let passed = (1.7..=2.3).contains(&study.y_slope) && (1.7..=2.3).contains(&study.z_slope);
    let details = format!(
        "y-slope {:.3}, z-slope {:.3} (window [1.7, 2.3])",
        study.y_slope, study.z_slope
    );
    if let Some(dir) = &ctx.out_dir {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &cfg);
        let rows: Vec<Vec<String>> = study
            .rows
            .iter()
            .map(|r| vec![r.theta.to_string(), r.y_moment.to_string(), r.z_moment.to_string()])
            .collect();
        write_csv(&dir.join("c04_spike.csv"), &meta, "theta,y_moment,z_moment", &rows)?;
        #[derive(Serialize)]
        struct A {
            y_slope: f64,
            z_slope: f64,
        }
        write_json(
            &dir.join("c04_spike.json"),
            &meta,
            &A {
                y_slope: study.y_slope,
                z_slope: study.z_slope,
            },
        )?;
    }
    Ok(CriterionOutcome {
        id: 4,
        title: criterion_title(4),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C5

#[derive(Serialize)]
struct NecessaryRow {
    control: String,
    mean_gap: f64,
    q99: f64,
    tolerance: f64,
    pass: bool,
}

fn c05_strict_necessary(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let p0 = get_problem("P0")?;
    let bundle = scalar_bundle(ctx.seed, N_DEFAULT, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let mut rows = Vec::new();

    // oracle optimum, checked at the oracle's own atom resolution
    let sol = brute_force_optimum(&p0.spec, p0.horizon, p0.oracle_blocks, &p0.oracle_atoms, p0.oracle_fine)?;
    let law = sol.law(&bundle.grid);
    let traj = solve_bsde(&p0.spec, &law, &bundle, &cfg)?;
    let adj = solve_adjoint(&p0.spec, &law, &traj)?;
    let oracle_report = check_necessary(&p0.spec, &law, &traj, &adj, &p0.oracle_atoms, None)?;
    rows.push(NecessaryRow {
        control: law.label.clone(),
        mean_gap: oracle_report.mean_gap,
        q99: oracle_report.q99,
        tolerance: oracle_report.tolerance,
        pass: oracle_report.pass,
    });

    // constant controls must fail decisively on the default box grid
    let ugrid = p0.spec.control_set.grid_atoms();
    let mut constants_fail = true;
    for c in [-1.0, 0.0, 1.0] {
        let law = ControlLaw::constant(vec![c]);
        let traj = solve_bsde(&p0.spec, &law, &bundle, &cfg)?;
        let adj = solve_adjoint(&p0.spec, &law, &traj)?;
        let rep = check_necessary(&p0.spec, &law, &traj, &adj, &ugrid, None)?;
        constants_fail &= !rep.pass && rep.mean_gap >= 10.0 * rep.tolerance;
        rows.push(NecessaryRow {
            control: law.label.clone(),
            mean_gap: rep.mean_gap,
            q99: rep.q99,
            tolerance: rep.tolerance,
            pass: rep.pass,
        });
    }

    let passed = oracle_report.pass && constants_fail;
    let details = format!(
        "oracle mean gap {:.2e} vs tolerance {:.1e} ({}); constants fail at >=10x tolerance: {}",
        oracle_report.mean_gap,
        oracle_report.tolerance,
        if oracle_report.pass { "pass" } else { "FAIL: singular-arc residual, see README" },
        constants_fail
    );
    if let Some(path) = ctx.artifact("c05_necessary.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &cfg);
        #[derive(Serialize)]
        struct A {
            oracle_value: f64,
            rows: Vec<NecessaryRow>,
        }
        write_json(
            &path,
            &meta,
            &A {
                oracle_value: sol.value,
                rows,
            },
        )?;
    }
    Ok(CriterionOutcome {
        id: 5,
        title: criterion_title(5),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C6

fn c06_sufficiency(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let p2 = get_problem("P2")?;
    let good = check_sufficient_assumptions(&p2.spec, 2000, ctx.seed)?;
    let mutant = check_sufficient_assumptions(&p2_negated_running_cost(), 2000, ctx.seed)?;
    let passed = good.pass && !mutant.pass && mutant.h_concavity_defect > 1e-9;
    let details = format!(
        "P2 defects (g {:.1e}, H {:.1e}) pass; negated-h defect {:.2e} fails",
        good.g_convexity_defect, good.h_concavity_defect, mutant.h_concavity_defect
    );
    if let Some(path) = ctx.artifact("c06_sufficiency.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &RegressionConfig::default());
        #[derive(Serialize)]
        struct A {
            p2: crate::maximum_principle::SufficiencyReport,
            negated_h: crate::maximum_principle::SufficiencyReport,
        }
        write_json(&path, &meta, &A { p2: good, negated_h: mutant })?;
    }
    Ok(CriterionOutcome {
        id: 6,
        title: criterion_title(6),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C7

fn c07_chattering_stability(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let (spec, q) = p2_uniform()?;
    let bundle = scalar_bundle(ctx.seed, N_CHATTER, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let levels = [4usize, 16, 64];
    let rows = chattering_convergence_study(&spec, &q, &levels, &bundle, &cfg)?;

    let rtraj = solve_relaxed_bsde(&spec, &q, &bundle, &cfg)?;
    let rvalue = relaxed_cost(&spec, &q, &rtraj);

    let mut monotone = true;
    for w in rows.windows(2) {
        monotone &= w[1].y_moment <= 1.1 * w[0].y_moment
            && w[1].z_moment <= 1.1 * w[0].z_moment
            && w[1].cost_gap <= 1.1 * w[0].cost_gap;
    }
    // relaxed value is exactly 0, so J(u^n) equals the cost gap
    let j4 = rows[0].cost_gap;
    let j64 = rows[2].cost_gap;
    let cost_ok = j64 <= (0.05 * j4).max(1e-2);
    let relaxed_zero = rvalue.value.abs() <= 1e-10;
    let passed = monotone && cost_ok && relaxed_zero;
    let details = format!(
        "columns monotone: {monotone}; J(u^64)={j64:.2e} <= max(0.05 J(u^4), 1e-2); relaxed value {:.1e}",
        rvalue.value
    );
    if let Some(dir) = &ctx.out_dir {
        let meta = Meta::new(ctx.seed, N_CHATTER, M_DEFAULT, &cfg);
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.level.to_string(),
                    r.y_moment.to_string(),
                    r.z_moment.to_string(),
                    r.cost_gap.to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("c07_chattering.csv"),
            &meta,
            "level,y_moment,z_moment,cost_gap",
            &csv_rows,
        )?;
    }
    Ok(CriterionOutcome {
        id: 7,
        title: criterion_title(7),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C8

fn c08_stable_convergence(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let (_, q) = p2_uniform()?;
    let grid = build_grid(1.0, N_CHATTER)?;
    let dims = Dimensions::new(1, 1, 1)?;
    let bundle = sample_brownian(&grid, &dims, 2000, ctx.seed)?;
    let fns: Vec<TestFunction> = vec![("a".into(), Arc::new(|_t: f64, a: &[f64]| a[0]))];
    let rows = stable_convergence_diagnostic(&q, &[4, 16, 64], &fns, &grid, &bundle)?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let passed = gaps[0] >= 2.0 * gaps[1] && gaps[1] >= 2.0 * gaps[2];
    let details = format!(
        "gaps {:.4} / {:.4} / {:.4} (>=2x decay per 4x level)",
        gaps[0], gaps[1], gaps[2]
    );
    if let Some(dir) = &ctx.out_dir {
        let meta = Meta::new(ctx.seed, N_CHATTER, 2000, &RegressionConfig::default());
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.level.to_string(), r.test_fn.clone(), r.gap.to_string()])
            .collect();
        write_csv(&dir.join("c08_stable.csv"), &meta, "level,test_fn,gap", &csv_rows)?;
    }
    Ok(CriterionOutcome {
        id: 8,
        title: criterion_title(8),
        passed,
        details,
    })
}

// --------------------------------------------------------------------- C9

fn c09_adjoint_convergence(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let (spec, q) = p2_uniform()?;
    let bundle = scalar_bundle(ctx.seed, N_CHATTER, M_DEFAULT)?;
    let cfg = RegressionConfig::default();

    let rtraj = solve_relaxed_bsde(&spec, &q, &bundle, &cfg)?;
    let radj = solve_relaxed_adjoint(&spec, &q, &rtraj)?;

    let mut moments = Vec::new();
    for level in [4usize, 16, 64] {
        let sched = chattering_sequence(&q, level, &bundle.grid)?;
        let traj = solve_bsde(&spec, &sched.law, &bundle, &cfg)?;
        let adj = solve_adjoint(&spec, &sched.law, &traj)?;
        let m_paths = traj.paths();
        let mut acc = 0.0;
        for m in 0..m_paths {
            let mut sup = 0.0_f64;
            for i in 0..=N_CHATTER {
                let diff = adj.p[(m, i, 0)] - radj.p[(m, i, 0)];
                sup = sup.max(diff * diff);
            }
            acc += sup;
        }
        moments.push(acc / m_paths as f64);
    }
    let monotone = moments[1] <= 1.1 * moments[0] && moments[2] <= 1.1 * moments[1];
    let passed = monotone && moments[2] <= 1e-2;
    let details = format!(
        "E sup |p^n - p^mu|^2 = {:.2e} / {:.2e} / {:.2e} (final <= 1e-2)",
        moments[0], moments[1], moments[2]
    );
    if let Some(path) = ctx.artifact("c09_adjoint_convergence.json") {
        let meta = Meta::new(ctx.seed, N_CHATTER, M_DEFAULT, &cfg);
        #[derive(Serialize)]
        struct A {
            levels: Vec<usize>,
            p_moments: Vec<f64>,
        }
        write_json(
            &path,
            &meta,
            &A {
                levels: vec![4, 16, 64],
                p_moments: moments,
            },
        )?;
    }
    Ok(CriterionOutcome {
        id: 9,
        title: criterion_title(9),
        passed,
        details,
    })
}

// -------------------------------------------------------------------- C10

fn c10_relaxed_necessary(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let (spec, q) = p2_uniform()?;
    let bundle = scalar_bundle(ctx.seed, N_DEFAULT, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let atoms = spec.control_set.grid_atoms();

    let traj = solve_relaxed_bsde(&spec, &q, &bundle, &cfg)?;
    let adj = solve_relaxed_adjoint(&spec, &q, &traj)?;
    let uniform_report = check_relaxed_necessary(&spec, &q, &traj, &adj, &atoms, None)?;

    let dirac = RelaxedControlLaw::constant_weights(atoms.clone(), vec![0.0, 1.0])?;
    let dtraj = solve_relaxed_bsde(&spec, &dirac, &bundle, &cfg)?;
    let dadj = solve_relaxed_adjoint(&spec, &dirac, &dtraj)?;
    let dirac_report = check_relaxed_necessary(&spec, &dirac, &dtraj, &dadj, &atoms, None)?;

    // Dirac embedding of a strict law reproduces the strict pipeline
    let strict_law = ControlLaw::constant(vec![1.0]);
    let embedded = embed_strict(&strict_law, &atoms);
    let straj = solve_bsde(&spec, &strict_law, &bundle, &cfg)?;
    let sadj = solve_adjoint(&spec, &strict_law, &straj)?;
    let strict_report = check_necessary(&spec, &strict_law, &straj, &sadj, &atoms, None)?;
    let etraj = solve_relaxed_bsde(&spec, &embedded, &bundle, &cfg)?;
    let eadj = solve_relaxed_adjoint(&spec, &embedded, &etraj)?;
    let embedded_report = check_relaxed_necessary(&spec, &embedded, &etraj, &eadj, &atoms, None)?;
    let mut embed_defect = 0.0_f64;
    for m in (0..etraj.paths()).step_by(199) {
        for i in 0..=N_DEFAULT {
            embed_defect = embed_defect.max((etraj.y[(m, i, 0)] - straj.y[(m, i, 0)]).abs());
            embed_defect = embed_defect.max((eadj.p[(m, i, 0)] - sadj.p[(m, i, 0)]).abs());
        }
    }
    embed_defect = embed_defect
        .max((embedded_report.mean_gap - strict_report.mean_gap).abs())
        .max((embedded_report.max_gap - strict_report.max_gap).abs());

    let dirac_fails = !dirac_report.pass && dirac_report.mean_gap >= 10.0 * dirac_report.tolerance;
    let passed = uniform_report.pass && dirac_fails && embed_defect <= 1e-12;
    let details = format!(
        "uniform weights pass (mean {:.1e}); Dirac(+1) mean gap {:.3} >= 10x tol; embedding defect {:.1e}",
        uniform_report.mean_gap, dirac_report.mean_gap, embed_defect
    );
    if let Some(path) = ctx.artifact("c10_relaxed_necessary.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &cfg);
        #[derive(Serialize)]
        struct A {
            uniform: crate::maximum_principle::ViolationReport,
            dirac_plus_one: crate::maximum_principle::ViolationReport,
            embedding_defect: f64,
        }
        write_json(
            &path,
            &meta,
            &A {
                uniform: uniform_report,
                dirac_plus_one: dirac_report,
                embedding_defect: embed_defect,
            },
        )?;
    }
    Ok(CriterionOutcome {
        id: 10,
        title: criterion_title(10),
        passed,
        details,
    })
}

// -------------------------------------------------------------------- C11

fn c11_near_optimality(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let (spec, q) = p2_uniform()?;
    let bundle = scalar_bundle(ctx.seed, N_DEFAULT, M_DEFAULT)?;
    let cfg = RegressionConfig::default();
    let atoms = spec.control_set.grid_atoms();
    // ratio boundedness holds on level spans <= ~8x; {4, 8, 16} keeps the
    // blocks even at N = 64 (see README on level choices)
    let levels = [4usize, 8, 16];
    let reports = near_optimality_check(&spec, &q, &levels, &bundle, &cfg, &atoms)?;

    let mut eps_decreasing = true;
    let mut gap_decreasing = true;
    for w in reports.windows(2) {
        eps_decreasing &= w[1].epsilon < w[0].epsilon;
        gap_decreasing &= w[1].hamiltonian.max_gap < w[0].hamiltonian.max_gap;
    }
    let ratios: Vec<f64> = reports
        .iter()
        .filter(|r| r.epsilon > r.cost_stderr)
        .map(|r| r.gap_to_epsilon_ratio)
        .collect();
    let ratio_ok = if ratios.is_empty() {
        true
    } else {
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0_f64, f64::max);
        hi <= 10.0 * lo
    };
    let passed = eps_decreasing && gap_decreasing && ratio_ok;
    let details = format!(
        "eps decreasing: {eps_decreasing}; gap decreasing: {gap_decreasing}; ratios {:?} spread <= 10x: {ratio_ok}",
        ratios.iter().map(|r| (r * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
    if let Some(path) = ctx.artifact("c11_near_optimality.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &cfg);
        #[derive(Serialize)]
        struct A {
            reports: Vec<crate::relaxed::NearOptimalityReport>,
        }
        write_json(&path, &meta, &A { reports })?;
    }
    Ok(CriterionOutcome {
        id: 11,
        title: criterion_title(11),
        passed,
        details,
    })
}

// -------------------------------------------------------------------- C12

fn c12_metric(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let grid = build_grid(1.0, N_DEFAULT)?;
    let dims = Dimensions::new(1, 1, 1)?;
    let bundle = sample_brownian(&grid, &dims, 200, ctx.seed)?;
    let p2 = get_problem("P2")?;

    let u = ControlLaw::constant(vec![-1.0]);
    let v = ControlLaw::constant(vec![1.0]);
    let spike = SpikeSpec {
        tau: 0.25,
        width: 0.25,
        replacement: vec![1.0],
    };
    let w = spike_perturb(&u, &spike, &grid, &p2.spec.control_set)?;

    let identity_ok = control_distance(&u, &u, &grid, &bundle) == 0.0;
    let dab = control_distance(&u, &v, &grid, &bundle);
    let symmetric_ok = dab == control_distance(&v, &u, &grid, &bundle);
    let duw = control_distance(&u, &w, &grid, &bundle);
    let dwv = control_distance(&w, &v, &grid, &bundle);
    let triangle_ok = dab <= duw + dwv && duw <= dab + dwv && dwv <= dab + duw;
    let spike_ok = duw == 0.25;

    let passed = identity_ok && symmetric_ok && triangle_ok && spike_ok;
    let details = format!(
        "d(u,u)=0: {identity_ok}; symmetry: {symmetric_ok}; triangle: {triangle_ok}; spike width 0.25 -> d = {duw} (exact)"
    );
    if let Some(path) = ctx.artifact("c12_metric.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, 200, &RegressionConfig::default());
        #[derive(Serialize)]
        struct A {
            d_uv: f64,
            d_uw: f64,
            d_wv: f64,
        }
        write_json(
            &path,
            &meta,
            &A {
                d_uv: dab,
                d_uw: duw,
                d_wv: dwv,
            },
        )?;
    }
    Ok(CriterionOutcome {
        id: 12,
        title: criterion_title(12),
        passed,
        details,
    })
}

// -------------------------------------------------------------------- C13

fn c13_gradients(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut worst = 0.0_f64;
    let mut worst_where = String::new();
    for name in ["P0", "P1", "P2", "P3a", "P3b"] {
        let p = get_problem(name)?;
        let report = validate_spec(&p.spec, 100, ctx.seed)?;
        if report.max_rel_error > worst {
            worst = report.max_rel_error;
            worst_where = format!("{name}:{}", report.worst_partial);
        }
        // Hamiltonian partials against central differences
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.seed ^ 0xc13);
        let atoms = p.spec.control_set.grid_atoms();
        let mut hy = vec![0.0];
        let mut hz = vec![0.0];
        for s in 0..100 {
            let y: f64 = StandardNormal.sample(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            let pv: f64 = StandardNormal.sample(&mut rng);
            let v = &atoms[s % atoms.len()];
            let t = 0.37;
            hamiltonian_partials(&p.spec, t, &[y], &[z], &[pv], v, &mut hy, &mut hz);
            let e = 1e-5;
            let fy = (hamiltonian(&p.spec, t, &[y + e], &[z], &[pv], v)
                - hamiltonian(&p.spec, t, &[y - e], &[z], &[pv], v))
                / (2.0 * e);
            let fz = (hamiltonian(&p.spec, t, &[y], &[z + e], &[pv], v)
                - hamiltonian(&p.spec, t, &[y], &[z - e], &[pv], v))
                / (2.0 * e);
            for (err, tag) in [(rel_err(fy, hy[0]), "H_y"), (rel_err(fz, hz[0]), "H_z")] {
                if err > worst {
                    worst = err;
                    worst_where = format!("{name}:{tag}");
                }
            }
        }
    }
    let passed = worst <= 1e-6;
    let details = format!("max relative error {worst:.2e} at {worst_where} (<=1e-6)");
    if let Some(path) = ctx.artifact("c13_gradients.json") {
        let meta = Meta::new(ctx.seed, N_DEFAULT, M_DEFAULT, &RegressionConfig::default());
        #[derive(Serialize)]
        struct A {
            max_rel_error: f64,
            location: String,
        }
        write_json(
            &path,
            &meta,
            &A {
                max_rel_error: worst,
                location: worst_where,
            },
        )?;
    }
    Ok(CriterionOutcome {
        id: 13,
        title: criterion_title(13),
        passed,
        details,
    })
}

// -------------------------------------------------------------------- C14

fn c14_determinism(ctx: &SuiteContext) -> Result<CriterionOutcome> {
    let base = match &ctx.out_dir {
        Some(d) => d.join("replay"),
        None => std::env::temp_dir().join(format!("bsde-replay-{}", ctx.seed)),
    };
    let run1 = base.join("run1");
    let run2 = base.join("run2");
    for dir in [&run1, &run2] {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        let sub = SuiteContext::new(ctx.seed, Some(dir.clone()));
        for id in 1..=13u8 {
            run_criterion(id, &sub)?;
        }
    }
    let (identical, compared, first_diff) = compare_dirs(&run1, &run2)?;
    let passed = identical && compared > 0;
    let details = if identical {
        format!("{compared} artifacts byte-identical across reruns")
    } else {
        format!("replay differs at {first_diff}")
    };
    Ok(CriterionOutcome {
        id: 14,
        title: criterion_title(14),
        passed,
        details,
    })
}

fn compare_dirs(a: &Path, b: &Path) -> Result<(bool, usize, String)> {
    let mut names: Vec<String> = fs::read_dir(a)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut names_b: Vec<String> = fs::read_dir(b)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names_b.sort();
    if names != names_b {
        return Ok((false, 0, "artifact listings differ".into()));
    }
    for name in &names {
        let ca = fs::read(a.join(name))?;
        let cb = fs::read(b.join(name))?;
        if ca != cb {
            return Ok((false, names.len(), name.clone()));
        }
    }
    Ok((true, names.len(), String::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_complete_and_unique() {
        let mut ids = CRITERION_IDS.to_vec();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids, (1..=14).collect::<Vec<u8>>());
        for id in CRITERION_IDS {
            assert_ne!(criterion_title(id), "unknown");
        }
    }

    #[test]
    fn outcomes_carry_matching_ids() {
        // cheap criteria only; the heavy ones run in the acceptance suite
        let ctx = SuiteContext::new(7, None);
        for id in [12u8, 13] {
            let out = run_criterion(id, &ctx).unwrap();
            assert_eq!(out.id, id);
            assert!(out.passed, "criterion {id}: {}", out.details);
        }
    }
}
