//! Batch front-end: select a built-in problem, run solvers and checks, emit
//! machine-readable artifacts with replay metadata.
//!
//! Exit codes: 0 = success / all verdicts pass, 1 = a check verdict failed,
//! 2 = configuration or numerical error.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adjoint::solve_adjoint;
use crate::criteria::{run_suite, SuiteContext};
use crate::error::{Error, Result};
use crate::export::{
    write_adjoint_csv, write_cost_json, write_csv, write_json, write_trajectory_csv, Meta,
};
use crate::maximum_principle::{
    check_necessary, improve_by_hamiltonian_ascent, spike_convergence_study,
};
use crate::model::{build_grid, sample_brownian, BrownianBundle, ControlLaw, ControlSet};
use crate::problems::{brute_force_optimum, get_problem, BuiltinProblem};
use crate::regression::{RegressionConfig, Ridge};
use crate::relaxed::{
    chattering_convergence_study, check_relaxed_necessary, solve_relaxed_adjoint, solve_relaxed_bsde, stable_convergence_diagnostic, RelaxedControlLaw,
    TestFunction,
};
use crate::restriction::{augment_problem, eta_zero, restricted_cost};
use crate::solver::{evaluate_cost, solve_bsde};

#[derive(Parser, Debug)]
#[command(name = "bsde-control", version, about = "BSDE optimal-control solver and maximum-principle checks")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Built-in problem name (P0, P1, P2, P3a, P3b).
    #[arg(long, default_value = "P1")]
    problem: String,
    /// Control: `const:<v>`, `oracle`, or `builtin`.
    #[arg(long, default_value = "builtin")]
    control: String,
    /// Number of time steps N.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    /// Monte Carlo paths M.
    #[arg(long, default_value_t = 20_000)]
    paths: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Polynomial basis degree D.
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Ridge: `auto` or a nonnegative number.
    #[arg(long, default_value = "auto")]
    ridge: String,
    /// Tolerance override for check verdicts.
    #[arg(long)]
    tol: Option<f64>,
    /// Box control sets are discretized to this many atoms per axis.
    #[arg(long, default_value_t = 21)]
    ugrid: usize,
    /// Oracle block count (defaults to the problem's).
    #[arg(long)]
    blocks: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "bsde-artifacts")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the BSDE and estimate the cost (trajectory CSV + cost JSON).
    Solve(CommonArgs),
    /// Solve the BSDE and the adjoint SDE (adjoint CSV).
    Adjoint(CommonArgs),
    /// Check the strict necessary maximum condition.
    Check(CommonArgs),
    /// Check the relaxed necessary maximum condition.
    CheckRelaxed {
        #[command(flatten)]
        common: CommonArgs,
        /// Probability weights over the problem's control atoms.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Spike perturbation rate study (CSV table + slope JSON).
    SpikeStudy {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.125,0.0625,0.03125")]
        thetas: Vec<f64>,
        /// Left endpoint of the spike window.
        #[arg(long, default_value_t = 0.75)]
        tau: f64,
        /// Replacement control value inside the window.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        replacement: Vec<f64>,
    },
    /// Chattering trajectory/cost stability table.
    ChatteringStudy {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        levels: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Stable-convergence diagnostic against a fixed test-function family.
    StableStudy {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        levels: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Hamiltonian-ascent improvement loop.
    Improve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Brute-force enumeration oracle.
    Oracle(CommonArgs),
    /// Compare the restricted cost with the plain cost on a common bundle.
    RestrictVerify(CommonArgs),
    /// Run every acceptance criterion and print the pass/fail matrix.
    Suite {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "bsde-artifacts")]
        out: PathBuf,
    },
}

struct Session {
    problem: BuiltinProblem,
    bundle: Arc<BrownianBundle>,
    config: RegressionConfig,
    meta: Meta,
    args: CommonArgs,
}

impl Session {
    fn open(args: &CommonArgs) -> Result<Session> {
        let problem = get_problem(&args.problem)?;
        let grid = build_grid(problem.horizon, args.grid)?;
        let bundle = Arc::new(sample_brownian(&grid, &problem.spec.dims, args.paths, args.seed)?);
        let ridge = match args.ridge.as_str() {
            "auto" => Ridge::Auto,
            other => Ridge::Fixed(
                other
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad ridge value '{other}'")))?,
            ),
        };
        let config = RegressionConfig {
            degree: args.degree,
            ridge,
        };
        let meta = Meta::new(args.seed, args.grid, args.paths, &config);
        Ok(Session {
            problem,
            bundle,
            config,
            meta,
            args: args.clone(),
        })
    }

    fn control(&self) -> Result<ControlLaw> {
        let spec = &self.problem.spec;
        let name = if self.args.control == "builtin" {
            match self.problem.name.as_str() {
                "P0" | "P2" => "oracle",
                _ => "const:0",
            }
        } else {
            self.args.control.as_str()
        };
        if name == "oracle" {
            let blocks = self.args.blocks.unwrap_or(self.problem.oracle_blocks);
            let sol = brute_force_optimum(
                spec,
                self.problem.horizon,
                blocks,
                &self.problem.oracle_atoms,
                self.problem.oracle_fine,
            )?;
            return Ok(sol.law(&self.bundle.grid));
        }
        if let Some(rest) = name.strip_prefix("const:") {
            let vals: Vec<f64> = rest
                .split(',')
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::config(format!("bad control component '{s}'")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != spec.dims.k {
                return Err(Error::config(format!(
                    "control has {} components, problem wants {}",
                    vals.len(),
                    spec.dims.k
                )));
            }
            if !spec.control_set.contains(&vals) {
                return Err(Error::config(format!("control {vals:?} lies outside U")));
            }
            return Ok(ControlLaw::constant(vals));
        }
        Err(Error::config(format!(
            "unknown control '{name}' (use const:<v>, oracle, builtin)"
        )))
    }

    fn maximization_atoms(&self, control_label: &str) -> Vec<Vec<f64>> {
        // oracle optima are checked at the oracle's own atom resolution
        if control_label.starts_with("oracle") {
            return self.problem.oracle_atoms.clone();
        }
        match &self.problem.spec.control_set {
            ControlSet::Atoms(a) => a.clone(),
            ControlSet::Box { lo, hi, .. } => ControlSet::Box {
                lo: lo.clone(),
                hi: hi.clone(),
                resolution: self.args.ugrid,
            }
            .grid_atoms(),
        }
    }

    fn relaxed_law(&self, weights: &Option<Vec<f64>>) -> Result<RelaxedControlLaw> {
        let atoms = self.problem.spec.control_set.grid_atoms();
        let w = match weights {
            Some(w) => w.clone(),
            None => vec![1.0 / atoms.len() as f64; atoms.len()],
        };
        RelaxedControlLaw::constant_weights(atoms, w)
    }
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Convenience for tests: run from raw arguments.
pub fn run_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            eprint!("{e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Solve(args) => {
            let s = Session::open(&args)?;
            let law = s.control()?;
            let traj = solve_bsde(&s.problem.spec, &law, &s.bundle, &s.config)?;
            let cost = evaluate_cost(&s.problem.spec, &law, &traj);
            write_trajectory_csv(&args.out.join("trajectory.csv"), &traj, &s.meta)?;
            write_cost_json(&args.out.join("cost.json"), &cost, &s.meta)?;
            println!(
                "{} under {}: J = {} (stderr {})",
                s.problem.name, law.label, cost.value, cost.stderr
            );
            Ok(0)
        }
        Command::Adjoint(args) => {
            let s = Session::open(&args)?;
            let law = s.control()?;
            let traj = solve_bsde(&s.problem.spec, &law, &s.bundle, &s.config)?;
            let adj = solve_adjoint(&s.problem.spec, &law, &traj)?;
            write_adjoint_csv(&args.out.join("adjoint.csv"), &adj, &s.meta)?;
            println!("{} adjoint solved; p_0 = {}", s.problem.name, adj.p[(0, 0, 0)]);
            Ok(0)
        }
        Command::Check(args) => {
            let s = Session::open(&args)?;
            let law = s.control()?;
            let traj = solve_bsde(&s.problem.spec, &law, &s.bundle, &s.config)?;
            let adj = solve_adjoint(&s.problem.spec, &law, &traj)?;
            let atoms = s.maximization_atoms(&law.label);
            let report = check_necessary(&s.problem.spec, &law, &traj, &adj, &atoms, args.tol)?;
            write_json(&args.out.join("check.json"), &s.meta, &report)?;
            println!(
                "{} under {}: mean gap {:.3e}, q99 {:.3e}, tolerance {:.1e} -> {}",
                s.problem.name,
                law.label,
                report.mean_gap,
                report.q99,
                report.tolerance,
                if report.pass { "PASS" } else { "FAIL" }
            );
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::CheckRelaxed { common, weights } => {
            let s = Session::open(&common)?;
            let q = s.relaxed_law(&weights)?;
            let traj = solve_relaxed_bsde(&s.problem.spec, &q, &s.bundle, &s.config)?;
            let adj = solve_relaxed_adjoint(&s.problem.spec, &q, &traj)?;
            let atoms = s.maximization_atoms("");
            let report =
                check_relaxed_necessary(&s.problem.spec, &q, &traj, &adj, &atoms, common.tol)?;
            write_json(&common.out.join("check_relaxed.json"), &s.meta, &report)?;
            println!(
                "{} under {}: mean gap {:.3e}, support mass {:.4} -> {}",
                s.problem.name,
                q.label,
                report.mean_gap,
                report.support_mass.unwrap_or(f64::NAN),
                if report.pass { "PASS" } else { "FAIL" }
            );
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::SpikeStudy {
            common,
            thetas,
            tau,
            replacement,
        } => {
            let s = Session::open(&common)?;
            let law = s.control()?;
            let study = spike_convergence_study(
                &s.problem.spec,
                &law,
                tau,
                &replacement,
                &thetas,
                &s.bundle,
                &s.config,
            )?;
            let rows: Vec<Vec<String>> = study
                .rows
                .iter()
                .map(|r| vec![r.theta.to_string(), r.y_moment.to_string(), r.z_moment.to_string()])
                .collect();
            write_csv(&common.out.join("spike.csv"), &s.meta, "theta,y_moment,z_moment", &rows)?;
            #[derive(Serialize)]
            struct Slopes {
                y_slope: f64,
                z_slope: f64,
            }
            write_json(
                &common.out.join("spike.json"),
                &s.meta,
                &Slopes {
                    y_slope: study.y_slope,
                    z_slope: study.z_slope,
                },
            )?;
            println!(
                "{}: y-slope {:.3}, z-slope {:.3}",
                s.problem.name, study.y_slope, study.z_slope
            );
            Ok(0)
        }
        Command::ChatteringStudy {
            common,
            levels,
            weights,
        } => {
            let s = Session::open(&common)?;
            let q = s.relaxed_law(&weights)?;
            let rows = chattering_convergence_study(&s.problem.spec, &q, &levels, &s.bundle, &s.config)?;
            let csv: Vec<Vec<String>> = rows
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
                &common.out.join("chattering.csv"),
                &s.meta,
                "level,y_moment,z_moment,cost_gap",
                &csv,
            )?;
            for r in &rows {
                println!(
                    "level {:3}: y {:.3e}, z {:.3e}, cost gap {:.3e}",
                    r.level, r.y_moment, r.z_moment, r.cost_gap
                );
            }
            Ok(0)
        }
        Command::StableStudy {
            common,
            levels,
            weights,
        } => {
            let s = Session::open(&common)?;
            let q = s.relaxed_law(&weights)?;
            let fns: Vec<TestFunction> = vec![
                ("a".into(), Arc::new(|_t: f64, a: &[f64]| a[0])),
                ("a^2".into(), Arc::new(|_t: f64, a: &[f64]| a[0] * a[0])),
                ("t*a".into(), Arc::new(|t: f64, a: &[f64]| t * a[0])),
            ];
            let rows =
                stable_convergence_diagnostic(&q, &levels, &fns, &s.bundle.grid, &s.bundle)?;
            let csv: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![r.level.to_string(), r.test_fn.clone(), r.gap.to_string()])
                .collect();
            write_csv(&common.out.join("stable.csv"), &s.meta, "level,test_fn,gap", &csv)?;
            for r in &rows {
                println!("level {:3}, f = {:>4}: gap {:.4e}", r.level, r.test_fn, r.gap);
            }
            Ok(0)
        }
        Command::Improve { common, iters } => {
            let s = Session::open(&common)?;
            let law = s.control()?;
            let atoms = s.maximization_atoms("");
            let result = improve_by_hamiltonian_ascent(
                &s.problem.spec,
                &law,
                &s.bundle,
                &s.config,
                iters,
                &atoms,
            )?;
            write_json(&common.out.join("improve.json"), &s.meta, &result)?;
            for (k, it) in result.iterates.iter().enumerate() {
                println!(
                    "iterate {k}: J = {:.6} (distance from previous {:.4})",
                    it.cost.value, it.distance_from_previous
                );
            }
            if result.oscillation_detected {
                println!("warning: period-2 cycle detected, iteration stopped");
            }
            Ok(0)
        }
        Command::Oracle(args) => {
            let s = Session::open(&args)?;
            let blocks = args.blocks.unwrap_or(s.problem.oracle_blocks);
            let sol = brute_force_optimum(
                &s.problem.spec,
                s.problem.horizon,
                blocks,
                &s.problem.oracle_atoms,
                s.problem.oracle_fine,
            )?;
            #[derive(Serialize)]
            struct OracleArtifact<'a> {
                problem: &'a str,
                blocks: usize,
                atoms: &'a [Vec<f64>],
                value: f64,
                pattern: &'a [Vec<f64>],
            }
            write_json(
                &args.out.join("oracle.json"),
                &s.meta,
                &OracleArtifact {
                    problem: &s.problem.name,
                    blocks,
                    atoms: &s.problem.oracle_atoms,
                    value: sol.value,
                    pattern: &sol.pattern,
                },
            )?;
            println!(
                "{} oracle (B = {blocks}): value {} pattern {:?}",
                s.problem.name, sol.value, sol.pattern
            );
            Ok(0)
        }
        Command::RestrictVerify(args) => {
            let s = Session::open(&args)?;
            let law = s.control()?;
            let traj = solve_bsde(&s.problem.spec, &law, &s.bundle, &s.config)?;
            let j = evaluate_cost(&s.problem.spec, &law, &traj);
            let aug = augment_problem(&s.problem.spec, eta_zero());
            let atraj = solve_bsde(&aug.spec, &law, &s.bundle, &s.config)?;
            let jt = restricted_cost(&aug, &law, &atraj)?;
            let tol = args.tol.unwrap_or(3.0 * (j.stderr + jt.stderr) + 1e-12);
            let check = crate::restriction::RestrictionCheck {
                cost: j.value,
                restricted_cost: jt.value,
                diff: (j.value - jt.value).abs(),
                tolerance: tol,
                pass: (j.value - jt.value).abs() <= tol,
            };
            write_json(&args.out.join("restrict_verify.json"), &s.meta, &check)?;
            println!(
                "{} under {}: J = {}, J~ = {}, |diff| = {:.3e} -> {}",
                s.problem.name,
                law.label,
                check.cost,
                check.restricted_cost,
                check.diff,
                if check.pass { "PASS" } else { "FAIL" }
            );
            Ok(if check.pass { 0 } else { 1 })
        }
        Command::Suite { seed, out } => {
            let ctx = SuiteContext::new(seed, Some(out));
            let outcomes = run_suite(&ctx, false)?;
            let all_pass = outcomes.iter().all(|o| o.passed);
            println!(
                "{}/{} criteria passed",
                outcomes.iter().filter(|o| o.passed).count(),
                outcomes.len()
            );
            Ok(if all_pass { 0 } else { 1 })
        }
    }
}

