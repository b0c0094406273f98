//! The five subcommands. Each returns a `RunReport` describing what was
//! checked and which files were written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use sa_lab_core::lyapunov::{
    bound_curve, default_delta, derive_constants, evaluate_bound_curve, first_k_below, solve_lyapunov, BoundConstants,
    BoundCurve, QuadraticLyapunov, SCAN_CAP,
};
use sa_lab_core::mdp::{GeometricRate, LiftedChain, MixingEnvelope};
use sa_lab_core::qlearn::{build_q, verify_q_assumptions, verify_q_setup, QFeatureMap, QOptions, QProblem};
use sa_lab_core::report::{CheckReport, VerifyOptions};
use sa_lab_core::sa_core::{monte_carlo_mse, MarkovNoise, MseCurve, StepMap};
use sa_lab_core::td::{build_td, verify_td_assumptions, verify_td_setup, FeatureMap, TdProblem};
use serde::Serialize;

use crate::config::{load_constants, Algorithm, Experiment, Stepsize};
use crate::error::CliError;
use crate::output::{ensure_dir, fmt_f64, write_csv, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Check,
    Analyze,
    Simulate,
    Bound,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Analyze => "analyze",
            Command::Simulate => "simulate",
            Command::Bound => "bound",
            Command::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub trajectories: Option<usize>,
    pub steps: Option<usize>,
    pub allow_diverged: bool,
    /// Replaces the derived constants in `bound` and `compare`.
    pub constants: Option<PathBuf>,
    pub verify: VerifyOptions,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            seed: None,
            trajectories: None,
            steps: None,
            allow_diverged: false,
            constants: None,
            verify: VerifyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeSummary {
    pub c0: f64,
    pub eta: f64,
    pub slem: f64,
}

impl From<&MixingEnvelope> for EnvelopeSummary {
    fn from(e: &MixingEnvelope) -> Self {
        Self { c0: e.c0, eta: e.eta, slem: e.slem }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateSummary {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub lipschitz: f64,
    pub residual: f64,
}

impl From<&QuadraticLyapunov> for CertificateSummary {
    fn from(c: &QuadraticLyapunov) -> Self {
        Self { c1: c.c1, c2: c.c2, c3: c.c3, c4: c.c4, lipschitz: c.lipschitz, residual: c.residual }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: Command,
    pub algorithm: Algorithm,
    pub passed: bool,
    pub summary: String,
    /// Files written by the command, relative to the output directory. The
    /// report itself is not listed.
    pub files: Vec<String>,
    pub checks: Option<CheckReport>,
    pub envelope: Option<EnvelopeSummary>,
    pub theta_star: Option<Vec<f64>>,
    pub certificate: Option<CertificateSummary>,
    pub constants: Option<BoundConstants>,
    pub epsilon: Option<f64>,
    pub k_eps: Option<u64>,
    pub steps: Option<usize>,
    pub first_violation: Option<usize>,
}

impl RunReport {
    fn new(command: Command, algorithm: Algorithm) -> Self {
        Self {
            command,
            algorithm,
            passed: true,
            summary: String::new(),
            files: Vec::new(),
            checks: None,
            envelope: None,
            theta_star: None,
            certificate: None,
            constants: None,
            epsilon: None,
            k_eps: None,
            steps: None,
            first_violation: None,
        }
    }

    pub fn report_path(&self, out: &Path) -> PathBuf {
        out.join(format!("{}_report.json", self.command.name()))
    }
}

pub enum Problem {
    Td(TdProblem),
    Q(QProblem),
}

impl Problem {
    pub fn build(exp: &Experiment) -> Result<Self, CliError> {
        Ok(match exp.config.algorithm {
            Algorithm::Td0 => Problem::Td(build_td(&exp.mdp, &exp.policy, &FeatureMap::new(exp.features.clone())?)?),
            Algorithm::Qlearning => {
                let features = QFeatureMap::new(exp.features.clone(), exp.mdp.n_actions())?;
                Problem::Q(build_q(&exp.mdp, &exp.policy, &features, &QOptions::default())?)
            }
        })
    }

    pub fn map(&self) -> &dyn StepMap {
        match self {
            Problem::Td(p) => p,
            Problem::Q(p) => p,
        }
    }

    pub fn lifted(&self) -> &LiftedChain {
        match self {
            Problem::Td(p) => p.lifted(),
            Problem::Q(p) => p.lifted(),
        }
    }

    pub fn verify(&self, opts: &VerifyOptions) -> CheckReport {
        match self {
            Problem::Td(p) => verify_td_assumptions(p, opts),
            Problem::Q(p) => verify_q_assumptions(p, opts),
        }
    }

    /// Lyapunov certificate: solved from the drift matrix for TD(0), the
    /// scaled squared norm for Q-learning.
    pub fn certificate(&self, q: Option<&DMatrix<f64>>) -> Result<QuadraticLyapunov, CliError> {
        match self {
            Problem::Td(p) => {
                let d = p.dim();
                let identity = DMatrix::identity(d, d);
                Ok(solve_lyapunov(p.a(), q.unwrap_or(&identity), p.lipschitz())?)
            }
            Problem::Q(p) => p.certificate().map_err(|e| CliError::Assumption(e.to_string())),
        }
    }

    pub fn rate(&self) -> Result<GeometricRate, CliError> {
        Ok(self.lifted().chain().require_envelope()?.rate())
    }

    pub fn noise(&self, exp: &Experiment) -> Result<MarkovNoise, CliError> {
        Ok(MarkovNoise::new(self.lifted().chain().clone(), exp.config.initial_noise)?)
    }

    /// θ̃₀ = θ₀ − θ*.
    pub fn centered_start(&self, exp: &Experiment) -> DVector<f64> {
        DVector::from_iterator(exp.theta0.len(), exp.theta0.iter().zip(self.map().theta_star()).map(|(a, b)| a - b))
    }
}

/// Everything downstream of the Lyapunov certificate.
pub struct Analysis {
    pub problem: Problem,
    pub cert: QuadraticLyapunov,
    pub rate: GeometricRate,
    pub constants: BoundConstants,
}

impl Analysis {
    pub fn new(exp: &Experiment) -> Result<Self, CliError> {
        let problem = Problem::build(exp)?;
        Self::from_problem(exp, problem)
    }

    pub fn from_problem(exp: &Experiment, problem: Problem) -> Result<Self, CliError> {
        let cert = problem.certificate(exp.q_matrix.as_ref())?;
        let rate = problem.rate()?;
        let delta = exp.config.delta.unwrap_or_else(|| default_delta(&cert));
        let constants = derive_constants(&cert, problem.map().lipschitz(), delta, &rate)?;
        Ok(Self { problem, cert, rate, constants })
    }

    pub fn epsilon(&self, exp: &Experiment) -> f64 {
        resolve_epsilon(exp.config.epsilon, &self.constants)
    }
}

pub fn resolve_epsilon(step: Stepsize, constants: &BoundConstants) -> f64 {
    match step {
        Stepsize::Value(v) => v,
        Stepsize::Relative(r) => r.fraction_of_eps_delta * constants.eps_delta,
    }
}

fn master_seed(exp: &Experiment, opts: &RunOptions) -> u64 {
    opts.seed.unwrap_or(exp.config.master_seed)
}

fn trajectories(exp: &Experiment, opts: &RunOptions) -> usize {
    opts.trajectories.unwrap_or(exp.config.trajectories)
}

fn explicit_steps(exp: &Experiment, opts: &RunOptions) -> Option<usize> {
    opts.steps.or(exp.config.horizon)
}

fn default_steps(k_eps: u64) -> usize {
    5 * k_eps as usize
}

pub fn run(command: Command, exp: &Experiment, opts: &RunOptions) -> Result<RunReport, CliError> {
    ensure_dir(&opts.out)?;
    let report = match command {
        Command::Check => cmd_check(exp, opts)?,
        Command::Analyze => cmd_analyze(exp, opts)?,
        Command::Simulate => cmd_simulate(exp, opts)?,
        Command::Bound => cmd_bound(exp, opts)?,
        Command::Compare => cmd_compare(exp, opts)?,
    };
    write_json(&report.report_path(&opts.out), &report)?;
    Ok(report)
}

pub fn cmd_check(exp: &Experiment, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut report = RunReport::new(Command::Check, exp.config.algorithm);
    let checks = match exp.config.algorithm {
        Algorithm::Td0 => verify_td_setup(&exp.mdp, &exp.policy, &FeatureMap::new(exp.features.clone())?, &opts.verify),
        Algorithm::Qlearning => {
            let features = QFeatureMap::new(exp.features.clone(), exp.mdp.n_actions())?;
            verify_q_setup(&exp.mdp, &exp.policy, &features, &opts.verify)
        }
    };
    if let Ok(lifted) = sa_lab_core::mdp::lift_transition(&exp.mdp, &exp.policy) {
        report.envelope = lifted.chain().envelope().map(EnvelopeSummary::from);
    }
    report.passed = checks.passed();
    let failed: Vec<&str> = checks.failures().map(|i| i.name.as_str()).collect();
    report.summary = if failed.is_empty() {
        format!("all {} checks passed", checks.items.len())
    } else {
        format!("{} of {} checks failed: {}", failed.len(), checks.items.len(), failed.join(", "))
    };
    report.checks = Some(checks);
    Ok(report)
}

fn constants_table(c: &BoundConstants) -> String {
    let rows: [(&str, String); 12] = [
        ("delta", fmt_f64(c.delta)),
        ("t_star", c.t_star.to_string()),
        ("eps_delta", fmt_f64(c.eps_delta)),
        ("lipschitz", fmt_f64(c.lipschitz)),
        ("c1p", fmt_f64(c.c1p)),
        ("c2p", fmt_f64(c.c2p)),
        ("c2pp", fmt_f64(c.c2pp)),
        ("c3p", fmt_f64(c.c3p)),
        ("c4p", fmt_f64(c.c4p)),
        ("c4pp", fmt_f64(c.c4pp)),
        ("c5p", fmt_f64(c.c5p)),
        ("c6", fmt_f64(c.c6)),
    ];
    let mut out = String::new();
    for (name, value) in rows {
        let _ = writeln!(out, "{name:<10} {value}");
    }
    out
}

pub fn cmd_analyze(exp: &Experiment, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut report = RunReport::new(Command::Analyze, exp.config.algorithm);
    let analysis = Analysis::new(exp)?;
    let path = opts.out.join("constants.json");
    write_json(&path, &analysis.constants)?;
    report.files.push("constants.json".into());

    let eps = analysis.epsilon(exp);
    let mut summary = constants_table(&analysis.constants);
    if eps < analysis.constants.eps_delta {
        let k = first_k_below(analysis.constants.t_star, eps, &analysis.rate, SCAN_CAP)?;
        report.k_eps = Some(k);
        let _ = write!(summary, "epsilon {} is admissible; k_eps = {k}", fmt_f64(eps));
    } else {
        let _ = write!(summary, "epsilon {} is not below eps_delta; the bound does not apply", fmt_f64(eps));
    }
    report.summary = summary;
    report.epsilon = Some(eps);
    report.envelope = analysis.problem.lifted().chain().envelope().map(EnvelopeSummary::from);
    report.theta_star = Some(analysis.problem.map().theta_star().to_vec());
    report.certificate = Some(CertificateSummary::from(&analysis.cert));
    report.constants = Some(analysis.constants);
    Ok(report)
}

struct SimulationPlan {
    problem: Problem,
    constants: Option<BoundConstants>,
    epsilon: f64,
    steps: usize,
}

fn plan_simulation(exp: &Experiment, opts: &RunOptions) -> Result<SimulationPlan, CliError> {
    let steps = explicit_steps(exp, opts);
    if let (Stepsize::Value(epsilon), Some(steps)) = (exp.config.epsilon, steps) {
        return Ok(SimulationPlan { problem: Problem::build(exp)?, constants: None, epsilon, steps });
    }
    let analysis = Analysis::new(exp)?;
    let epsilon = analysis.epsilon(exp);
    let steps = match steps {
        Some(s) => s,
        None => {
            let k = first_k_below(analysis.constants.t_star, epsilon, &analysis.rate, SCAN_CAP)?;
            default_steps(k)
        }
    };
    Ok(SimulationPlan { problem: analysis.problem, constants: Some(analysis.constants), epsilon, steps })
}

fn simulate_mse(
    exp: &Experiment,
    opts: &RunOptions,
    problem: &Problem,
    epsilon: f64,
    steps: usize,
) -> Result<MseCurve, CliError> {
    let noise = problem.noise(exp)?;
    Ok(monte_carlo_mse(
        problem.map(),
        &noise,
        &problem.centered_start(exp),
        epsilon,
        steps,
        trajectories(exp, opts),
        master_seed(exp, opts),
        opts.allow_diverged,
    )?)
}

pub fn cmd_simulate(exp: &Experiment, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut report = RunReport::new(Command::Simulate, exp.config.algorithm);
    let plan = plan_simulation(exp, opts)?;
    let mse = simulate_mse(exp, opts, &plan.problem, plan.epsilon, plan.steps)?;
    let path = opts.out.join("mse.csv");
    write_csv(
        &path,
        &["k", "mse", "stderr"],
        mse.mean.iter().zip(&mse.stderr).enumerate().map(|(k, (m, s))| vec![k.to_string(), fmt_f64(*m), fmt_f64(*s)]),
    )?;
    report.files.push("mse.csv".into());
    report.summary = format!(
        "{} trajectories, {} steps, epsilon {}; {} diverged; final mse {}",
        mse.n_trajectories + mse.n_diverged,
        plan.steps,
        fmt_f64(plan.epsilon),
        mse.n_diverged,
        fmt_f64(*mse.mean.last().unwrap_or(&0.0))
    );
    report.epsilon = Some(plan.epsilon);
    report.steps = Some(plan.steps);
    report.theta_star = Some(plan.problem.map().theta_star().to_vec());
    report.constants = plan.constants;
    Ok(report)
}

/// Bound curve from derived constants, or from a constants file when one is
/// given. File constants are evaluated as written, without validity checks.
fn plan_bound(exp: &Experiment, opts: &RunOptions) -> Result<(Problem, BoundConstants, BoundCurve, bool), CliError> {
    let (problem, constants, rate, from_file) = match &opts.constants {
        Some(path) => {
            let constants = load_constants(path)?;
            let problem = Problem::build(exp)?;
            let rate = problem.rate()?;
            (problem, constants, rate, true)
        }
        None => {
            let a = Analysis::new(exp)?;
            (a.problem, a.constants, a.rate, false)
        }
    };
    let epsilon = resolve_epsilon(exp.config.epsilon, &constants);
    let theta0_norm = problem.centered_start(exp).norm();
    let steps = match explicit_steps(exp, opts) {
        Some(s) => s,
        None => default_steps(first_k_below(constants.t_star, epsilon, &rate, SCAN_CAP)?),
    };
    let curve = if from_file {
        evaluate_bound_curve(&constants, epsilon, theta0_norm, steps, &rate)?
    } else {
        bound_curve(&constants, epsilon, theta0_norm, steps, &rate)?
    };
    Ok((problem, constants, curve, from_file))
}

pub fn cmd_bound(exp: &Experiment, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut report = RunReport::new(Command::Bound, exp.config.algorithm);
    let (problem, constants, curve, from_file) = plan_bound(exp, opts)?;
    let path = opts.out.join("bound.csv");
    write_csv(&path, &["k", "bound"], curve.values.iter().enumerate().map(|(k, b)| vec![k.to_string(), fmt_f64(*b)]))?;
    report.files.push("bound.csv".into());
    report.summary = format!(
        "{} steps, epsilon {}, k_eps = {}, contraction {}{}",
        curve.values.len() - 1,
        fmt_f64(curve.epsilon),
        curve.k_eps,
        fmt_f64(curve.contraction),
        if from_file { " (constants from file)" } else { "" }
    );
    report.epsilon = Some(curve.epsilon);
    report.k_eps = Some(curve.k_eps);
    report.steps = Some(curve.values.len() - 1);
    report.theta_star = Some(problem.map().theta_star().to_vec());
    report.constants = Some(constants);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub k: usize,
    pub mse: f64,
    pub stderr: f64,
    pub bound: f64,
    pub dominated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub first_violation: Option<usize>,
}

/// Row k is dominated iff mse + 3·stderr ≤ bound.
pub fn compare_curves(mse: &MseCurve, bound: &BoundCurve) -> Result<Comparison, CliError> {
    if mse.mean.len() != bound.values.len() {
        return Err(CliError::Core(sa_lab_core::Error::DimensionMismatch(format!(
            "mse curve has {} points, bound has {}",
            mse.mean.len(),
            bound.values.len()
        ))));
    }
    let rows: Vec<ComparisonRow> = (0..mse.mean.len())
        .map(|k| ComparisonRow {
            k,
            mse: mse.mean[k],
            stderr: mse.stderr[k],
            bound: bound.values[k],
            dominated: mse.mean[k] + 3.0 * mse.stderr[k] <= bound.values[k],
        })
        .collect();
    let first_violation = rows.iter().position(|r| !r.dominated);
    Ok(Comparison { rows, first_violation })
}

pub fn cmd_compare(exp: &Experiment, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut report = RunReport::new(Command::Compare, exp.config.algorithm);
    let (problem, constants, curve, from_file) = plan_bound(exp, opts)?;
    let steps = curve.values.len() - 1;
    let mse = simulate_mse(exp, opts, &problem, curve.epsilon, steps)?;
    let cmp = compare_curves(&mse, &curve)?;
    let path = opts.out.join("compare.csv");
    write_csv(
        &path,
        &["k", "mse", "stderr", "bound", "dominated"],
        cmp.rows.iter().map(|r| {
            vec![
                r.k.to_string(),
                fmt_f64(r.mse),
                fmt_f64(r.stderr),
                fmt_f64(r.bound),
                u8::from(r.dominated).to_string(),
            ]
        }),
    )?;
    report.files.push("compare.csv".into());
    report.passed = cmp.first_violation.is_none();
    report.first_violation = cmp.first_violation;
    let violations = cmp.rows.iter().filter(|r| !r.dominated).count();
    report.summary = match cmp.first_violation {
        None => format!("dominated at all {} rows", cmp.rows.len()),
        Some(k) => format!("domination fails at {violations} of {} rows; first violation at k = {k}", cmp.rows.len()),
    };
    if from_file {
        report.summary.push_str(" (constants from file)");
    }
    report.epsilon = Some(curve.epsilon);
    report.k_eps = Some(curve.k_eps);
    report.steps = Some(steps);
    report.theta_star = Some(problem.map().theta_star().to_vec());
    report.constants = Some(constants);
    Ok(report)
}
