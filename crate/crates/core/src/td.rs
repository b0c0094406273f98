//! TD(0) with linear function approximation as a step map over the
//! (s, u, s') noise chain.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lyapunov::{solve_lyapunov, spectral_abscissa, HURWITZ_TOL};
use crate::mdp::{induce_chain, lift_transition, policy_transition, ChainModel, LiftedChain, Mdp, Policy};
use crate::report::{CheckReport, VerifyOptions};
use crate::sa_core::{
    certify_ergodic_bias, check_lipschitz_growth, eval_f, random_unit, stream, InitialDistribution, MarkovNoise,
    StepMap,
};

/// Smallest singular value below which a feature matrix counts as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Column-rank and row-norm diagnostics of a feature matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureDiagnostics {
    pub min_singular_value: f64,
    pub max_row_norm: f64,
}

impl FeatureDiagnostics {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let min_singular_value = if m.nrows() < m.ncols() {
            0.0
        } else {
            m.clone().svd(false, false).singular_values.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let max_row_norm = m.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        Self { min_singular_value, max_row_norm }
    }

    pub fn full_rank(&self) -> bool {
        self.min_singular_value > RANK_TOL
    }

    pub fn bounded(&self) -> bool {
        self.max_row_norm <= 1.0 + 1e-12
    }

    pub fn record(&self, report: &mut CheckReport) {
        report.push(
            "features.rank",
            self.full_rank(),
            format!("smallest singular value {:.6e}", self.min_singular_value),
        );
        report.push("features.norm", self.bounded(), format!("largest feature norm {:.6}", self.max_row_norm));
    }

    pub fn require(&self) -> Result<()> {
        if !self.full_rank() {
            return Err(Error::InvalidInput(format!(
                "feature matrix is rank deficient (smallest singular value {:e})",
                self.min_singular_value
            )));
        }
        if !self.bounded() {
            return Err(Error::InvalidInput(format!(
                "feature vectors must have norm at most 1 (found {})",
                self.max_row_norm
            )));
        }
        Ok(())
    }
}

/// State features Φ, one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(Error::InvalidInput("feature matrix is empty".into()));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features must be finite".into()));
        }
        Ok(Self { phi })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn diagnostics(&self) -> FeatureDiagnostics {
        FeatureDiagnostics::of(&self.phi)
    }
}

/// max(2, r̄ + 2‖θ*‖, 1 + γ, r̄).
pub fn td_l(r_bar: f64, theta_star_norm: f64, gamma: f64) -> f64 {
    2.0_f64.max(r_bar + 2.0 * theta_star_norm).max(1.0 + gamma).max(r_bar)
}

/// TD(0) instance in centered coordinates.
#[derive(Debug, Clone)]
pub struct TdProblem {
    mdp: Mdp,
    policy: Policy,
    features: FeatureMap,
    state_chain: ChainModel,
    lifted: LiftedChain,
    a: DMatrix<f64>,
    b: DVector<f64>,
    r_pi: DVector<f64>,
    theta_star: Vec<f64>,
    lipschitz: f64,
    /// Per noise state x = (s, u, s'): the row φ(s), the direction
    /// γφ(s') − φ(s), and the offset R(s,u) + (γφ(s') − φ(s))ᵀθ*.
    terms: Vec<(usize, Vec<f64>, f64)>,
}

pub fn build_td(mdp: &Mdp, policy: &Policy, features: &FeatureMap) -> Result<TdProblem> {
    let n = mdp.n_states();
    let phi = features.matrix();
    if phi.nrows() != n {
        return Err(Error::DimensionMismatch(format!("features have {} rows, MDP has {n} states", phi.nrows())));
    }
    features.diagnostics().require()?;
    let state_chain = induce_chain(mdp, policy)?;
    let lifted = lift_transition(mdp, policy)?;
    let p = policy_transition(mdp, policy)?;
    let gamma = mdp.gamma();

    let mu = state_chain.stationary();
    let r_pi = DVector::from_fn(n, |s, _| (0..mdp.n_actions()).map(|u| policy.prob(s, u) * mdp.reward(s, u)).sum());
    let dphi = DMatrix::from_fn(n, phi.ncols(), |s, j| mu[s] * phi[(s, j)]);
    let a = dphi.transpose() * (&p * phi * gamma - phi);
    let b = dphi.transpose() * &r_pi;

    let max_real = spectral_abscissa(&a);
    if !(max_real < -HURWITZ_TOL) {
        return Err(Error::NotHurwitz { max_real });
    }
    let theta_star =
        -a.clone().lu().solve(&b).ok_or_else(|| Error::SolveSingular("TD drift matrix is singular".into()))?;
    let lipschitz = td_l(mdp.r_bar(), theta_star.norm(), gamma);

    let d = phi.ncols();
    let terms = lifted
        .triples()
        .iter()
        .map(|&(s, u, s2)| {
            let dir: Vec<f64> = (0..d).map(|j| gamma * phi[(s2, j)] - phi[(s, j)]).collect();
            let offset = mdp.reward(s, u) + dir.iter().zip(theta_star.iter()).map(|(c, t)| c * t).sum::<f64>();
            (s, dir, offset)
        })
        .collect();

    Ok(TdProblem {
        mdp: mdp.clone(),
        policy: policy.clone(),
        features: features.clone(),
        state_chain,
        lifted,
        a,
        b,
        r_pi,
        theta_star: theta_star.as_slice().to_vec(),
        lipschitz,
        terms,
    })
}

impl TdProblem {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn r_pi(&self) -> &DVector<f64> {
        &self.r_pi
    }

    pub fn theta_star_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_star)
    }

    pub fn mdp(&self) -> &Mdp {
        &self.mdp
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn state_chain(&self) -> &ChainModel {
        &self.state_chain
    }

    pub fn lifted(&self) -> &LiftedChain {
        &self.lifted
    }

    pub fn noise(&self, initial: InitialDistribution) -> Result<MarkovNoise> {
        MarkovNoise::new(self.lifted.chain().clone(), initial)
    }

    /// Centered TD direction at noise state `x`.
    pub fn td_f(&self, theta: &DVector<f64>, x: usize) -> DVector<f64> {
        eval_f(self, theta, x)
    }

    /// Uncentered TD(0) direction φ(s)[R(s,u) + (γφ(s') − φ(s))ᵀθ].
    pub fn td0_direction(&self, theta: &DVector<f64>, x: usize) -> DVector<f64> {
        let (s, u, s2) = self.lifted.triple(x);
        let phi = self.features.matrix();
        let gamma = self.mdp.gamma();
        let td_error = self.mdp.reward(s, u) + (phi.row(s2) * gamma - phi.row(s)).dot(&theta.transpose());
        phi.row(s).transpose() * td_error
    }
}

impl StepMap for TdProblem {
    fn dim(&self) -> usize {
        self.features.dim()
    }

    fn alphabet_size(&self) -> Option<usize> {
        Some(self.terms.len())
    }

    fn f(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        let (s, dir, offset) = &self.terms[x];
        let scale = dir.iter().zip(theta).map(|(c, t)| c * t).sum::<f64>() + offset;
        let phi = self.features.matrix();
        for (j, o) in out.iter_mut().enumerate() {
            *o = phi[(*s, j)] * scale;
        }
    }

    fn f_bar(&self, theta: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..theta.len()).map(|j| self.a[(i, j)] * theta[j]).sum();
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }
}

pub(crate) fn unit_directions(d: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream(seed);
    (0..count).map(|_| random_unit(&mut rng, d)).collect()
}

/// Exact ergodic-bias certification of a step map on its noise chain.
pub(crate) fn record_assumption3<M: StepMap>(
    map: &M,
    chain: &ChainModel,
    opts: &VerifyOptions,
    report: &mut CheckReport,
) {
    let name = "assumption3.ergodic_bias";
    let envelope = match chain.require_envelope() {
        Ok(e) => e,
        Err(e) => {
            report.push(name, false, e.to_string());
            return;
        }
    };
    let rate = envelope.rate();
    let noise = match MarkovNoise::new(chain.clone(), InitialDistribution::default()) {
        Ok(n) => n,
        Err(e) => {
            report.push(name, false, e.to_string());
            return;
        }
    };
    let thetas = unit_directions(map.dim(), opts.bias_directions, opts.seed ^ 0xB1A5);
    match certify_ergodic_bias(map, &noise, &rate, &thetas, opts.max_window, opts.max_offset) {
        Ok(c) => report.push(
            name,
            c.violations == 0,
            format!(
                "{} violations in {} windows (c0 = {:.6e}, eta = {:.6}, worst ratio {:.3e})",
                c.violations, c.checked, rate.c0, rate.eta, c.worst_ratio
            ),
        ),
        Err(e) => report.push(name, false, e.to_string()),
    }
}

pub(crate) fn record_assumption1<M: StepMap>(map: &M, opts: &VerifyOptions, report: &mut CheckReport) {
    let radius = 10.0 * (DVector::from_column_slice(map.theta_star()).norm() + 1.0);
    let lip = check_lipschitz_growth(map, opts.lipschitz_samples, radius, opts.seed);
    report.push(
        "assumption1.lipschitz_growth",
        lip.pass,
        format!(
            "sampled Lipschitz {:.6}, growth {:.6}, declared L {:.6}",
            lip.lipschitz_estimate, lip.growth_estimate, lip.declared
        ),
    );
}

pub(crate) fn record_chain(prefix: &str, chain: &ChainModel, report: &mut CheckReport) {
    report.push(&format!("{prefix}.irreducible"), chain.irreducible(), format!("{} states", chain.n_states()));
    report.push(&format!("{prefix}.aperiodic"), chain.aperiodic(), format!("period {}", chain.period()));
}

/// Checks the TD assumptions on a built problem.
pub fn verify_td_assumptions(problem: &TdProblem, opts: &VerifyOptions) -> CheckReport {
    let mut report = CheckReport::default();
    problem.features.diagnostics().record(&mut report);
    record_chain("chain", &problem.state_chain, &mut report);
    record_chain("noise_chain", problem.lifted.chain(), &mut report);

    let sym = (&problem.a + problem.a.transpose()) * 0.5;
    let sym_max = sym.symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    report.push(
        "drift.negative_definite",
        sym_max < 0.0,
        format!("largest eigenvalue of the symmetric part {sym_max:.6e}"),
    );
    let abscissa = spectral_abscissa(&problem.a);
    report.push("drift.hurwitz", abscissa < -HURWITZ_TOL, format!("spectral abscissa {abscissa:.6e}"));

    let eq = (&problem.a * problem.theta_star_vec() + &problem.b).amax();
    report.push("equilibrium.residual", eq <= 1e-10, format!("max |Aθ* + b| = {eq:.3e}"));

    let mu = problem.lifted.chain().stationary();
    let mut worst = 0.0_f64;
    for theta in unit_directions(problem.dim(), 100, opts.seed ^ 0xF0) {
        let theta = theta * 3.0;
        let mut avg = DVector::zeros(problem.dim());
        for x in 0..problem.terms.len() {
            avg += problem.td_f(&theta, x) * mu[x];
        }
        worst = worst.max((avg - &problem.a * &theta).amax());
    }
    report.push("mean_field.consistency", worst <= 1e-10, format!("max |Σ μ f(θ,x) − Aθ| = {worst:.3e}"));

    match solve_lyapunov(&problem.a, &DMatrix::identity(problem.dim(), problem.dim()), problem.lipschitz) {
        Ok(cert) => report.push(
            "lyapunov.residual",
            cert.residual <= 1e-10,
            format!("relative residual {:.3e}, c1 = {:.6e}, c2 = {:.6e}", cert.residual, cert.c1, cert.c2),
        ),
        Err(e) => report.push("lyapunov.residual", false, e.to_string()),
    }

    record_assumption1(problem, opts, &mut report);
    record_assumption3(problem, problem.lifted.chain(), opts, &mut report);
    report
}

/// Runs the feature checks, then builds and verifies when possible.
pub fn verify_td_setup(mdp: &Mdp, policy: &Policy, features: &FeatureMap, opts: &VerifyOptions) -> CheckReport {
    match build_td(mdp, policy, features) {
        Ok(problem) => verify_td_assumptions(&problem, opts),
        Err(e) => {
            let mut report = CheckReport::default();
            features.diagnostics().record(&mut report);
            report.push("build", false, e.to_string());
            report
        }
    }
}
