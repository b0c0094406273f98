//! Q-learning with linear function approximation as a step map over the
//! (s, u, s') noise chain.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyapunov::QuadraticLyapunov;
use crate::mdp::{induce_chain, lift_transition, ChainModel, LiftedChain, Mdp, Policy};
use crate::report::{CheckReport, VerifyOptions};
use crate::sa_core::{random_unit, stream, InitialDistribution, MarkovNoise, StepMap};
use crate::td::{record_assumption1, record_assumption3, record_chain, unit_directions, FeatureDiagnostics};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
pub const MIN_SPHERE_POINTS: usize = 100;
/// Decay constant used for damping when the sampled constant is not positive.
const FALLBACK_C: f64 = 0.01;
const NEWTON_EVERY: usize = 100;
const ASCENT_ROUNDS: usize = 100;

/// State-action features Ψ, one row per pair in (s, u) order.
#[derive(Debug, Clone, PartialEq)]
pub struct QFeatureMap {
    psi: DMatrix<f64>,
    n_actions: usize,
}

impl QFeatureMap {
    pub fn new(psi: DMatrix<f64>, n_actions: usize) -> Result<Self> {
        if psi.nrows() == 0 || psi.ncols() == 0 || n_actions == 0 {
            return Err(Error::InvalidInput("feature matrix is empty".into()));
        }
        if !psi.nrows().is_multiple_of(n_actions) {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows is not a multiple of {n_actions} actions",
                psi.nrows()
            )));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features must be finite".into()));
        }
        Ok(Self { psi, n_actions })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row_index(&self, s: usize, u: usize) -> usize {
        s * self.n_actions + u
    }

    pub fn diagnostics(&self) -> FeatureDiagnostics {
        FeatureDiagnostics::of(&self.psi)
    }

    fn dot(&self, s: usize, u: usize, theta: &[f64]) -> f64 {
        let r = self.row_index(s, u);
        theta.iter().enumerate().map(|(j, t)| self.psi[(r, j)] * t).sum()
    }

    /// Lowest action attaining max_u ψ(s,u)ᵀθ.
    pub fn greedy(&self, s: usize, theta: &[f64]) -> usize {
        let mut best = 0;
        let mut best_val = self.dot(s, 0, theta);
        for u in 1..self.n_actions {
            let v = self.dot(s, u, theta);
            if v > best_val {
                best = u;
                best_val = v;
            }
        }
        best
    }

    pub fn max_value(&self, s: usize, theta: &[f64]) -> f64 {
        self.dot(s, self.greedy(s, theta), theta)
    }

    /// Lowest action attaining max_u (ψ(s,u)ᵀθ)².
    fn greedy_sq(&self, s: usize, theta: &[f64]) -> usize {
        let mut best = 0;
        let mut best_val = self.dot(s, 0, theta).powi(2);
        for u in 1..self.n_actions {
            let v = self.dot(s, u, theta).powi(2);
            if v > best_val {
                best = u;
                best_val = v;
            }
        }
        best
    }
}

/// max{γ + 1, r̄ + (γ + 1)‖θ*‖}.
pub fn q_l(r_bar: f64, theta_star_norm: f64, gamma: f64) -> f64 {
    (gamma + 1.0).max(r_bar + (gamma + 1.0) * theta_star_norm)
}

/// The expected update F̄ and the quadratic form of the sampling condition,
/// both as finite sums over the stationary law of the (s, u, s') chain.
#[derive(Debug, Clone)]
pub struct QOperator {
    features: QFeatureMap,
    gamma: f64,
    n_states: usize,
    /// Σ = Σ_x μ(x) ψ(s,u)ψ(s,u)ᵀ.
    second_moment: DMatrix<f64>,
    /// Σ_x μ(x) R(s,u) ψ(s,u).
    offset: DVector<f64>,
    /// Column s' holds Σ_{(s,u)} μ(s,u,s') ψ(s,u).
    next_cols: DMatrix<f64>,
    /// Next-state marginal of μ.
    next_weight: Vec<f64>,
}

impl QOperator {
    pub fn new(mdp: &Mdp, features: &QFeatureMap, lifted: &LiftedChain) -> Result<Self> {
        let n = mdp.n_states();
        let na = mdp.n_actions();
        if features.n_actions() != na || features.matrix().nrows() != n * na {
            return Err(Error::DimensionMismatch(format!(
                "features have {} rows for {} actions, MDP needs {} rows",
                features.matrix().nrows(),
                features.n_actions(),
                n * na
            )));
        }
        let d = features.dim();
        let psi = features.matrix();
        let mu = lifted.chain().stationary();
        let mut second_moment = DMatrix::zeros(d, d);
        let mut offset = DVector::zeros(d);
        let mut next_cols = DMatrix::zeros(d, n);
        let mut next_weight = vec![0.0; n];
        for (x, &(s, u, s2)) in lifted.triples().iter().enumerate() {
            let row = psi.row(features.row_index(s, u)).transpose();
            second_moment += &row * row.transpose() * mu[x];
            offset += &row * (mu[x] * mdp.reward(s, u));
            let mut col = next_cols.column_mut(s2);
            col += &row * mu[x];
            next_weight[s2] += mu[x];
        }
        Ok(Self {
            features: features.clone(),
            gamma: mdp.gamma(),
            n_states: n,
            second_moment,
            offset,
            next_cols,
            next_weight,
        })
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    /// F̄(θ) for uncentered θ.
    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.offset - &self.second_moment * theta;
        for s2 in 0..self.n_states {
            let m = self.features.max_value(s2, theta.as_slice());
            out += self.next_cols.column(s2) * (self.gamma * m);
        }
        out
    }

    pub fn greedy_pattern(&self, theta: &DVector<f64>) -> Vec<usize> {
        (0..self.n_states).map(|s| self.features.greedy(s, theta.as_slice())).collect()
    }

    /// Matrix M with F̄(θ) = offset + Mθ on the region where `pattern` is greedy.
    pub fn linearization(&self, pattern: &[usize]) -> DMatrix<f64> {
        let psi = self.features.matrix();
        let mut m = -self.second_moment.clone();
        for (s2, &u) in pattern.iter().enumerate() {
            let row = psi.row(self.features.row_index(s2, u));
            m += self.next_cols.column(s2) * row * self.gamma;
        }
        m
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    /// γ² E[max_u (ψ(s',u)ᵀθ)²] − E[(ψ(s,u)ᵀθ)²].
    pub fn sampling_lhs(&self, theta: &DVector<f64>) -> f64 {
        let g2 = self.gamma * self.gamma;
        let mut acc = -(theta.transpose() * &self.second_moment * theta)[(0, 0)];
        for s2 in 0..self.n_states {
            let u = self.features.greedy_sq(s2, theta.as_slice());
            acc += g2 * self.next_weight[s2] * self.features.dot(s2, u, theta.as_slice()).powi(2);
        }
        acc
    }

    /// Quadratic form that agrees with `sampling_lhs` on the region where
    /// `pattern` maximizes the squared next-state value.
    fn sampling_form(&self, pattern: &[usize]) -> DMatrix<f64> {
        let psi = self.features.matrix();
        let g2 = self.gamma * self.gamma;
        let mut m = -self.second_moment.clone();
        for (s2, &u) in pattern.iter().enumerate() {
            let row = psi.row(self.features.row_index(s2, u)).transpose();
            m += &row * row.transpose() * (g2 * self.next_weight[s2]);
        }
        m
    }

    /// Monotone ascent of the sampling left side from a unit vector: fix the
    /// squared-argmax pattern, jump to the top eigenvector of its form, repeat.
    fn ascend(&self, start: DVector<f64>) -> (f64, DVector<f64>) {
        let mut theta = start;
        let mut value = self.sampling_lhs(&theta);
        for _ in 0..ASCENT_ROUNDS {
            let pattern: Vec<usize> =
                (0..self.n_states).map(|s| self.features.greedy_sq(s, theta.as_slice())).collect();
            let eig = self.sampling_form(&pattern).symmetric_eigen();
            let top = eig.eigenvalues.imax();
            let cand = eig.eigenvectors.column(top).into_owned();
            let cand_value = self.sampling_lhs(&cand);
            if cand_value <= value {
                break;
            }
            theta = cand;
            value = cand_value;
        }
        (value, theta)
    }
}

/// Sampled estimate of the decay constant in the sampling condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    /// −max of the left side over the sampled unit vectors.
    pub c_est: f64,
    pub n_samples: usize,
    /// Always true: the estimate comes from finitely many directions.
    pub sampled: bool,
    pub worst_direction: Vec<f64>,
}

impl SamplingReport {
    pub fn passed(&self) -> bool {
        self.c_est > 0.0
    }
}

fn sphere_starts(d: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut points = Vec::with_capacity(n.max(2 * d));
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut e = DVector::zeros(d);
            e[j] = sign;
            points.push(e);
        }
    }
    let mut rng = stream(seed);
    while points.len() < n {
        points.push(random_unit(&mut rng, d));
    }
    points
}

pub fn sample_condition(op: &QOperator, n_sphere: usize, seed: u64) -> Result<SamplingReport> {
    if n_sphere < MIN_SPHERE_POINTS {
        return Err(Error::InvalidInput(format!(
            "sampling needs at least {MIN_SPHERE_POINTS} directions, got {n_sphere}"
        )));
    }
    let starts = sphere_starts(op.features.dim(), n_sphere, seed);
    let results: Vec<(f64, DVector<f64>)> = starts.into_par_iter().map(|t| op.ascend(t)).collect();
    let mut best = (f64::NEG_INFINITY, DVector::zeros(op.features.dim()));
    for r in results {
        if r.0 > best.0 {
            best = r;
        }
    }
    Ok(SamplingReport {
        c_est: -best.0,
        n_samples: n_sphere,
        sampled: true,
        worst_direction: best.1.as_slice().to_vec(),
    })
}

pub fn check_sampling_condition(
    mdp: &Mdp,
    policy: &Policy,
    features: &QFeatureMap,
    n_sphere: usize,
    seed: u64,
) -> Result<SamplingReport> {
    let lifted = lift_transition(mdp, policy)?;
    sample_condition(&QOperator::new(mdp, features, &lifted)?, n_sphere, seed)
}

/// F̄(θ) at an uncentered θ.
pub fn expected_update(
    theta: &DVector<f64>,
    mdp: &Mdp,
    policy: &Policy,
    features: &QFeatureMap,
) -> Result<DVector<f64>> {
    if theta.len() != features.dim() {
        return Err(Error::DimensionMismatch(format!(
            "θ has length {}, features have dimension {}",
            theta.len(),
            features.dim()
        )));
    }
    let lifted = lift_transition(mdp, policy)?;
    Ok(QOperator::new(mdp, features, &lifted)?.apply(theta))
}

/// Damped iteration θ ← θ + αF̄(θ) with step halving on residual increase and
/// a periodic Newton step on the current greedy region.
pub fn fixed_point(op: &QOperator, c_est: f64, tol: f64, max_iter: usize) -> Result<DVector<f64>> {
    let c = if c_est > 0.0 { c_est } else { FALLBACK_C };
    let mut alpha = 0.5 * c / (op.gamma + 1.0).powi(2);
    let mut theta = DVector::zeros(op.features.dim());
    let mut r = op.apply(&theta);
    let mut rn = r.norm();
    for iter in 0..max_iter {
        if rn <= tol {
            return Ok(theta);
        }
        if iter % NEWTON_EVERY == 0 {
            let m = op.linearization(&op.greedy_pattern(&theta));
            if let Some(cand) = m.lu().solve(&(-op.offset())) {
                let cr = op.apply(&cand);
                if cr.norm() < rn {
                    theta = cand;
                    rn = cr.norm();
                    r = cr;
                    continue;
                }
            }
        }
        let cand = &theta + &r * alpha;
        let cr = op.apply(&cand);
        if cr.norm() <= rn {
            theta = cand;
            rn = cr.norm();
            r = cr;
        } else {
            alpha *= 0.5;
        }
    }
    if rn <= tol {
        return Ok(theta);
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: rn, c_est })
}

pub fn solve_q_fixed_point(
    mdp: &Mdp,
    policy: &Policy,
    features: &QFeatureMap,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let lifted = lift_transition(mdp, policy)?;
    let op = QOperator::new(mdp, features, &lifted)?;
    let sampling = sample_condition(&op, QOptions::default().n_sphere, QOptions::default().seed)?;
    fixed_point(&op, sampling.c_est, tol, max_iter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QOptions {
    pub n_sphere: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QOptions {
    fn default() -> Self {
        Self { n_sphere: 256, seed: 0x5eed, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

/// Q-learning instance in centered coordinates.
#[derive(Debug, Clone)]
pub struct QProblem {
    mdp: Mdp,
    policy: Policy,
    features: QFeatureMap,
    state_chain: ChainModel,
    lifted: LiftedChain,
    op: QOperator,
    sampling: SamplingReport,
    theta_star: Vec<f64>,
    lipschitz: f64,
    residual: f64,
}

pub fn build_q(mdp: &Mdp, policy: &Policy, features: &QFeatureMap, opts: &QOptions) -> Result<QProblem> {
    features.diagnostics().require()?;
    let state_chain = induce_chain(mdp, policy)?;
    let lifted = lift_transition(mdp, policy)?;
    let op = QOperator::new(mdp, features, &lifted)?;
    let sampling = sample_condition(&op, opts.n_sphere, opts.seed)?;
    let theta_star = fixed_point(&op, sampling.c_est, opts.tol, opts.max_iter)?;
    let residual = op.apply(&theta_star).norm();
    let lipschitz = q_l(mdp.r_bar(), theta_star.norm(), mdp.gamma());
    Ok(QProblem {
        mdp: mdp.clone(),
        policy: policy.clone(),
        features: features.clone(),
        state_chain,
        lifted,
        op,
        sampling,
        theta_star: theta_star.as_slice().to_vec(),
        lipschitz,
        residual,
    })
}

impl QProblem {
    pub fn mdp(&self) -> &Mdp {
        &self.mdp
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn features(&self) -> &QFeatureMap {
        &self.features
    }

    pub fn state_chain(&self) -> &ChainModel {
        &self.state_chain
    }

    pub fn lifted(&self) -> &LiftedChain {
        &self.lifted
    }

    pub fn operator(&self) -> &QOperator {
        &self.op
    }

    pub fn sampling(&self) -> &SamplingReport {
        &self.sampling
    }

    pub fn c_est(&self) -> f64 {
        self.sampling.c_est
    }

    pub fn fixed_point_residual(&self) -> f64 {
        self.residual
    }

    pub fn theta_star_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_star)
    }

    pub fn noise(&self, initial: InitialDistribution) -> Result<MarkovNoise> {
        MarkovNoise::new(self.lifted.chain().clone(), initial)
    }

    /// c3 = c/((2 − c)L) for W(θ̃) = ‖θ̃‖²/2.
    pub fn decay_constant(&self) -> f64 {
        let c = self.sampling.c_est;
        c / ((2.0 - c) * self.lipschitz)
    }

    /// Fails when the sampled constant is not positive.
    pub fn certificate(&self) -> Result<QuadraticLyapunov> {
        if !self.sampling.passed() {
            return Err(Error::InvalidInput(format!(
                "sampling condition failed (c_est = {}); no Lyapunov certificate",
                self.sampling.c_est
            )));
        }
        QuadraticLyapunov::half_norm(self.dim(), self.decay_constant(), self.lipschitz)
    }

    /// Centered Q-learning direction at noise state `x`.
    pub fn q_f(&self, theta: &DVector<f64>, x: usize) -> DVector<f64> {
        crate::sa_core::eval_f(self, theta, x)
    }
}

impl StepMap for QProblem {
    fn dim(&self) -> usize {
        self.features.dim()
    }

    fn alphabet_size(&self) -> Option<usize> {
        Some(self.lifted.triples().len())
    }

    fn f(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        let (s, u, s2) = self.lifted.triple(x);
        let full: Vec<f64> = theta.iter().zip(&self.theta_star).map(|(a, b)| a + b).collect();
        let td_error = self.mdp.reward(s, u) + self.mdp.gamma() * self.features.max_value(s2, &full)
            - self.features.dot(s, u, &full);
        let r = self.features.row_index(s, u);
        let psi = self.features.matrix();
        for (j, o) in out.iter_mut().enumerate() {
            *o = psi[(r, j)] * td_error;
        }
    }

    fn f_bar(&self, theta: &[f64], out: &mut [f64]) {
        let full = DVector::from_iterator(theta.len(), theta.iter().zip(&self.theta_star).map(|(a, b)| a + b));
        out.copy_from_slice(self.op.apply(&full).as_slice());
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }
}

pub fn verify_q_assumptions(problem: &QProblem, opts: &VerifyOptions) -> CheckReport {
    let mut report = CheckReport::default();
    problem.features.diagnostics().record(&mut report);
    record_chain("chain", &problem.state_chain, &mut report);
    record_chain("noise_chain", problem.lifted.chain(), &mut report);
    let s = &problem.sampling;
    report.push(
        "sampling.condition",
        s.passed(),
        format!("c_est = {:.6e} (sampled over {} directions, not exhaustive)", s.c_est, s.n_samples),
    );
    report.push("fixed_point.residual", problem.residual <= 1e-8, format!("‖F̄(θ*)‖ = {:.3e}", problem.residual));

    let mut worst = 0.0_f64;
    let gamma = problem.mdp.gamma();
    for pair in unit_directions(problem.dim(), 2 * opts.bias_directions, opts.seed ^ 0x0E5).chunks(2) {
        let t1 = &pair[0] * 5.0;
        let t2 = &pair[1] * 5.0;
        let gap = (&t1 - &t2).norm();
        for x in 0..problem.lifted.triples().len() {
            let diff = (problem.q_f(&t1, x) - problem.q_f(&t2, x)).norm();
            worst = worst.max(diff / gap);
        }
    }
    report.push(
        "lipschitz.one_plus_gamma",
        worst <= gamma + 1.0 + 1e-12,
        format!("sampled ratio {worst:.6} against γ + 1 = {:.6}", gamma + 1.0),
    );
    record_assumption1(problem, opts, &mut report);

    match problem.certificate() {
        Ok(cert) => report.push("lyapunov.constants", true, format!("c1 = c2 = 0.5, c3 = {:.6e}, c4 = 1", cert.c3)),
        Err(_) => {
            report.push("lyapunov.constants", false, "c3 undefined because c_est ≤ 0; bound pipeline unavailable")
        }
    }
    record_assumption3(problem, problem.lifted.chain(), opts, &mut report);
    report
}

pub fn verify_q_setup(mdp: &Mdp, policy: &Policy, features: &QFeatureMap, opts: &VerifyOptions) -> CheckReport {
    let q_opts =
        QOptions { n_sphere: opts.sphere_points.max(MIN_SPHERE_POINTS), seed: opts.seed, ..QOptions::default() };
    match build_q(mdp, policy, features, &q_opts) {
        Ok(problem) => verify_q_assumptions(&problem, opts),
        Err(e) => {
            let mut report = CheckReport::default();
            features.diagnostics().record(&mut report);
            if let Ok(s) = check_sampling_condition(mdp, policy, features, q_opts.n_sphere, q_opts.seed) {
                report.push(
                    "sampling.condition",
                    s.passed(),
                    format!("c_est = {:.6e} (sampled over {} directions, not exhaustive)", s.c_est, s.n_samples),
                );
            }
            report.push("build", false, e.to_string());
            report
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sa_core::{monte_carlo_mse, SaRng};
    use crate::td::{build_td, FeatureMap};
    use proptest::prelude::*;
    use rand::Rng;

    fn single_action() -> (Mdp, Policy, DMatrix<f64>) {
        let p = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.3, 0.7]);
        let mdp = Mdp::new(vec![p], DMatrix::from_row_slice(2, 1, &[1.0, -0.5]), 0.5).unwrap();
        let phi = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.1, 0.9]);
        (mdp, Policy::uniform(2, 1), phi)
    }

    fn two_action() -> (Mdp, Policy) {
        let p0 = DMatrix::from_row_slice(3, 3, &[0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.4, 0.4, 0.2]);
        let p1 = DMatrix::from_row_slice(3, 3, &[0.2, 0.2, 0.6, 0.3, 0.3, 0.4, 0.7, 0.1, 0.2]);
        let r = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -0.5, 0.8, 0.2, -1.0]);
        (Mdp::new(vec![p0, p1], r, 0.5).unwrap(), Policy::uniform(3, 2))
    }

    fn value_iteration(mdp: &Mdp) -> DMatrix<f64> {
        let (n, na) = (mdp.n_states(), mdp.n_actions());
        let mut q = DMatrix::zeros(n, na);
        loop {
            let v = DVector::from_fn(n, |s, _| q.row(s).max());
            let next = DMatrix::from_fn(n, na, |s, u| {
                mdp.reward(s, u) + mdp.gamma() * (mdp.transition(u).row(s) * &v)[(0, 0)]
            });
            let change = (&next - &q).amax();
            q = next;
            if change < 1e-15 {
                return q;
            }
        }
    }

    #[test]
    fn single_action_reduces_to_td() {
        let (mdp, policy, phi) = single_action();
        let td = build_td(&mdp, &policy, &FeatureMap::new(phi.clone()).unwrap()).unwrap();
        let q = build_q(&mdp, &policy, &QFeatureMap::new(phi, 1).unwrap(), &QOptions::default()).unwrap();
        assert!((q.theta_star_vec() - td.theta_star_vec()).amax() < 1e-8);
        let mut rng: SaRng = stream(3);
        for _ in 0..50 {
            let theta = random_unit(&mut rng, 2) * 4.0;
            let lin = td.a() * (&theta + td.theta_star_vec()) + td.b();
            let upd = expected_update(&(&theta + td.theta_star_vec()), &mdp, &policy, q.features()).unwrap();
            assert!((lin - upd).amax() < 1e-12);
            for x in 0..4 {
                assert!((q.q_f(&theta, x) - td.td_f(&theta, x)).amax() < 1e-12);
            }
        }
        let theta0 = DVector::from_vec(vec![1.0, -1.0]);
        let noise_q = q.noise(InitialDistribution::PointMass(0)).unwrap();
        let noise_td = td.noise(InitialDistribution::PointMass(0)).unwrap();
        let a = monte_carlo_mse(&q, &noise_q, &theta0, 0.05, 100, 64, 9, false).unwrap();
        let b = monte_carlo_mse(&td, &noise_td, &theta0, 0.05, 100, 64, 9, false).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn single_action_sampling_constant_is_eigenvalue() {
        let (mdp, policy, phi) = single_action();
        let features = QFeatureMap::new(phi, 1).unwrap();
        let lifted = lift_transition(&mdp, &policy).unwrap();
        let op = QOperator::new(&mdp, &features, &lifted).unwrap();
        let lmin = op.second_moment().symmetric_eigenvalues().min();
        let s = check_sampling_condition(&mdp, &policy, &features, 128, 1).unwrap();
        assert!((s.c_est - (1.0 - 0.25) * lmin).abs() < 1e-12, "{} vs {}", s.c_est, 0.75 * lmin);
        assert!(s.sampled);
    }

    #[test]
    fn zero_discount_sampling_constant() {
        let (mdp, policy) = two_action();
        let mdp = Mdp::new(mdp.transitions().to_vec(), mdp.rewards().clone(), 0.0).unwrap();
        let psi = DMatrix::from_fn(6, 3, |i, j| if i % 3 == j { 0.7 } else { 0.2 });
        let features = QFeatureMap::new(psi, 2).unwrap();
        let lifted = lift_transition(&mdp, &policy).unwrap();
        let op = QOperator::new(&mdp, &features, &lifted).unwrap();
        let lmin = op.second_moment().symmetric_eigenvalues().min();
        let s = sample_condition(&op, 200, 2).unwrap();
        assert!((s.c_est - lmin).abs() < 1e-12);
    }

    #[test]
    fn aggressive_next_state_features_fail_sampling() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let mdp = Mdp::new(vec![p.clone(), p], DMatrix::from_element(2, 2, 0.0), 0.99).unwrap();
        let policy = Policy::new(DMatrix::from_row_slice(2, 2, &[0.99, 0.01, 0.99, 0.01])).unwrap();
        let psi = DMatrix::from_row_slice(4, 1, &[0.1, 1.0, 0.1, 1.0]);
        let features = QFeatureMap::new(psi, 2).unwrap();
        let s = check_sampling_condition(&mdp, &policy, &features, 100, 0).unwrap();
        assert!(s.c_est <= 0.0);
        assert!(!s.passed());
        let report = verify_q_setup(&mdp, &policy, &features, &VerifyOptions::default());
        assert!(!report.passed());
        assert!(!report.get("sampling.condition").unwrap().passed);
    }

    #[test]
    fn tabular_fixed_point_matches_value_iteration() {
        let (mdp, policy) = two_action();
        let features = QFeatureMap::new(DMatrix::identity(6, 6), 2).unwrap();
        let theta = solve_q_fixed_point(&mdp, &policy, &features, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let q = value_iteration(&mdp);
        for s in 0..3 {
            for u in 0..2 {
                assert!((theta[s * 2 + u] - q[(s, u)]).abs() < 1e-8);
            }
        }
        let residual = expected_update(&theta, &mdp, &policy, &features).unwrap().norm();
        assert!(residual <= DEFAULT_TOL);
    }

    #[test]
    fn q_l_examples() {
        assert_eq!(q_l(0.0, 0.0, 0.5), 1.5);
        assert!((q_l(1.0, 2.0, 0.9) - 4.8).abs() < 1e-15);
    }

    #[test]
    fn zero_bellman_residual_gives_zero_direction() {
        let (mdp, policy) = two_action();
        let features = QFeatureMap::new(DMatrix::identity(6, 6), 2).unwrap();
        let mdp0 = Mdp::new(mdp.transitions().to_vec(), DMatrix::zeros(3, 2), 0.5).unwrap();
        let q0 = build_q(&mdp0, &policy, &features, &QOptions::default()).unwrap();
        assert!(q0.theta_star_vec().amax() < 1e-12);
        for x in 0..q0.lifted().triples().len() {
            assert!(q0.q_f(&DVector::zeros(6), x).amax() < 1e-12);
        }
    }

    #[test]
    fn periodic_chain_reported() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mdp = Mdp::new(vec![p], DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), 0.5).unwrap();
        let features = QFeatureMap::new(DMatrix::identity(2, 2), 1).unwrap();
        let report = verify_q_setup(&mdp, &Policy::uniform(2, 1), &features, &VerifyOptions::default());
        assert!(!report.get("noise_chain.aperiodic").unwrap().passed);
        assert!(report.get("noise_chain.aperiodic").unwrap().detail.contains("period 2"));
    }

    #[test]
    fn two_action_instance_passes_verification() {
        let (mdp, policy) = two_action();
        let psi = DMatrix::from_fn(6, 3, |i, j| if i / 2 == j { 0.8 } else { 0.1 * ((i + j) % 3) as f64 });
        let features = QFeatureMap::new(psi, 2).unwrap();
        let report = verify_q_setup(&mdp, &policy, &features, &VerifyOptions::default());
        assert!(report.passed(), "{:#?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn expected_update_is_affine_along_rays() {
        let (mdp, policy) = two_action();
        let psi = DMatrix::from_fn(6, 3, |i, j| if i / 2 == j { 0.8 } else { 0.1 * ((i + j) % 3) as f64 });
        let features = QFeatureMap::new(psi, 2).unwrap();
        let mut rng: SaRng = stream(8);
        for _ in 0..50 {
            let theta = random_unit(&mut rng, 3);
            let f = |a: f64| expected_update(&(&theta * a), &mdp, &policy, &features).unwrap();
            let d1 = f(0.2) - f(0.1);
            let d2 = f(0.3) - f(0.2);
            assert!((d1 - d2).amax() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn sampling_lhs_is_homogeneous(seed in 0u64..500, alpha in 0.01f64..100.0) {
            let (mdp, policy) = two_action();
            let mut rng: SaRng = stream(seed);
            let psi = DMatrix::from_fn(6, 3, |_, _| rng.random::<f64>() * 0.5);
            let features = QFeatureMap::new(psi, 2).unwrap();
            let lifted = lift_transition(&mdp, &policy).unwrap();
            let op = QOperator::new(&mdp, &features, &lifted).unwrap();
            let theta = random_unit(&mut rng, 3);
            let base = op.sampling_lhs(&theta);
            let scaled = op.sampling_lhs(&(&theta * alpha));
            prop_assert!((scaled - alpha * alpha * base).abs() <= 1e-12 * alpha * alpha * (1.0 + base.abs()));
        }

        #[test]
        fn greedy_value_and_direction_are_lipschitz(seed in 0u64..500) {
            let (mdp, policy) = two_action();
            let mut rng: SaRng = stream(seed);
            let psi = DMatrix::from_fn(6, 3, |_, _| rng.random::<f64>() - 0.5);
            let psi = DMatrix::from_fn(6, 3, |i, j| psi[(i, j)] / psi.row(i).norm().max(1.0));
            let features = QFeatureMap::new(psi, 2).unwrap();
            let q = build_q(&mdp, &policy, &features, &QOptions::default()).unwrap();
            let star = q.theta_star_vec();
            for _ in 0..20 {
                let t1 = random_unit(&mut rng, 3) * (10.0 * rng.random::<f64>());
                let t2 = random_unit(&mut rng, 3) * (10.0 * rng.random::<f64>());
                let gap = (&t1 - &t2).norm();
                for s in 0..3 {
                    let m1 = features.max_value(s, (&t1 + &star).as_slice());
                    let m2 = features.max_value(s, (&t2 + &star).as_slice());
                    prop_assert!((m1 - m2).abs() <= gap + 1e-12);
                }
                for x in 0..q.lifted().triples().len() {
                    let diff = (q.q_f(&t1, x) - q.q_f(&t2, x)).norm();
                    prop_assert!(diff <= (mdp.gamma() + 1.0) * gap + 1e-12);
                }
            }
        }
    }
}
