//! Finite MDPs, induced Markov chains, stationary distributions and
//! total-variation mixing envelopes.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums of stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Default number of steps over which the total-variation curve is computed.
pub const DEFAULT_MIXING_HORIZON: usize = 200;

/// The curve is truncated once it falls below this level.
pub const TV_FLOOR: f64 = 1e-14;

fn check_row_stochastic(name: &str, m: &DMatrix<f64>) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        let mut sum = 0.0;
        for (j, &p) in row.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidInput(format!("{name}[{i}][{j}] = {p} is not a probability")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "{name} row {i} sums to {sum} (expected 1 within {ROW_SUM_TOL:e})"
            )));
        }
    }
    Ok(())
}

/// A finite MDP (S, U, P, R, γ).
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<DMatrix<f64>>,
    rewards: DMatrix<f64>,
    gamma: f64,
    r_bar: f64,
}

impl Mdp {
    /// `transitions[u]` is the `n×n` matrix of action `u`; `rewards` is `n×|U|`.
    pub fn new(transitions: Vec<DMatrix<f64>>, rewards: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n_actions = transitions.len();
        if n_actions == 0 {
            return Err(Error::InvalidInput("MDP needs at least one action".into()));
        }
        let n_states = transitions[0].nrows();
        if n_states == 0 {
            return Err(Error::InvalidInput("MDP needs at least one state".into()));
        }
        for (u, p) in transitions.iter().enumerate() {
            if p.nrows() != n_states || p.ncols() != n_states {
                return Err(Error::DimensionMismatch(format!(
                    "transition matrix for action {u} is {}x{}, expected {n_states}x{n_states}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            check_row_stochastic(&format!("P[{u}]"), p)?;
        }
        if rewards.nrows() != n_states || rewards.ncols() != n_actions {
            return Err(Error::DimensionMismatch(format!(
                "rewards are {}x{}, expected {n_states}x{n_actions}",
                rewards.nrows(),
                rewards.ncols()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("rewards must be finite".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidInput(format!("discount factor must lie in [0, 1), got {gamma}")));
        }
        let r_bar = rewards.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self { n_states, n_actions, transitions, rewards, gamma, r_bar })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transition(&self, action: usize) -> &DMatrix<f64> {
        &self.transitions[action]
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }

    pub fn rewards(&self) -> &DMatrix<f64> {
        &self.rewards
    }

    pub fn reward(&self, s: usize, u: usize) -> f64 {
        self.rewards[(s, u)]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Largest absolute reward.
    pub fn r_bar(&self) -> f64 {
        self.r_bar
    }
}

/// A stochastic policy π(u|s).
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

impl Policy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidInput("policy matrix is empty".into()));
        }
        check_row_stochastic("policy", &probs)?;
        Ok(Self { probs })
    }

    /// Uniform policy over `n_actions` actions.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, u: usize) -> f64 {
        self.probs[(s, u)]
    }

    fn check_shape(&self, mdp: &Mdp) -> Result<()> {
        if self.probs.nrows() != mdp.n_states() || self.probs.ncols() != mdp.n_actions() {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP has {} states and {} actions",
                self.probs.nrows(),
                self.probs.ncols(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Structural report on the directed graph of positive transition entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStructure {
    pub irreducible: bool,
    pub aperiodic: bool,
    /// Period of the class reachable from state 0.
    pub period: usize,
}

/// Certified geometric envelope `d_k ≤ c0·eta^k` of the total-variation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingEnvelope {
    pub c0: f64,
    pub eta: f64,
    /// Second-largest eigenvalue modulus used to seed `eta`.
    pub slem: f64,
    /// `tv_curve[k] = max_x d_TV(P^k(x,·), μ)` starting at `k = 0`.
    pub tv_curve: Vec<f64>,
    /// Whether the curve never increased by more than 1e-12.
    pub monotone: bool,
}

impl MixingEnvelope {
    pub fn rate(&self) -> GeometricRate {
        GeometricRate { c0: self.c0, eta: self.eta }
    }
}

/// A finite Markov chain together with its stationary law and, when the
/// chain is irreducible and aperiodic, a certified mixing envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    transition: DMatrix<f64>,
    stationary: DVector<f64>,
    structure: ChainStructure,
    envelope: Option<MixingEnvelope>,
}

impl ChainModel {
    /// Analyzes `transition` with the default mixing horizon.
    pub fn new(transition: DMatrix<f64>) -> Result<Self> {
        Self::with_horizon(transition, DEFAULT_MIXING_HORIZON)
    }

    pub fn with_horizon(transition: DMatrix<f64>, horizon: usize) -> Result<Self> {
        if transition.nrows() != transition.ncols() || transition.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "transition matrix is {}x{}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        check_row_stochastic("P", &transition)?;
        let structure = check_irreducible_aperiodic(&transition);
        let stationary = stationary_distribution(&transition)?;
        let envelope = if structure.irreducible && structure.aperiodic {
            Some(mixing_envelope(&transition, &stationary, horizon)?)
        } else {
            None
        };
        Ok(Self { transition, stationary, structure, envelope })
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }

    pub fn structure(&self) -> ChainStructure {
        self.structure
    }

    pub fn irreducible(&self) -> bool {
        self.structure.irreducible
    }

    pub fn aperiodic(&self) -> bool {
        self.structure.aperiodic
    }

    pub fn period(&self) -> usize {
        self.structure.period
    }

    pub fn envelope(&self) -> Option<&MixingEnvelope> {
        self.envelope.as_ref()
    }

    /// The envelope, or the reason it does not exist.
    pub fn require_envelope(&self) -> Result<&MixingEnvelope> {
        match &self.envelope {
            Some(e) => Ok(e),
            None if !self.structure.aperiodic => Err(Error::PeriodicChain { period: self.structure.period }),
            None => {
                Err(Error::EnvelopeFailure("chain has transient states; no envelope over all starting states".into()))
            }
        }
    }
}

/// P^π(s,s') = Σ_u π(u|s) P^u(s,s').
pub fn policy_transition(mdp: &Mdp, policy: &Policy) -> Result<DMatrix<f64>> {
    policy.check_shape(mdp)?;
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for u in 0..mdp.n_actions() {
            let w = policy.prob(s, u);
            if w == 0.0 {
                continue;
            }
            for s2 in 0..n {
                p[(s, s2)] += w * mdp.transition(u)[(s, s2)];
            }
        }
    }
    Ok(p)
}

/// The state chain induced by running `policy` on `mdp`.
pub fn induce_chain(mdp: &Mdp, policy: &Policy) -> Result<ChainModel> {
    ChainModel::new(policy_transition(mdp, policy)?)
}

/// Solves μP = μ, Σμ = 1 by least squares on the stacked system.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    if p.ncols() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!("transition matrix is {}x{}", p.nrows(), p.ncols())));
    }
    let a = p.transpose() - DMatrix::identity(n, n);

    let singular = a.clone().svd(false, false).singular_values;
    let rank_tol = 1e-10 * (n as f64).max(1.0);
    let nullity = singular.iter().filter(|&&s| s <= rank_tol).count();
    if nullity > 1 {
        return Err(Error::NotIrreducible { classes: nullity });
    }

    let mut stacked = DMatrix::zeros(n + 1, n);
    stacked.view_mut((0, 0), (n, n)).copy_from(&a);
    stacked.row_mut(n).fill(1.0);
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = 1.0;
    let svd = stacked.svd(true, true);
    let mut mu = svd.solve(&rhs, 1e-14).map_err(|e| Error::SolveSingular(e.to_string()))?;

    for m in mu.iter_mut() {
        if *m < 0.0 {
            *m = 0.0;
        }
    }
    let total = mu.sum();
    if !(total > 0.0) {
        return Err(Error::SolveSingular("stationary solve produced no mass".into()));
    }
    mu /= total;
    Ok(mu)
}

fn successors(p: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..p.nrows()).map(|i| (0..p.ncols()).filter(|&j| p[(i, j)] > 0.0).collect()).collect()
}

fn bfs(adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let next = level[v].unwrap_or(0) + 1;
        for &w in &adj[v] {
            if level[w].is_none() {
                level[w] = Some(next);
                queue.push_back(w);
            }
        }
    }
    level
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Strong connectivity and period of the positive-entry graph.
pub fn check_irreducible_aperiodic(p: &DMatrix<f64>) -> ChainStructure {
    let adj = successors(p);
    let n = adj.len();
    let mut reverse = vec![Vec::new(); n];
    for (v, outs) in adj.iter().enumerate() {
        for &w in outs {
            reverse[w].push(v);
        }
    }
    let forward = bfs(&adj, 0);
    let backward = bfs(&reverse, 0);
    let irreducible = forward.iter().all(Option::is_some) && backward.iter().all(Option::is_some);

    // gcd of level[u] + 1 - level[v] over edges inside the reachable set.
    let mut g = 0usize;
    for (u, outs) in adj.iter().enumerate() {
        let Some(lu) = forward[u] else { continue };
        for &v in outs {
            if let Some(lv) = forward[v] {
                let diff = (lu + 1).abs_diff(lv);
                g = gcd(g, diff);
            }
        }
    }
    let period = g.max(1);
    ChainStructure { irreducible, aperiodic: period == 1, period }
}

/// ½·Σ|ν(x) − μ(x)|.
pub fn tv_distance(nu: &[f64], mu: &[f64]) -> Result<f64> {
    if nu.len() != mu.len() {
        return Err(Error::DimensionMismatch(format!("distributions have lengths {} and {}", nu.len(), mu.len())));
    }
    for (name, v) in [("nu", nu), ("mu", mu)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("{name} sums to {s}")));
        }
    }
    Ok(tv_unchecked(nu, mu))
}

fn tv_unchecked(nu: &[f64], mu: &[f64]) -> f64 {
    0.5 * nu.iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Second-largest eigenvalue modulus.
pub fn slem(p: &DMatrix<f64>) -> f64 {
    let mut moduli: Vec<f64> = p.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    moduli.get(1).copied().unwrap_or(0.0)
}

/// Exact curve `max_x d_TV(P^k(x,·), μ)` for `k = 0..`, computed by
/// propagating each distinct row. Stops after `horizon` steps or at the
/// first value below [`TV_FLOOR`].
pub fn tv_curve(p: &DMatrix<f64>, mu: &DVector<f64>, horizon: usize) -> Vec<f64> {
    let n = p.nrows();
    let mu = mu.as_slice();
    // Starting states whose rows coincide produce identical curves from k = 1 on.
    let mut starts: Vec<usize> = Vec::new();
    for x in 0..n {
        if !starts.iter().any(|&y| p.row(y) == p.row(x)) {
            starts.push(x);
        }
    }
    let d0 = mu.iter().fold(0.0_f64, |m, &v| m.max(1.0 - v));
    let mut curve = vec![d0];
    let mut rows: Vec<DVector<f64>> = starts.iter().map(|&x| p.row(x).transpose()).collect();
    let pt = p.transpose();
    for k in 1..=horizon {
        if k > 1 {
            for r in rows.iter_mut() {
                *r = &pt * &*r;
            }
        }
        let d = rows.iter().map(|r| tv_unchecked(r.as_slice(), mu)).fold(0.0_f64, f64::max);
        curve.push(d);
        if d < TV_FLOOR {
            break;
        }
    }
    curve
}

/// Fits `eta` from the spectral gap and inflates `c0` until the exact
/// curve is dominated at every computed step.
pub fn mixing_envelope(p: &DMatrix<f64>, mu: &DVector<f64>, horizon: usize) -> Result<MixingEnvelope> {
    if horizon < 2 {
        return Err(Error::InvalidInput(format!("mixing horizon must be at least 2, got {horizon}")));
    }
    if mu.len() != p.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "stationary vector has length {}, chain has {} states",
            mu.len(),
            p.nrows()
        )));
    }
    let structure = check_irreducible_aperiodic(p);
    if !structure.aperiodic {
        return Err(Error::PeriodicChain { period: structure.period });
    }
    let lambda2 = slem(p);
    if !lambda2.is_finite() || lambda2 >= 1.0 - 1e-12 {
        return Err(Error::EnvelopeFailure(format!("second eigenvalue modulus {lambda2} is not below 1")));
    }
    let margin = 1e-6_f64.max(0.01 * (1.0 - lambda2));
    let mut eta = lambda2 + margin;
    if eta >= 1.0 {
        eta = 0.5 * (1.0 + lambda2);
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::EnvelopeFailure(format!("fitted rate {eta} outside (0, 1)")));
    }

    let curve = tv_curve(p, mu, horizon);
    let ln_eta = eta.ln();
    let mut c0 = f64::EPSILON;
    for (k, &d) in curve.iter().enumerate() {
        let ratio = d * (-(k as f64) * ln_eta).exp();
        if !ratio.is_finite() {
            return Err(Error::EnvelopeFailure(format!("envelope ratio overflows at k = {k}")));
        }
        c0 = c0.max(ratio);
    }
    // Rounding in exp/ln could leave a ulp-level violation; nudge until dominated.
    for _ in 0..64 {
        let ok = curve.iter().enumerate().all(|(k, &d)| d <= c0 * eta.powi(k as i32));
        if ok {
            break;
        }
        c0 *= 1.0 + 4.0 * f64::EPSILON;
    }
    let monotone = curve.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(MixingEnvelope { c0, eta, slem: lambda2, tv_curve: curve, monotone })
}

/// σ(T;T0) = 2·c0·η^{T0} / ((1−η)·T).
pub fn sigma(t: u64, t0: u64, c0: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidRate(eta));
    }
    if t == 0 {
        return Err(Error::InvalidInput("sigma needs T >= 1".into()));
    }
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(Error::InvalidInput(format!("c0 must be positive, got {c0}")));
    }
    Ok(sigma_unchecked(t, t0, c0, eta))
}

fn sigma_unchecked(t: u64, t0: u64, c0: f64, eta: f64) -> f64 {
    2.0 * c0 * eta.powf(t0 as f64) / ((1.0 - eta) * t as f64)
}

/// A bound σ(T;T0) on the averaged ergodic bias.
pub trait BiasRate: Sync {
    fn sigma(&self, t: u64, t0: u64) -> f64;
}

impl<F: Fn(u64, u64) -> f64 + Sync> BiasRate for F {
    fn sigma(&self, t: u64, t0: u64) -> f64 {
        self(t, t0)
    }
}

/// The geometric-mixing rate σ(T;T0) = 2c0η^{T0}/((1−η)T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricRate {
    pub c0: f64,
    pub eta: f64,
}

impl GeometricRate {
    pub fn new(c0: f64, eta: f64) -> Result<Self> {
        sigma(1, 0, c0, eta)?;
        Ok(Self { c0, eta })
    }
}

impl BiasRate for GeometricRate {
    fn sigma(&self, t: u64, t0: u64) -> f64 {
        sigma_unchecked(t, t0, self.c0, self.eta)
    }
}

/// Noise chain over triples (s, u, s') with positive probability.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedChain {
    triples: Vec<(usize, usize, usize)>,
    chain: ChainModel,
}

impl LiftedChain {
    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    pub fn triple(&self, x: usize) -> (usize, usize, usize) {
        self.triples[x]
    }

    pub fn chain(&self) -> &ChainModel {
        &self.chain
    }

    pub fn index_of(&self, triple: (usize, usize, usize)) -> Option<usize> {
        self.triples.binary_search(&triple).ok()
    }
}

/// Builds the triple chain without requiring the state chain to be
/// aperiodic; structural flags are recorded on the result.
pub fn lift_transition(mdp: &Mdp, policy: &Policy) -> Result<LiftedChain> {
    policy.check_shape(mdp)?;
    let n = mdp.n_states();
    let mut triples = Vec::new();
    for s in 0..n {
        for u in 0..mdp.n_actions() {
            if policy.prob(s, u) <= 0.0 {
                continue;
            }
            for s2 in 0..n {
                if mdp.transition(u)[(s, s2)] > 0.0 {
                    triples.push((s, u, s2));
                }
            }
        }
    }
    let m = triples.len();
    let mut p = DMatrix::zeros(m, m);
    for (i, &(_, _, s_next)) in triples.iter().enumerate() {
        for (j, &(s, u, s2)) in triples.iter().enumerate() {
            if s == s_next {
                p[(i, j)] = policy.prob(s, u) * mdp.transition(u)[(s, s2)];
            }
        }
    }
    Ok(LiftedChain { triples, chain: ChainModel::new(p)? })
}

/// Lifts an irreducible aperiodic state chain to the triple chain.
pub fn lift_chain(mdp: &Mdp, policy: &Policy) -> Result<LiftedChain> {
    let state_chain = induce_chain(mdp, policy)?;
    if !state_chain.irreducible() {
        return Err(Error::NotIrreducible { classes: 1 });
    }
    if !state_chain.aperiodic() {
        return Err(Error::PeriodicChain { period: state_chain.period() });
    }
    lift_transition(mdp, policy)
}

/// Row `x0` of P^k by `k` vector-matrix products.
pub fn exact_distribution_after_k(p: &DMatrix<f64>, x0: usize, k: usize) -> Result<DVector<f64>> {
    let n = p.nrows();
    if x0 >= n {
        return Err(Error::IndexOutOfRange(format!("state {x0} of {n}")));
    }
    let pt = p.transpose();
    let mut v = DVector::zeros(n);
    v[x0] = 1.0;
    for _ in 0..k {
        v = &pt * v;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m2(a: [[f64; 2]; 2]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]])
    }

    fn one_action(p: DMatrix<f64>) -> Mdp {
        let n = p.nrows();
        Mdp::new(vec![p], DMatrix::zeros(n, 1), 0.5).unwrap()
    }

    #[test]
    fn induce_chain_symmetric() {
        let mdp = one_action(m2([[0.5, 0.5], [0.5, 0.5]]));
        let chain = induce_chain(&mdp, &Policy::uniform(2, 1)).unwrap();
        assert!((chain.stationary()[0] - 0.5).abs() < 1e-12);
        assert!((chain.stationary()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn induce_chain_averages_actions() {
        let p0 = m2([[1.0, 0.0], [0.0, 1.0]]);
        let p1 = m2([[0.0, 1.0], [1.0, 0.0]]);
        let mdp = Mdp::new(vec![p0, p1], DMatrix::zeros(2, 2), 0.9).unwrap();
        let p = policy_transition(&mdp, &Policy::uniform(2, 2)).unwrap();
        assert_eq!(p, DMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn stationary_two_state() {
        // Oracle: μ0·0.1 = μ1·0.2 and μ0 + μ1 = 1.
        let mu = stationary_distribution(&m2([[0.9, 0.1], [0.2, 0.8]])).unwrap();
        assert!((mu[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((mu[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_rejects_two_classes() {
        let err = stationary_distribution(&DMatrix::identity(2, 2)).unwrap_err();
        assert_eq!(err, Error::NotIrreducible { classes: 2 });
    }

    #[test]
    fn stationary_allows_transient_state() {
        let mu = stationary_distribution(&m2([[1.0, 0.0], [0.5, 0.5]])).unwrap();
        assert!((mu[0] - 1.0).abs() < 1e-12 && mu[1].abs() < 1e-12);
    }

    #[test]
    fn periodic_chain_is_flagged() {
        let mdp = one_action(m2([[0.0, 1.0], [1.0, 0.0]]));
        let chain = induce_chain(&mdp, &Policy::uniform(2, 1)).unwrap();
        assert!(chain.irreducible());
        assert!(!chain.aperiodic());
        assert_eq!(chain.period(), 2);
        assert!(chain.envelope().is_none());
        assert_eq!(chain.require_envelope().unwrap_err(), Error::PeriodicChain { period: 2 });
    }

    #[test]
    fn structure_examples() {
        let s = check_irreducible_aperiodic(&DMatrix::from_element(2, 2, 0.5));
        assert!(s.irreducible && s.aperiodic);
        let s = check_irreducible_aperiodic(&m2([[1.0, 0.0], [0.5, 0.5]]));
        assert!(!s.irreducible);
        // Three-cycle with a chord of length two: gcd(3, 2) = 1.
        let mut p = DMatrix::zeros(3, 3);
        p[(0, 1)] = 0.5;
        p[(0, 2)] = 0.5;
        p[(1, 2)] = 1.0;
        p[(2, 0)] = 1.0;
        let s = check_irreducible_aperiodic(&p);
        assert!(s.irreducible && s.aperiodic);
        let mut c = DMatrix::zeros(4, 4);
        for i in 0..4 {
            c[(i, (i + 1) % 4)] = 1.0;
        }
        assert_eq!(check_irreducible_aperiodic(&c).period, 4);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance(&[0.75, 0.25], &[0.5, 0.5]).unwrap(), 0.25);
        assert!(matches!(tv_distance(&[1.0], &[0.5, 0.5]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn envelope_identical_rows() {
        let p = DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.25, 0.75]);
        let mu = stationary_distribution(&p).unwrap();
        let env = mixing_envelope(&p, &mu, 50).unwrap();
        assert!(env.tv_curve[1] < 1e-15);
        for (k, d) in env.tv_curve.iter().enumerate() {
            assert!(*d <= env.c0 * env.eta.powi(k as i32));
        }
    }

    #[test]
    fn envelope_two_state() {
        let p = m2([[0.9, 0.1], [0.2, 0.8]]);
        let mu = stationary_distribution(&p).unwrap();
        let env = mixing_envelope(&p, &mu, 200).unwrap();
        // Eigenvalues of this matrix are 1 and 0.7.
        assert!((env.slem - 0.7).abs() < 1e-12);
        assert!(env.eta >= 0.7 && env.eta <= 0.7 + 0.01 * 0.3 + 1e-12);
        // For a 2-state chain d_k = max(|P^k(0,1) - 1/3|, ...) = (2/3)·0.7^k exactly.
        for (k, d) in env.tv_curve.iter().enumerate() {
            let oracle = 2.0 / 3.0 * 0.7_f64.powi(k as i32);
            assert!((d - oracle).abs() < 1e-13, "k={k}: {d} vs {oracle}");
            assert!(*d <= env.c0 * env.eta.powi(k as i32));
        }
        let ratio = env.tv_curve[20] / env.tv_curve[19];
        assert!((ratio - 0.7).abs() < 1e-9);
        assert!(env.monotone);
    }

    #[test]
    fn envelope_rejects_periodic() {
        let p = m2([[0.0, 1.0], [1.0, 0.0]]);
        let mu = DVector::from_vec(vec![0.5, 0.5]);
        assert_eq!(mixing_envelope(&p, &mu, 10).unwrap_err(), Error::PeriodicChain { period: 2 });
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma(1, 0, 1.0, 0.5).unwrap(), 4.0);
        assert_eq!(sigma(4, 2, 1.0, 0.5).unwrap(), 0.25);
        assert_eq!(sigma(6, 3, 0.7, 0.9).unwrap(), 2.0 * sigma(12, 3, 0.7, 0.9).unwrap());
        assert_eq!(sigma(1, 0, 1.0, 1.0).unwrap_err(), Error::InvalidRate(1.0));
        assert_eq!(sigma(1, 0, 1.0, 0.0).unwrap_err(), Error::InvalidRate(0.0));
    }

    #[test]
    fn lift_single_state() {
        let mdp = Mdp::new(vec![DMatrix::from_element(1, 1, 1.0)], DMatrix::zeros(1, 1), 0.0).unwrap();
        let lifted = lift_chain(&mdp, &Policy::uniform(1, 1)).unwrap();
        assert_eq!(lifted.triples(), &[(0, 0, 0)]);
        assert_eq!(lifted.chain().stationary()[0], 1.0);
    }

    #[test]
    fn lift_two_state_product_formula() {
        let mdp = one_action(DMatrix::from_element(2, 2, 0.5));
        let lifted = lift_chain(&mdp, &Policy::uniform(2, 1)).unwrap();
        assert_eq!(lifted.triples().len(), 4);
        for m in lifted.chain().stationary().iter() {
            assert!((m - 0.25).abs() < 1e-12);
        }
        assert!(lifted.chain().irreducible() && lifted.chain().aperiodic());
    }

    #[test]
    fn lift_rejects_periodic_state_chain() {
        let mdp = one_action(m2([[0.0, 1.0], [1.0, 0.0]]));
        assert_eq!(lift_chain(&mdp, &Policy::uniform(2, 1)).unwrap_err(), Error::PeriodicChain { period: 2 });
    }

    #[test]
    fn distribution_after_k() {
        let p = m2([[0.9, 0.1], [0.2, 0.8]]);
        assert_eq!(exact_distribution_after_k(&p, 1, 0).unwrap().as_slice(), &[0.0, 1.0]);
        assert_eq!(exact_distribution_after_k(&p, 1, 1).unwrap().as_slice(), &[0.2, 0.8]);
        // 0.9·0.9 + 0.1·0.2 = 0.83.
        let v = exact_distribution_after_k(&p, 0, 2).unwrap();
        assert!((v[0] - 0.83).abs() < 1e-15 && (v[1] - 0.17).abs() < 1e-15);
    }

    #[test]
    fn mdp_validation() {
        let bad = m2([[0.5, 0.6], [0.5, 0.5]]);
        assert!(Mdp::new(vec![bad], DMatrix::zeros(2, 1), 0.5).is_err());
        let p = DMatrix::from_element(2, 2, 0.5);
        assert!(Mdp::new(vec![p.clone()], DMatrix::zeros(2, 1), 1.0).is_err());
        assert!(Mdp::new(vec![p.clone()], DMatrix::zeros(2, 2), 0.5).is_err());
        let mdp = Mdp::new(vec![p], DMatrix::from_row_slice(2, 1, &[1.0, -3.0]), 0.5).unwrap();
        assert_eq!(mdp.r_bar(), 3.0);
    }

    pub(crate) fn random_stochastic(n: usize, sparsity: &[f64], weights: &[f64]) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut total = 0.0;
            for j in 0..n {
                let k = i * n + j;
                let w = if sparsity[k] < 0.4 && j != (i + 1) % n { 0.0 } else { weights[k] };
                p[(i, j)] = w;
                total += w;
            }
            for j in 0..n {
                p[(i, j)] /= total;
            }
        }
        p
    }

    proptest! {
        #[test]
        fn stationary_solves_balance(n in 1usize..7, sp in prop::collection::vec(0.0..1.0f64, 49), w in prop::collection::vec(0.05..1.0f64, 49)) {
            let p = random_stochastic(n, &sp, &w);
            let mu = stationary_distribution(&p).unwrap();
            let resid = (p.transpose() * &mu - &mu).amax();
            prop_assert!(resid <= 1e-10);
            prop_assert!((mu.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(mu.iter().all(|&m| m >= 0.0));
        }

        #[test]
        fn envelope_dominates_curve(n in 2usize..6, sp in prop::collection::vec(0.0..1.0f64, 36), w in prop::collection::vec(0.05..1.0f64, 36), lazy in 0.0..0.95f64) {
            let mut p = random_stochastic(n, &sp, &w);
            p = p * (1.0 - lazy) + DMatrix::identity(n, n) * lazy;
            let chain = ChainModel::new(p).unwrap();
            let env = chain.envelope().unwrap();
            for (k, d) in env.tv_curve.iter().enumerate() {
                prop_assert!(*d <= env.c0 * env.eta.powi(k as i32));
            }
        }

        #[test]
        fn lifted_chain_inherits_structure(
            n in 1usize..5, na in 1usize..4,
            sp in prop::collection::vec(0.0..1.0f64, 75),
            w in prop::collection::vec(0.05..1.0f64, 75),
            pol in prop::collection::vec(0.0..1.0f64, 12),
        ) {
            let transitions: Vec<_> = (0..na).map(|u| random_stochastic(n, &sp[u * 25..], &w[u * 25..])).collect();
            let mdp = Mdp::new(transitions, DMatrix::zeros(n, na), 0.5).unwrap();
            let mut probs = DMatrix::zeros(n, na);
            for s in 0..n {
                let mut t = 0.0;
                for u in 0..na {
                    let v = if pol[s * 3 + u] < 0.3 && u != 0 { 0.0 } else { pol[s * 3 + u] + 0.01 };
                    probs[(s, u)] = v;
                    t += v;
                }
                for u in 0..na {
                    probs[(s, u)] /= t;
                }
            }
            let policy = Policy::new(probs).unwrap();
            let state = induce_chain(&mdp, &policy).unwrap();
            let lifted = lift_transition(&mdp, &policy).unwrap();
            if state.irreducible() && state.aperiodic() {
                prop_assert!(lifted.chain().irreducible() && lifted.chain().aperiodic());
            }
            let mu = state.stationary();
            for (x, &(s, u, s2)) in lifted.triples().iter().enumerate() {
                let product = mu[s] * policy.prob(s, u) * mdp.transition(u)[(s, s2)];
                prop_assert!((lifted.chain().stationary()[x] - product).abs() <= 1e-10);
            }
        }

        #[test]
        fn sigma_strictly_decreasing(t in 1u64..1000, t0 in 0u64..200, c0 in 1e-3..10.0f64, eta in 0.01..0.99f64) {
            let base = sigma(t, t0, c0, eta).unwrap();
            // Strictness is only observable above the subnormal range.
            prop_assume!(base > 1e-290);
            prop_assert!(sigma(t + 1, t0, c0, eta).unwrap() < base);
            prop_assert!(sigma(t, t0 + 1, c0, eta).unwrap() < base);
        }
    }
}
