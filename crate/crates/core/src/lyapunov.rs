//! Quadratic Lyapunov certificates, the multistep-Lyapunov constant chain
//! and the finite-time bound curve, plus trajectory-level diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::BiasRate;
use crate::sa_core::{mix_seed, seeded_moments, simulate_from, NoiseProcess, StepMap, Trajectory};

/// Eigenvalue real parts must be below `-HURWITZ_TOL`.
pub const HURWITZ_TOL: f64 = 1e-12;

/// Default cap for the T_δ and k_ε scans.
pub const SCAN_CAP: u64 = 1_000_000;

/// (1 + x)^e evaluated as exp(e·ln(1 + x)).
#[inline]
pub fn pow1p(x: f64, e: f64) -> f64 {
    (e * x.ln_1p()).exp()
}

/// W(θ) = θᵀPθ with the constants c1..c4.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLyapunov {
    pub p: DMatrix<f64>,
    /// Right-hand side of AᵀP + PA = −Q when solved from a drift matrix.
    pub q: Option<DMatrix<f64>>,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub lipschitz: f64,
    /// ‖AᵀP + PA + Q‖_F / ‖Q‖_F.
    pub residual: f64,
}

impl QuadraticLyapunov {
    pub fn value(&self, theta: &[f64]) -> f64 {
        let d = theta.len();
        let mut acc = 0.0;
        for i in 0..d {
            let row: f64 = theta.iter().enumerate().map(|(j, t)| self.p[(i, j)] * t).sum();
            acc += theta[i] * row;
        }
        acc
    }

    /// W(θ) = ‖θ‖²/2 with a caller-supplied decay constant c3.
    pub fn half_norm(d: usize, c3: f64, lipschitz: f64) -> Result<Self> {
        if !(c3 > 0.0) || !c3.is_finite() {
            return Err(Error::InvalidInput(format!("decay constant must be positive, got {c3}")));
        }
        Ok(Self { p: DMatrix::identity(d, d) * 0.5, q: None, c1: 0.5, c2: 0.5, c3, c4: 1.0, lipschitz, residual: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }
}

/// Largest real part among the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

fn symmetric_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Solves AᵀP + PA = −Q through the vectorized Kronecker system.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>, lipschitz: f64) -> Result<QuadraticLyapunov> {
    let d = a.nrows();
    if a.ncols() != d || q.nrows() != d || q.ncols() != d || d == 0 {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        return Err(Error::InvalidInput(format!("L must be positive, got {lipschitz}")));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
        return Err(Error::InvalidInput("Q must be symmetric".into()));
    }
    let (q_min, _) = symmetric_extremes(q);
    if !(q_min > 0.0) {
        return Err(Error::InvalidInput(format!("Q must be positive definite (smallest eigenvalue {q_min})")));
    }
    let max_real = spectral_abscissa(a);
    if !(max_real < -HURWITZ_TOL) {
        return Err(Error::NotHurwitz { max_real });
    }

    let at = a.transpose();
    let id = DMatrix::<f64>::identity(d, d);
    let op = id.kronecker(&at) + at.kronecker(&id);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let vec_p = op.lu().solve(&rhs).ok_or_else(|| Error::SolveSingular("Lyapunov operator is singular".into()))?;
    if vec_p.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolveSingular("Lyapunov solution is not finite".into()));
    }
    let raw = DMatrix::from_column_slice(d, d, vec_p.as_slice());
    let p = (&raw + raw.transpose()) * 0.5;
    let residual = (&at * &p + &p * a + q).norm() / q.norm();

    let (c1, c2) = symmetric_extremes(&p);
    if !(c1 > 0.0) {
        return Err(Error::SolveSingular(format!("solution is not positive definite (smallest eigenvalue {c1})")));
    }
    Ok(QuadraticLyapunov { p, q: Some(q.clone()), c1, c2, c3: q_min / lipschitz, c4: 2.0 * c2, lipschitz, residual })
}

/// β_k(T, ε) = εLT(1+εL)^{T−2} + σ(T;k).
pub fn beta<R: BiasRate + ?Sized>(k: u64, t: u64, epsilon: f64, l: f64, sigma: &R) -> f64 {
    let x = epsilon * l;
    x * t as f64 * pow1p(x, t as f64 - 2.0) + sigma.sigma(t, k)
}

/// ρ_k(T, ε) = 2β_k + 2εLT·[ε²L²T²(1+εL)^{2T−4} + 13].
pub fn rho<R: BiasRate + ?Sized>(k: u64, t: u64, epsilon: f64, l: f64, sigma: &R) -> f64 {
    let xt = epsilon * l * t as f64;
    2.0 * beta(k, t, epsilon, l, sigma) + 2.0 * xt * (xt * xt * pow1p(epsilon * l, 2.0 * t as f64 - 4.0) + 13.0)
}

/// κ_k(T, ε) = 2β_k + 16εLT.
pub fn kappa<R: BiasRate + ?Sized>(k: u64, t: u64, epsilon: f64, l: f64, sigma: &R) -> f64 {
    2.0 * beta(k, t, epsilon, l, sigma) + 16.0 * epsilon * l * t as f64
}

/// Smallest T ≥ 1 with σ(T;0) ≤ δ/4.
pub fn select_t_delta<R: BiasRate + ?Sized>(delta: f64, sigma: &R, cap: u64) -> Result<u64> {
    let target = delta / 4.0;
    (1..=cap).find(|&t| sigma.sigma(t, 0) <= target).ok_or(Error::CapExceeded { what: "T_delta", cap })
}

/// ν(ε) = εLT[(1+εL)^{T−2} + 13] + (εLT)³(1+εL)^{2T−4}.
pub fn nu(epsilon: f64, t: u64, l: f64) -> f64 {
    let x = epsilon * l;
    let t = t as f64;
    let xt = x * t;
    xt * (pow1p(x, t - 2.0) + 13.0) + xt * xt * xt * pow1p(x, 2.0 * t - 4.0)
}

/// The positive root of ν(ε) = δ/4.
pub fn solve_epsilon_delta(delta: f64, t_delta: u64, l: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() || t_delta == 0 || !(l > 0.0) || !l.is_finite() {
        return Err(Error::InvalidInput(format!("need delta > 0, T >= 1, L > 0 (got {delta}, {t_delta}, {l})")));
    }
    let target = delta / 4.0;
    let mut hi = 1.0 / (l * t_delta as f64);
    let mut doublings = 0;
    while !(nu(hi, t_delta, l) >= target) {
        hi *= 2.0;
        doublings += 1;
        if doublings > 1100 {
            return Err(Error::BracketFailure("nu(eps) = delta/4"));
        }
    }
    let mut prev = 0.0;
    for i in 1..=64 {
        let v = nu(hi * i as f64 / 64.0, t_delta, l);
        if v < prev {
            return Err(Error::BracketFailure("nu(eps) = delta/4 (nu not increasing on bracket)"));
        }
        prev = v;
    }
    let mut lo = 0.0;
    let mut best = hi;
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = nu(mid, t_delta, l);
        if (v - target).abs() < (nu(best, t_delta, l) - target).abs() {
            best = mid;
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for cand in [lo, hi] {
        if cand > 0.0 && (nu(cand, t_delta, l) - target).abs() < (nu(best, t_delta, l) - target).abs() {
            best = cand;
        }
    }
    Ok(best)
}

/// Everything needed to evaluate the finite-time bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub delta: f64,
    pub t_star: u64,
    pub eps_delta: f64,
    pub lipschitz: f64,
    pub c1p: f64,
    pub c2p: f64,
    pub c2pp: f64,
    pub c3p: f64,
    pub c4p: f64,
    pub c4pp: f64,
    pub c5p: f64,
    pub c6: f64,
}

impl BoundConstants {
    /// Checks positivity and finiteness of every field.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("delta", self.delta),
            ("eps_delta", self.eps_delta),
            ("lipschitz", self.lipschitz),
            ("c1p", self.c1p),
            ("c2p", self.c2p),
            ("c3p", self.c3p),
            ("c4p", self.c4p),
            ("c4pp", self.c4pp),
            ("c5p", self.c5p),
            ("c6", self.c6),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.c2pp >= 0.0) || !self.c2pp.is_finite() {
            return Err(Error::InvalidInput(format!("c2pp must be nonnegative, got {}", self.c2pp)));
        }
        if self.t_star == 0 {
            return Err(Error::InvalidInput("t_star must be at least 1".into()));
        }
        Ok(())
    }

    /// Recomputes c4″ and c6 from the other constants.
    pub fn recompute_derived(&mut self) {
        self.c4pp = self.c4p + self.c3p * self.c2pp * self.eps_delta * self.lipschitz * self.lipschitz / self.c2p;
        self.c6 = self.c2p * (self.c4pp + self.c5p) / self.c3p;
    }

    /// 1 − c3′ε/c2′.
    pub fn contraction(&self, epsilon: f64) -> f64 {
        1.0 - self.c3p * epsilon / self.c2p
    }

    fn check_stepsize(&self, epsilon: f64) -> Result<()> {
        if !(epsilon > 0.0) || !(epsilon < self.eps_delta) {
            return Err(Error::StepsizeTooLarge {
                epsilon,
                eps_delta: self.eps_delta,
                reason: "stepsize must lie in (0, eps_delta)".into(),
            });
        }
        Ok(())
    }
}

/// Midpoint of the admissible interval (0, c3/c4).
pub fn default_delta(cert: &QuadraticLyapunov) -> f64 {
    0.5 * cert.c3 / cert.c4
}

/// Runs the constant chain T* → ε_δ → c′-family for a given δ < c3/c4.
pub fn derive_constants<R: BiasRate + ?Sized>(
    cert: &QuadraticLyapunov,
    l: f64,
    delta: f64,
    sigma: &R,
) -> Result<BoundConstants> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    let limit = cert.c3 / cert.c4;
    if delta >= limit {
        return Err(Error::DeltaTooLarge { delta, limit });
    }
    let t_star = select_t_delta(delta, sigma, SCAN_CAP)?;
    let eps_delta = solve_epsilon_delta(delta, t_star, l)?;
    let t = t_star as f64;
    let x = eps_delta * l;

    let c1p = cert.c1;
    let c2p = 2.0 * cert.c2 * t * (2.0 + (2.0 * t - 1.0) * pow1p(x, 2.0 * t - 2.0) * x) / (2.0 + x);
    let c2pp = 2.0
        * cert.c2
        * (1..t_star)
            .map(|j| {
                let j = j as f64;
                let inner = 1.0 + 0.5 * (j - 1.0) * pow1p(x, j - 2.0);
                j * j * inner * inner
            })
            .sum::<f64>();
    let c3p = l * t * (cert.c3 - cert.c4 * delta);
    let c4p = cert.c4 * l * t * (2.0 * l * pow1p(x, t - 2.0) + 16.0 * l * t);
    let c5p = 2.0 * cert.c4 * l * t;
    let mut constants =
        BoundConstants { delta, t_star, eps_delta, lipschitz: l, c1p, c2p, c2pp, c3p, c4p, c4pp: 0.0, c5p, c6: 0.0 };
    constants.recompute_derived();
    constants.validate()?;
    Ok(constants)
}

/// Smallest k ≥ 1 with σ(T;k) ≤ ε.
pub fn first_k_below<R: BiasRate + ?Sized>(t: u64, epsilon: f64, sigma: &R, cap: u64) -> Result<u64> {
    (1..=cap).find(|&k| sigma.sigma(t, k) <= epsilon).ok_or(Error::CapExceeded { what: "k_eps", cap })
}

/// k_ε = min{k ≥ 1 : σ(T*;k) ≤ ε} for ε ∈ (0, ε_δ).
pub fn k_epsilon<R: BiasRate + ?Sized>(constants: &BoundConstants, epsilon: f64, sigma: &R) -> Result<u64> {
    constants.check_stepsize(epsilon)?;
    first_k_below(constants.t_star, epsilon, sigma, SCAN_CAP)
}

/// B_0..B_K of the finite-time bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub epsilon: f64,
    pub k_eps: u64,
    pub contraction: f64,
    pub values: Vec<f64>,
    /// The δ-dependent last term of each B_k.
    pub transient: Vec<f64>,
}

pub fn bound_curve<R: BiasRate + ?Sized>(
    constants: &BoundConstants,
    epsilon: f64,
    theta0_norm: f64,
    steps: usize,
    sigma: &R,
) -> Result<BoundCurve> {
    constants.check_stepsize(epsilon)?;
    let a = constants.contraction(epsilon);
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::StepsizeTooLarge {
            epsilon,
            eps_delta: constants.eps_delta,
            reason: format!("contraction factor {a} is outside (0, 1)"),
        });
    }
    evaluate_bound_curve(constants, epsilon, theta0_norm, steps, sigma)
}

/// Evaluates B_k from whatever constants it is given, without checking that
/// they describe a valid certificate. Used to replay edited constants files.
pub fn evaluate_bound_curve<R: BiasRate + ?Sized>(
    constants: &BoundConstants,
    epsilon: f64,
    theta0_norm: f64,
    steps: usize,
    sigma: &R,
) -> Result<BoundCurve> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidInput(format!("stepsize must be positive, got {epsilon}")));
    }
    let k_eps = first_k_below(constants.t_star, epsilon, sigma, SCAN_CAP)?;
    let a = constants.contraction(epsilon);
    let ln_a = (-constants.c3p * epsilon / constants.c2p).ln_1p();
    let l = constants.lipschitz;
    let c1p = constants.c1p;
    let start = constants.c2p / c1p * theta0_norm * theta0_norm;
    let floor = constants.c2pp * l * l * epsilon * epsilon / c1p + constants.c6 * epsilon / c1p;
    let plateau = constants.c6 / c1p * constants.delta;
    let mut values = Vec::with_capacity(steps + 1);
    let mut transient = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let late = (k as u64).saturating_sub(k_eps) as f64;
        let tail = if late == 0.0 { plateau } else { plateau * (late * ln_a).exp() };
        values.push(start * (k as f64 * ln_a).exp() + floor + tail);
        transient.push(tail);
    }
    Ok(BoundCurve { epsilon, k_eps, contraction: a, values, transient })
}

fn check_segment(traj: &Trajectory, k: usize, end: usize) -> Result<()> {
    if end >= traj.thetas.len() || k > end {
        return Err(Error::IndexOutOfRange(format!(
            "segment {k}..={end} outside trajectory of {} iterates",
            traj.thetas.len()
        )));
    }
    Ok(())
}

/// Σ_{j=k}^{k+T−1} W(θ̃_j) along a realized trajectory.
pub fn multistep_lyapunov(cert: &QuadraticLyapunov, traj: &Trajectory, k: usize, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidInput("window length must be at least 1".into()));
    }
    check_segment(traj, k, k + t - 1)?;
    Ok(traj.thetas[k..k + t].iter().map(|th| cert.value(th.as_slice())).sum())
}

/// ‖θ̃_{k+T} − θ̃_k − ε·Σ_{j=k}^{k+T−1} f(θ̃_k, X_j)‖.
pub fn g_residual<M: StepMap + ?Sized>(traj: &Trajectory, map: &M, k: usize, t: usize) -> Result<f64> {
    check_segment(traj, k, k + t)?;
    let d = map.dim();
    let base = traj.thetas[k].as_slice();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for j in k..k + t {
        map.f(base, traj.noise[j], &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let r = &traj.thetas[k + t] - &traj.thetas[k] - DVector::from_vec(acc) * traj.epsilon;
    Ok(r.norm())
}

/// ‖θ̃_{k+T} − θ̃_k − εT·f̄(θ̃_k)‖.
pub fn gprime_residual<M: StepMap + ?Sized>(traj: &Trajectory, map: &M, k: usize, t: usize) -> Result<f64> {
    check_segment(traj, k, k + t)?;
    let mut fbar = vec![0.0; map.dim()];
    map.f_bar(traj.thetas[k].as_slice(), &mut fbar);
    let r = &traj.thetas[k + t] - &traj.thetas[k] - DVector::from_vec(fbar) * (traj.epsilon * t as f64);
    Ok(r.norm())
}

/// ε²L²T²(1+εL)^{T−2}(‖θ‖+1).
pub fn g_bound(epsilon: f64, l: f64, t: usize, theta_norm: f64) -> f64 {
    let xt = epsilon * l * t as f64;
    xt * xt * pow1p(epsilon * l, t as f64 - 2.0) * (theta_norm + 1.0)
}

/// ε²L²T²[ε²L²T²(1+εL)^{2T−4} + 12]‖θ‖² + 8ε²L²T².
pub fn gprime_sq_bound(epsilon: f64, l: f64, t: usize, theta_norm: f64) -> f64 {
    let xt = epsilon * l * t as f64;
    let x2 = xt * xt;
    x2 * (x2 * pow1p(epsilon * l, 2.0 * t as f64 - 4.0) + 12.0) * theta_norm * theta_norm + 8.0 * x2
}

/// A conditioning point: the iterate θ̃ is frozen at time `k` of a noise
/// path that started in state `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPoint {
    pub k: u64,
    pub theta: DVector<f64>,
    pub x0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPointReport {
    pub k: u64,
    pub theta_norm: f64,
    /// Estimate of E[W′(k+1) − W′(k) | θ̃_k].
    pub drift: f64,
    pub drift_stderr: f64,
    pub ceiling: f64,
    pub pass: bool,
    /// Estimate of E[W′(k) | θ̃_k] and its sandwich bounds.
    pub multistep: f64,
    pub multistep_stderr: f64,
    pub multistep_lower: f64,
    pub multistep_upper: f64,
    pub sandwich_pass: bool,
    /// Estimate of E[‖g′(k, T*)‖² | θ̃_k] and its bound.
    pub gprime_sq: f64,
    pub gprime_sq_stderr: f64,
    pub gprime_sq_bound: f64,
    pub gprime_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub epsilon: f64,
    pub t_star: u64,
    pub n_continuations: usize,
    pub points: Vec<DriftPointReport>,
    pub n_pass: usize,
}

/// Conditional Monte Carlo estimate of the multistep drift at each point.
/// Each continuation advances the noise `k` steps from `x0`, then runs
/// T* recursion steps from the frozen iterate.
#[allow(clippy::too_many_arguments)]
pub fn drift_check<M, N, R>(
    map: &M,
    noise: &N,
    cert: &QuadraticLyapunov,
    constants: &BoundConstants,
    epsilon: f64,
    points: &[DriftPoint],
    n_continuations: usize,
    seed: u64,
    sigma: &R,
) -> Result<DriftReport>
where
    M: StepMap + ?Sized,
    N: NoiseProcess + ?Sized,
    R: BiasRate + ?Sized,
{
    constants.check_stepsize(epsilon)?;
    let t_star = constants.t_star as usize;
    let l = constants.lipschitz;
    let d = map.dim();
    let mut reports = Vec::with_capacity(points.len());
    for (index, point) in points.iter().enumerate() {
        if point.theta.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "drift point {index} has dimension {}, map has {d}",
                point.theta.len()
            )));
        }
        if let Some(n) = noise.alphabet_size() {
            if point.x0 >= n {
                return Err(Error::IndexOutOfRange(format!("noise state {} of {n}", point.x0)));
            }
        }
        let theta0 = point.theta.as_slice();
        let w0 = cert.value(theta0);
        let mut fbar = vec![0.0; d];
        map.f_bar(theta0, &mut fbar);
        let (mean, stderr) = seeded_moments(n_continuations, mix_seed(seed, index as u64), 3, |rng, out| {
            let mut x = point.x0;
            for _ in 0..point.k {
                x = noise.next(x, rng);
            }
            let mut w_sum = 0.0;
            let mut last = Vec::new();
            simulate_from(map, noise, theta0, x, epsilon, t_star, rng, &mut |j, th: &[f64], _| {
                if j < t_star {
                    w_sum += cert.value(th);
                } else {
                    last = th.to_vec();
                }
            })?;
            // W′(k+1) − W′(k) telescopes to W(θ̃_{k+T*}) − W(θ̃_k).
            out[0] = cert.value(&last) - w0;
            out[1] = w_sum;
            out[2] = (0..d)
                .map(|i| {
                    let g = last[i] - theta0[i] - epsilon * t_star as f64 * fbar[i];
                    g * g
                })
                .sum();
            Ok(())
        })?;
        let norm = point.theta.norm();
        let sq = norm * norm;
        let ceiling = -epsilon * constants.c3p * sq
            + constants.c4p * epsilon * epsilon
            + constants.c5p * sigma.sigma(constants.t_star, point.k) * epsilon;
        let lower = constants.c1p * sq;
        let upper = constants.c2p * sq + constants.c2pp * (epsilon * l).powi(2);
        let g_bound = gprime_sq_bound(epsilon, l, t_star, norm);
        let pass = mean[0] - 3.0 * stderr[0] <= ceiling;
        let sandwich_pass = mean[1] + 3.0 * stderr[1] >= lower && mean[1] - 3.0 * stderr[1] <= upper;
        let gprime_pass = mean[2] - 3.0 * stderr[2] <= g_bound;
        reports.push(DriftPointReport {
            k: point.k,
            theta_norm: norm,
            drift: mean[0],
            drift_stderr: stderr[0],
            ceiling,
            pass,
            multistep: mean[1],
            multistep_stderr: stderr[1],
            multistep_lower: lower,
            multistep_upper: upper,
            sandwich_pass,
            gprime_sq: mean[2],
            gprime_sq_stderr: stderr[2],
            gprime_sq_bound: g_bound,
            gprime_pass,
        });
    }
    let n_pass = reports.iter().filter(|r| r.pass).count();
    Ok(DriftReport { epsilon, t_star: constants.t_star, n_continuations, points: reports, n_pass })
}
