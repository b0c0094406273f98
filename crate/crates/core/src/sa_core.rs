//! The generic constant-stepsize SA engine: step maps, Markov noise,
//! trajectories, Monte Carlo mean-square error and exact ergodic-bias
//! oracles.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{BiasRate, ChainModel};

/// Generator used for every simulated stream.
pub type SaRng = ChaCha8Rng;

/// Trajectories whose iterate norm exceeds this are reported as diverged.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Monte Carlo leaves at or below this size are reduced sequentially.
const LEAF_SIZE: usize = 32;

/// A step map `f(θ̃, x)` in centered coordinates θ̃ = θ − θ*.
pub trait StepMap: Sync {
    fn dim(&self) -> usize;

    /// Number of noise states `f` is defined on; `None` when `f` ignores the noise.
    fn alphabet_size(&self) -> Option<usize>;

    fn f(&self, theta: &[f64], x: usize, out: &mut [f64]);

    /// The stationary mean field f̄(θ̃).
    fn f_bar(&self, theta: &[f64], out: &mut [f64]);

    /// Growth and Lipschitz constant L.
    fn lipschitz(&self) -> f64;

    /// Equilibrium in original coordinates.
    fn theta_star(&self) -> &[f64];
}

/// A noise process over a finite or countable alphabet of state indices.
pub trait NoiseProcess: Sync {
    fn sample_initial(&self, rng: &mut SaRng) -> usize;

    fn next(&self, state: usize, rng: &mut SaRng) -> usize;

    fn alphabet_size(&self) -> Option<usize>;

    fn chain(&self) -> Option<&ChainModel>;
}

pub fn eval_f<M: StepMap + ?Sized>(map: &M, theta: &DVector<f64>, x: usize) -> DVector<f64> {
    let mut out = DVector::zeros(map.dim());
    map.f(theta.as_slice(), x, out.as_mut_slice());
    out
}

pub fn eval_f_bar<M: StepMap + ?Sized>(map: &M, theta: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(map.dim());
    map.f_bar(theta.as_slice(), out.as_mut_slice());
    out
}

/// Noise-free linear map f(θ, x) = Aθ.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    a: DMatrix<f64>,
    lipschitz: f64,
    theta_star: Vec<f64>,
}

impl LinearMap {
    pub fn new(a: DMatrix<f64>, lipschitz: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!("map matrix is {}x{}", a.nrows(), a.ncols())));
        }
        let d = a.nrows();
        Ok(Self { a, lipschitz, theta_star: vec![0.0; d] })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl StepMap for LinearMap {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn alphabet_size(&self) -> Option<usize> {
        None
    }

    fn f(&self, theta: &[f64], _x: usize, out: &mut [f64]) {
        self.f_bar(theta, out);
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

/// How the first noise state is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDistribution {
    PointMass(usize),
    Uniform,
    Stationary,
}

impl Default for InitialDistribution {
    fn default() -> Self {
        Self::PointMass(0)
    }
}

fn cumulative(probs: impl Iterator<Item = f64>) -> (Vec<f64>, usize) {
    let mut acc = 0.0;
    let mut last = 0;
    let cdf = probs
        .enumerate()
        .map(|(j, p)| {
            if p > 0.0 {
                last = j;
            }
            acc += p;
            acc
        })
        .collect();
    (cdf, last)
}

fn sample_cdf(cdf: &[f64], last_positive: usize, rng: &mut SaRng) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c <= u).min(last_positive)
}

/// Markov noise driven by a known transition matrix.
#[derive(Debug, Clone)]
pub struct MarkovNoise {
    chain: ChainModel,
    rows: Vec<(Vec<f64>, usize)>,
    initial: (Vec<f64>, usize),
}

impl MarkovNoise {
    pub fn new(chain: ChainModel, initial: InitialDistribution) -> Result<Self> {
        let n = chain.n_states();
        let rows = (0..n).map(|i| cumulative(chain.transition().row(i).iter().copied())).collect();
        let init = match initial {
            InitialDistribution::PointMass(x) => {
                if x >= n {
                    return Err(Error::IndexOutOfRange(format!("initial noise state {x} of {n}")));
                }
                cumulative((0..n).map(|i| if i == x { 1.0 } else { 0.0 }))
            }
            InitialDistribution::Uniform => cumulative((0..n).map(|_| 1.0 / n as f64)),
            InitialDistribution::Stationary => cumulative(chain.stationary().iter().copied()),
        };
        Ok(Self { chain, rows, initial: init })
    }

    /// A single absorbing state, for maps that ignore the noise.
    pub fn trivial() -> Self {
        let chain = ChainModel::new(DMatrix::from_element(1, 1, 1.0)).expect("one-state chain");
        Self::new(chain, InitialDistribution::PointMass(0)).expect("state 0 exists")
    }
}

impl NoiseProcess for MarkovNoise {
    fn sample_initial(&self, rng: &mut SaRng) -> usize {
        sample_cdf(&self.initial.0, self.initial.1, rng)
    }

    fn next(&self, state: usize, rng: &mut SaRng) -> usize {
        let (cdf, last) = &self.rows[state];
        sample_cdf(cdf, *last, rng)
    }

    fn alphabet_size(&self) -> Option<usize> {
        Some(self.chain.n_states())
    }

    fn chain(&self) -> Option<&ChainModel> {
        Some(&self.chain)
    }
}

/// splitmix64 finalizer applied to (master, index).
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64) -> SaRng {
    SaRng::seed_from_u64(seed)
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// θ + ε·f(θ, x), rejecting non-finite results.
pub fn step<M: StepMap + ?Sized>(theta: &DVector<f64>, x: usize, epsilon: f64, map: &M) -> Result<DVector<f64>> {
    check_epsilon(epsilon)?;
    check_dim(map, theta.len())?;
    let mut next = theta.clone();
    let mut scratch = vec![0.0; theta.len()];
    advance(map, next.as_mut_slice(), x, epsilon, &mut scratch);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteIterate { iteration: 1 });
    }
    Ok(next)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidInput(format!("stepsize must be positive, got {epsilon}")));
    }
    Ok(())
}

fn check_dim<M: StepMap + ?Sized>(map: &M, len: usize) -> Result<()> {
    if len != map.dim() {
        return Err(Error::DimensionMismatch(format!("iterate has length {len}, map has dimension {}", map.dim())));
    }
    Ok(())
}

#[inline]
fn advance<M: StepMap + ?Sized>(map: &M, theta: &mut [f64], x: usize, epsilon: f64, scratch: &mut [f64]) {
    map.f(theta, x, scratch);
    for (t, g) in theta.iter_mut().zip(scratch.iter()) {
        *t += epsilon * g;
    }
}

/// Runs the recursion for `steps` iterations, calling `visit(k, θ̃_k, X_k)`
/// for `k = 0..=steps`.
pub fn simulate<M, N, F>(
    map: &M,
    noise: &N,
    theta0: &[f64],
    epsilon: f64,
    steps: usize,
    rng: &mut SaRng,
    mut visit: F,
) -> Result<()>
where
    M: StepMap + ?Sized,
    N: NoiseProcess + ?Sized,
    F: FnMut(usize, &[f64], usize),
{
    let x0 = noise.sample_initial(rng);
    simulate_from(map, noise, theta0, x0, epsilon, steps, rng, &mut visit)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_from<M, N, F>(
    map: &M,
    noise: &N,
    theta0: &[f64],
    x0: usize,
    epsilon: f64,
    steps: usize,
    rng: &mut SaRng,
    visit: &mut F,
) -> Result<()>
where
    M: StepMap + ?Sized,
    N: NoiseProcess + ?Sized,
    F: FnMut(usize, &[f64], usize),
{
    let mut theta = theta0.to_vec();
    let mut scratch = vec![0.0; theta.len()];
    let mut x = x0;
    visit(0, &theta, x);
    for k in 0..steps {
        advance(map, &mut theta, x, epsilon, &mut scratch);
        let sq = norm_sq(&theta);
        if !sq.is_finite() {
            return Err(Error::NonFiniteIterate { iteration: k + 1 });
        }
        if sq > DIVERGENCE_GUARD * DIVERGENCE_GUARD {
            return Err(Error::Diverged { iteration: k + 1, norm: sq.sqrt() });
        }
        x = noise.next(x, rng);
        visit(k + 1, &theta, x);
    }
    Ok(())
}

/// A realized path θ̃_0..θ̃_K with its noise X_0..X_K.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub epsilon: f64,
    pub thetas: Vec<DVector<f64>>,
    pub noise: Vec<usize>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.thetas.len() - 1
    }
}

pub fn run_trajectory<M, N>(
    map: &M,
    noise: &N,
    theta0: &DVector<f64>,
    epsilon: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory>
where
    M: StepMap + ?Sized,
    N: NoiseProcess + ?Sized,
{
    check_epsilon(epsilon)?;
    check_dim(map, theta0.len())?;
    if steps == 0 {
        return Err(Error::InvalidInput("trajectory needs at least one step".into()));
    }
    let mut thetas = Vec::with_capacity(steps + 1);
    let mut xs = Vec::with_capacity(steps + 1);
    let mut rng = stream(seed);
    simulate(map, noise, theta0.as_slice(), epsilon, steps, &mut rng, |_, t, x| {
        thetas.push(DVector::from_column_slice(t));
        xs.push(x);
    })?;
    Ok(Trajectory { epsilon, thetas, noise: xs, seed })
}

/// Empirical E‖θ̃_k‖² with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub epsilon: f64,
    /// Trajectories that contributed to the curve.
    pub n_trajectories: usize,
    /// Trajectories excluded because they diverged.
    pub n_diverged: usize,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    diverged: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn empty(len: usize) -> Self {
        Self { n: 0, diverged: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, values: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(values) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.diverged += other.diverged;
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return Self { diverged: self.diverged, ..other };
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * (nb / n);
            self.m2[i] += other.m2[i] + d * d * (na * nb / n);
        }
        self.n += other.n;
        self
    }
}

/// Splits `lo..hi` at the midpoint until leaves are small, so the reduction
/// order depends only on the range and never on scheduling.
fn tree_reduce<T, Leaf, Merge>(lo: usize, hi: usize, leaf: &Leaf, merge: &Merge) -> T
where
    T: Send,
    Leaf: Fn(usize, usize) -> T + Sync,
    Merge: Fn(T, T) -> T + Sync,
{
    if hi - lo <= LEAF_SIZE {
        return leaf(lo, hi);
    }
    let mid = lo + (hi - lo) / 2;
    let (a, b) = rayon::join(|| tree_reduce(lo, mid, leaf, merge), || tree_reduce(mid, hi, leaf, merge));
    merge(a, b)
}

/// Mean and standard error of ‖θ̃_k‖² over `n` trajectories; trajectory
/// `i` uses the stream seeded by `mix_seed(master_seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_mse<M, N>(
    map: &M,
    noise: &N,
    theta0: &DVector<f64>,
    epsilon: f64,
    steps: usize,
    n: usize,
    master_seed: u64,
    allow_diverged: bool,
) -> Result<MseCurve>
where
    M: StepMap + ?Sized,
    N: NoiseProcess + ?Sized,
{
    check_epsilon(epsilon)?;
    check_dim(map, theta0.len())?;
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 trajectories, got {n}")));
    }
    let len = steps + 1;
    let leaf = |lo: usize, hi: usize| -> Result<Moments> {
        let mut acc = Moments::empty(len);
        let mut values = vec![0.0; len];
        for i in lo..hi {
            let mut rng = stream(mix_seed(master_seed, i as u64));
            let run = simulate(map, noise, theta0.as_slice(), epsilon, steps, &mut rng, |k, t, _| {
                values[k] = norm_sq(t);
            });
            match run {
                Ok(()) => acc.push(&values),
                Err(Error::NonFiniteIterate { .. } | Error::Diverged { .. }) if allow_diverged => {
                    acc.diverged += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(acc)
    };
    let merge = |a: Result<Moments>, b: Result<Moments>| -> Result<Moments> { Ok(a?.merge(b?)) };
    let total = tree_reduce(0, n, &leaf, &merge)?;
    if total.n < 2 {
        return Err(Error::InvalidInput(format!("only {} of {n} trajectories stayed bounded", total.n)));
    }
    let count = total.n as f64;
    let stderr = total.m2.iter().map(|&s| (s.max(0.0) / (count - 1.0) / count).sqrt()).collect();
    Ok(MseCurve { epsilon, n_trajectories: total.n, n_diverged: total.diverged, mean: total.mean, stderr })
}

/// Means and standard errors of a vector statistic over `n` independent
/// seeded replications, reduced in the same fixed tree order as
/// [`monte_carlo_mse`]. Replication `i` uses `mix_seed(master_seed, i)`.
pub fn seeded_moments<F>(n: usize, master_seed: u64, width: usize, sample: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut SaRng, &mut [f64]) -> Result<()> + Sync,
{
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 replications, got {n}")));
    }
    let leaf = |lo: usize, hi: usize| -> Result<Moments> {
        let mut acc = Moments::empty(width);
        let mut values = vec![0.0; width];
        for i in lo..hi {
            let mut rng = stream(mix_seed(master_seed, i as u64));
            sample(&mut rng, &mut values)?;
            acc.push(&values);
        }
        Ok(acc)
    };
    let merge = |a: Result<Moments>, b: Result<Moments>| -> Result<Moments> { Ok(a?.merge(b?)) };
    let m = tree_reduce(0, n, &leaf, &merge)?;
    let count = m.n as f64;
    let stderr = m.m2.iter().map(|&s| (s.max(0.0) / (count - 1.0) / count).sqrt()).collect();
    Ok((m.mean, stderr))
}

/// Deviations δ_k = Pr(X_k = ·|X_0 = x0) − μ for k = 0..=max_k.
#[derive(Debug, Clone)]
pub struct DeviationProfile {
    deviations: Vec<DVector<f64>>,
}

impl DeviationProfile {
    pub fn new(chain: &ChainModel, x0: usize, max_k: usize) -> Result<Self> {
        let n = chain.n_states();
        if x0 >= n {
            return Err(Error::IndexOutOfRange(format!("noise state {x0} of {n}")));
        }
        let mu = chain.stationary();
        let pt = chain.transition().transpose();
        let mut delta = -mu.clone();
        delta[x0] += 1.0;
        let mut deviations = Vec::with_capacity(max_k + 1);
        deviations.push(delta.clone());
        for _ in 0..max_k {
            delta = &pt * delta;
            // Keep the deviation in the zero-mass subspace despite rounding.
            let mass = delta.sum();
            delta.axpy(-mass, mu, 1.0);
            deviations.push(delta.clone());
        }
        Ok(Self { deviations })
    }

    pub fn max_k(&self) -> usize {
        self.deviations.len() - 1
    }

    /// b_k = E[f(θ, X_k)|X_0 = x0] − Σ_x μ(x) f(θ, x).
    pub fn bias_terms<M: StepMap + ?Sized>(&self, map: &M, theta: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = self.deviations[0].len();
        let d = map.dim();
        let mut values = DMatrix::zeros(d, n);
        let mut buf = vec![0.0; d];
        for x in 0..n {
            map.f(theta.as_slice(), x, &mut buf);
            values.column_mut(x).copy_from_slice(&buf);
        }
        self.deviations.iter().map(|delta| &values * delta).collect()
    }
}

/// ‖(1/T)·Σ_{k=T0}^{T0+T−1} b_k‖.
pub fn window_bias(terms: &[DVector<f64>], t0: usize, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidInput("window length must be at least 1".into()));
    }
    if t0 + t > terms.len() {
        return Err(Error::IndexOutOfRange(format!("window {t0}..{} exceeds {} computed terms", t0 + t, terms.len())));
    }
    let mut sum = DVector::zeros(terms[0].len());
    for b in &terms[t0..t0 + t] {
        sum += b;
    }
    Ok(sum.norm() / t as f64)
}

/// Exact averaged ergodic bias started from noise state `x0`.
pub fn exact_ergodic_bias<M, N>(map: &M, noise: &N, theta: &DVector<f64>, t0: usize, t: usize, x0: usize) -> Result<f64>
where
    M: StepMap + ?Sized,
    N: NoiseProcess + ?Sized,
{
    let chain = noise.chain().ok_or(Error::InfiniteAlphabet)?;
    check_alphabet(map, chain)?;
    check_dim(map, theta.len())?;
    if t == 0 {
        return Err(Error::InvalidInput("window length must be at least 1".into()));
    }
    let profile = DeviationProfile::new(chain, x0, t0 + t)?;
    window_bias(&profile.bias_terms(map, theta), t0, t)
}

fn check_alphabet<M: StepMap + ?Sized>(map: &M, chain: &ChainModel) -> Result<()> {
    match map.alphabet_size() {
        Some(n) if n != chain.n_states() => {
            Err(Error::DimensionMismatch(format!("map is defined on {n} noise states, chain has {}", chain.n_states())))
        }
        _ => Ok(()),
    }
}

/// Outcome of checking the averaged bias against σ(T;T0)·L·(‖θ‖+1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCertification {
    pub checked: usize,
    pub violations: usize,
    /// Largest observed bias / envelope ratio.
    pub worst_ratio: f64,
}

/// Checks every window `T ∈ 1..=t_max`, `T0 ∈ 0..=t0_max`, every start
/// state and every supplied θ.
pub fn certify_ergodic_bias<M, N, R>(
    map: &M,
    noise: &N,
    rate: &R,
    thetas: &[DVector<f64>],
    t_max: usize,
    t0_max: usize,
) -> Result<BiasCertification>
where
    M: StepMap + ?Sized,
    N: NoiseProcess + ?Sized,
    R: BiasRate + ?Sized,
{
    let chain = noise.chain().ok_or(Error::InfiniteAlphabet)?;
    check_alphabet(map, chain)?;
    let l = map.lipschitz();
    let mut report = BiasCertification { checked: 0, violations: 0, worst_ratio: 0.0 };
    for x0 in 0..chain.n_states() {
        let profile = DeviationProfile::new(chain, x0, t0_max + t_max)?;
        for theta in thetas {
            check_dim(map, theta.len())?;
            let terms = profile.bias_terms(map, theta);
            let scale = l * (theta.norm() + 1.0);
            for t0 in 0..=t0_max {
                let mut sum = DVector::zeros(map.dim());
                for t in 1..=t_max {
                    sum += &terms[t0 + t - 1];
                    let bias = sum.norm() / t as f64;
                    let envelope = rate.sigma(t as u64, t0 as u64) * scale;
                    report.checked += 1;
                    if bias > envelope {
                        report.violations += 1;
                    }
                    if envelope > 0.0 {
                        report.worst_ratio = report.worst_ratio.max(bias / envelope);
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Sampled estimates of the Lipschitz and growth ratios of a step map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub lipschitz_estimate: f64,
    pub growth_estimate: f64,
    pub declared: f64,
    pub pass: bool,
}

fn random_point(rng: &mut SaRng, d: usize, radius: f64) -> DVector<f64> {
    let dir = random_unit(rng, d);
    let r: f64 = rng.random();
    dir * (radius * r.powf(1.0 / d as f64))
}

/// A uniformly distributed unit vector.
pub fn random_unit(rng: &mut SaRng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| standard_normal(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Box-Muller normal draw.
pub fn standard_normal(rng: &mut SaRng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn check_lipschitz_growth<M: StepMap + ?Sized>(
    map: &M,
    n_samples: usize,
    radius: f64,
    seed: u64,
) -> LipschitzReport {
    let d = map.dim();
    let states = map.alphabet_size().unwrap_or(1);
    let mut rng = stream(seed);
    let mut fa = vec![0.0; d];
    let mut fb = vec![0.0; d];
    let mut lip = 0.0_f64;
    let mut growth = 0.0_f64;
    for i in 0..n_samples {
        let a = if i == 0 { DVector::zeros(d) } else { random_point(&mut rng, d, radius) };
        let b = random_point(&mut rng, d, radius);
        let gap = (&a - &b).norm();
        for x in 0..states {
            map.f(a.as_slice(), x, &mut fa);
            map.f(b.as_slice(), x, &mut fb);
            if gap > 0.0 {
                let diff: f64 = fa.iter().zip(&fb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                lip = lip.max(diff / gap);
            }
            growth = growth.max(norm_sq(&fa).sqrt() / (a.norm() + 1.0));
            growth = growth.max(norm_sq(&fb).sqrt() / (b.norm() + 1.0));
        }
    }
    let declared = map.lipschitz();
    let limit = declared * (1.0 + 1e-9);
    LipschitzReport {
        lipschitz_estimate: lip,
        growth_estimate: growth,
        declared,
        pass: lip <= limit && growth <= limit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::GeometricRate;

    struct Zero(usize);

    impl StepMap for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn alphabet_size(&self) -> Option<usize> {
            None
        }
        fn f(&self, _: &[f64], _: usize, out: &mut [f64]) {
            out.fill(0.0);
        }
        fn f_bar(&self, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn theta_star(&self) -> &[f64] {
            &[]
        }
    }

    /// f(θ, x) = c_x − θ on a two-state chain, with f̄ = Σμc − θ.
    struct Shift {
        c: [f64; 2],
        mu: [f64; 2],
    }

    impl StepMap for Shift {
        fn dim(&self) -> usize {
            1
        }
        fn alphabet_size(&self) -> Option<usize> {
            Some(2)
        }
        fn f(&self, theta: &[f64], x: usize, out: &mut [f64]) {
            out[0] = self.c[x] - theta[0];
        }
        fn f_bar(&self, theta: &[f64], out: &mut [f64]) {
            out[0] = self.mu[0] * self.c[0] + self.mu[1] * self.c[1] - theta[0];
        }
        fn lipschitz(&self) -> f64 {
            2.0
        }
        fn theta_star(&self) -> &[f64] {
            &[0.0]
        }
    }

    struct Unbounded;

    impl NoiseProcess for Unbounded {
        fn sample_initial(&self, _: &mut SaRng) -> usize {
            0
        }
        fn next(&self, s: usize, _: &mut SaRng) -> usize {
            s + 1
        }
        fn alphabet_size(&self) -> Option<usize> {
            None
        }
        fn chain(&self) -> Option<&ChainModel> {
            None
        }
    }

    fn contraction() -> LinearMap {
        LinearMap::new(-DMatrix::identity(1, 1), 1.0).unwrap()
    }

    fn two_state_noise(p: [f64; 4], init: InitialDistribution) -> MarkovNoise {
        let chain = ChainModel::new(DMatrix::from_row_slice(2, 2, &p)).unwrap();
        MarkovNoise::new(chain, init).unwrap()
    }

    #[test]
    fn step_examples() {
        let theta = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(step(&theta, 0, 0.3, &Zero(2)).unwrap(), theta);
        let next = step(&DVector::from_vec(vec![1.0]), 0, 0.1, &contraction()).unwrap();
        assert_eq!(next[0], 0.9);
        assert!(step(&theta, 0, 0.0, &Zero(2)).is_err());
    }

    #[test]
    fn step_reports_non_finite() {
        let huge = LinearMap::new(DMatrix::from_element(1, 1, f64::MAX), 1.0).unwrap();
        let err = step(&DVector::from_vec(vec![10.0]), 0, 1.0, &huge).unwrap_err();
        assert_eq!(err, Error::NonFiniteIterate { iteration: 1 });
    }

    #[test]
    fn trajectory_single_step_matches_step() {
        let noise = MarkovNoise::trivial();
        let theta0 = DVector::from_vec(vec![2.0]);
        let traj = run_trajectory(&contraction(), &noise, &theta0, 0.25, 1, 7).unwrap();
        assert_eq!(traj.thetas[1], step(&theta0, traj.noise[0], 0.25, &contraction()).unwrap());
        assert_eq!(traj.noise.len(), 2);
    }

    #[test]
    fn trajectory_is_deterministic() {
        let noise = two_state_noise([0.6, 0.4, 0.3, 0.7], InitialDistribution::Uniform);
        let map = Shift { c: [1.0, -1.0], mu: [3.0 / 7.0, 4.0 / 7.0] };
        let t0 = DVector::from_vec(vec![0.5]);
        let a = run_trajectory(&map, &noise, &t0, 0.1, 200, 99).unwrap();
        let b = run_trajectory(&map, &noise, &t0, 0.1, 200, 99).unwrap();
        assert_eq!(a, b);
        let c = run_trajectory(&map, &noise, &t0, 0.1, 200, 100).unwrap();
        assert_ne!(a.noise, c.noise);
    }

    #[test]
    fn first_noise_state_is_uniform_across_streams() {
        // Chi-square with one degree of freedom; 10.83 is the 0.1% quantile.
        let noise = two_state_noise([0.5, 0.5, 0.5, 0.5], InitialDistribution::Uniform);
        let n = 10_000;
        let ones: usize = (0..n).map(|i| noise.sample_initial(&mut stream(mix_seed(2024, i)))).sum();
        let expected = n as f64 / 2.0;
        let chi2 = 2.0 * (ones as f64 - expected).powi(2) / expected;
        assert!(chi2 < 10.83, "chi2 = {chi2}");
    }

    #[test]
    fn empirical_frequencies_approach_stationary() {
        let noise = two_state_noise([0.9, 0.1, 0.2, 0.8], InitialDistribution::PointMass(1));
        let mut rng = stream(5);
        let mut x = noise.sample_initial(&mut rng);
        let mut zeros = 0usize;
        let n = 200_000;
        for _ in 0..n {
            x = noise.next(x, &mut rng);
            zeros += usize::from(x == 0);
        }
        assert!((zeros as f64 / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn mse_of_frozen_iterates_is_constant() {
        let theta0 = DVector::from_vec(vec![3.0, 4.0]);
        let curve = monte_carlo_mse(&Zero(2), &MarkovNoise::trivial(), &theta0, 0.1, 20, 100, 1, false).unwrap();
        assert!(curve.mean.iter().all(|&m| m == 25.0));
        assert!(curve.stderr.iter().all(|&s| s == 0.0));
        assert_eq!(curve.mean.len(), 21);
    }

    #[test]
    fn mse_of_contraction_is_geometric() {
        let theta0 = DVector::from_vec(vec![2.0]);
        let eps = 0.05;
        let curve = monte_carlo_mse(&contraction(), &MarkovNoise::trivial(), &theta0, eps, 100, 50, 3, false).unwrap();
        for (k, m) in curve.mean.iter().enumerate() {
            let oracle = (1.0 - eps).powi(2 * k as i32) * 4.0;
            assert!((m - oracle).abs() <= 1e-12 * oracle);
            assert_eq!(curve.stderr[k], 0.0);
        }
    }

    #[test]
    fn mse_is_independent_of_thread_count() {
        let noise = two_state_noise([0.6, 0.4, 0.3, 0.7], InitialDistribution::PointMass(0));
        let map = Shift { c: [1.0, -1.0], mu: [3.0 / 7.0, 4.0 / 7.0] };
        let t0 = DVector::from_vec(vec![1.0]);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| monte_carlo_mse(&map, &noise, &t0, 0.05, 50, 1000, 11, false).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(4));
        assert_eq!(one, run(7));
    }

    #[test]
    fn mse_reports_divergence() {
        let blowup = LinearMap::new(DMatrix::from_element(1, 1, 10.0), 10.0).unwrap();
        let t0 = DVector::from_vec(vec![1.0]);
        let err = monte_carlo_mse(&blowup, &MarkovNoise::trivial(), &t0, 1.0, 50, 4, 0, false).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 12, .. }), "{err:?}");
    }

    #[test]
    fn ergodic_bias_vanishes_for_stationary_rows() {
        let noise = two_state_noise([0.25, 0.75, 0.25, 0.75], InitialDistribution::Uniform);
        let map = Shift { c: [2.0, -1.0], mu: [0.25, 0.75] };
        let theta = DVector::from_vec(vec![0.3]);
        for t0 in 1..5 {
            assert!(exact_ergodic_bias(&map, &noise, &theta, t0, 3, 0).unwrap() < 1e-15);
        }
        let zero = exact_ergodic_bias(&Zero(1), &noise, &DVector::zeros(1), 0, 4, 1).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn ergodic_bias_closed_form() {
        // For P = [[0.9,0.1],[0.2,0.8]] from state 0: Pr(X_k=0) − 2/3 = (1/3)·0.7^k.
        let noise = two_state_noise([0.9, 0.1, 0.2, 0.8], InitialDistribution::Uniform);
        let c = [2.0, -1.0];
        let map = Shift { c, mu: [2.0 / 3.0, 1.0 / 3.0] };
        let theta = DVector::from_vec(vec![0.7]);
        let (t0, t) = (2usize, 5usize);
        let sum: f64 = (t0..t0 + t).map(|k| 0.7_f64.powi(k as i32) / 3.0).sum();
        let oracle = (sum * (c[0] - c[1]) / t as f64).abs();
        let got = exact_ergodic_bias(&map, &noise, &theta, t0, t, 0).unwrap();
        assert!((got - oracle).abs() < 1e-14, "{got} vs {oracle}");
    }

    #[test]
    fn ergodic_bias_respects_envelope() {
        let noise = two_state_noise([0.9, 0.1, 0.2, 0.8], InitialDistribution::Uniform);
        let map = Shift { c: [1.0, -1.0], mu: [2.0 / 3.0, 1.0 / 3.0] };
        let rate: GeometricRate = noise.chain().unwrap().envelope().unwrap().rate();
        let thetas: Vec<_> = [-1.0, 0.0, 1.0].iter().map(|&v| DVector::from_vec(vec![v])).collect();
        let report = certify_ergodic_bias(&map, &noise, &rate, &thetas, 50, 20).unwrap();
        assert_eq!(report.violations, 0);
        assert_eq!(report.checked, 2 * 3 * 50 * 21);
    }

    #[test]
    fn ergodic_bias_needs_finite_alphabet() {
        let err = exact_ergodic_bias(&Zero(1), &Unbounded, &DVector::zeros(1), 0, 1, 0).unwrap_err();
        assert_eq!(err, Error::InfiniteAlphabet);
    }

    #[test]
    fn lipschitz_check_on_contraction() {
        let report = check_lipschitz_growth(&contraction(), 500, 10.0, 1);
        assert!(report.pass);
        assert!(report.lipschitz_estimate <= 1.0 && report.growth_estimate <= 1.0);
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen: Vec<u64> = (0..10_000).map(|i| mix_seed(42, i)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10_000);
    }
}
