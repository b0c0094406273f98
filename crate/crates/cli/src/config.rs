//! Experiment configuration: JSON parsing and validation.
//!
//! Matrices are nested arrays in row-major order. `mdp.transitions[u]` is the
//! |S|×|S| matrix of action `u`; `mdp.rewards` is |S|×|U|. Features have one
//! row per state for `td0` and one row per (s, u) pair, ordered s-major, for
//! `qlearning`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sa_lab_core::lyapunov::BoundConstants;
use sa_lab_core::mdp::{Mdp, Policy, ROW_SUM_TOL};
use sa_lab_core::sa_core::InitialDistribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },

    #[error("invalid `{field}`: {msg}")]
    Validation { field: String, msg: String },
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation { field: field.into(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Td0,
    Qlearning,
}

/// A fixed stepsize or a fraction of the derived ε_δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Stepsize {
    Value(f64),
    Relative(RelativeStepsize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelativeStepsize {
    pub fraction_of_eps_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub states: usize,
    pub actions: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
}

fn default_trajectories() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSpec,
    /// |S|×|U| action probabilities; uniform when absent.
    #[serde(default)]
    pub policy: Option<Vec<Vec<f64>>>,
    pub features: Vec<Vec<f64>>,
    pub algorithm: Algorithm,
    pub epsilon: Stepsize,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Right-hand side of the Lyapunov equation; identity when absent.
    #[serde(default)]
    pub q_matrix: Option<Vec<Vec<f64>>>,
    /// Number of steps K; 5·k_ε when absent.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub initial_noise: InitialDistribution,
    /// Initial iterate in original coordinates; zero when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

/// A validated configuration with its matrices assembled.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub mdp: Mdp,
    pub policy: Policy,
    pub features: DMatrix<f64>,
    pub q_matrix: Option<DMatrix<f64>>,
    pub theta0: Vec<f64>,
}

impl Experiment {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

fn parse_error(e: serde_json::Error) -> ConfigError {
    ConfigError::Parse { line: e.line(), column: e.column(), msg: e.to_string() }
}

pub fn load_config(path: &Path) -> Result<Experiment, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<Experiment, ConfigError> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(parse_error)?;
    config.validate()
}

fn check_finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite, got {v}")))
    }
}

fn matrix(field: &str, rows: &[Vec<f64>], nrows: usize, ncols: Option<usize>) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != nrows {
        return Err(invalid(field, format!("expected {nrows} rows, got {}", rows.len())));
    }
    let ncols = match ncols {
        Some(c) => c,
        None => rows.first().map_or(0, |r| r.len()),
    };
    if ncols == 0 {
        return Err(invalid(field, "rows must be nonempty"));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(invalid(format!("{field}[{i}]"), format!("expected {ncols} entries, got {}", row.len())));
        }
        for (j, &v) in row.iter().enumerate() {
            check_finite(&format!("{field}[{i}][{j}]"), v)?;
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn stochastic_rows(field: &str, m: &DMatrix<f64>) -> Result<(), ConfigError> {
    for (i, row) in m.row_iter().enumerate() {
        if let Some(j) = row.iter().position(|&v| v < 0.0) {
            return Err(invalid(format!("{field}[{i}][{j}]"), "probabilities must be nonnegative"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(invalid(format!("{field}[{i}]"), format!("row sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<Experiment, ConfigError> {
        let spec = &self.mdp;
        let (n, na) = (spec.states, spec.actions);
        if n == 0 {
            return Err(invalid("mdp.states", "must be at least 1"));
        }
        if na == 0 {
            return Err(invalid("mdp.actions", "must be at least 1"));
        }
        if !(spec.gamma >= 0.0 && spec.gamma < 1.0) {
            return Err(invalid("mdp.gamma", format!("discount factor γ∈[0,1) required, got {}", spec.gamma)));
        }
        if spec.transitions.len() != na {
            return Err(invalid(
                "mdp.transitions",
                format!("expected one matrix per action ({na}), got {}", spec.transitions.len()),
            ));
        }
        let mut transitions = Vec::with_capacity(na);
        for (u, rows) in spec.transitions.iter().enumerate() {
            let field = format!("mdp.transitions[{u}]");
            let p = matrix(&field, rows, n, Some(n))?;
            stochastic_rows(&field, &p)?;
            transitions.push(p);
        }
        let rewards = matrix("mdp.rewards", &spec.rewards, n, Some(na))?;

        let policy = match &self.policy {
            Some(rows) => {
                let m = matrix("policy", rows, n, Some(na))?;
                stochastic_rows("policy", &m)?;
                Policy::new(m).map_err(|e| invalid("policy", e.to_string()))?
            }
            None => Policy::uniform(n, na),
        };

        let feature_rows = match self.algorithm {
            Algorithm::Td0 => n,
            Algorithm::Qlearning => n * na,
        };
        let features = matrix("features", &self.features, feature_rows, None)?;
        let d = features.ncols();

        match self.epsilon {
            Stepsize::Value(e) => {
                if !(e > 0.0) || !e.is_finite() {
                    return Err(invalid("epsilon", format!("must be positive and finite, got {e}")));
                }
            }
            Stepsize::Relative(r) => {
                let f = r.fraction_of_eps_delta;
                if !(f > 0.0 && f < 1.0) {
                    return Err(invalid("epsilon.fraction_of_eps_delta", format!("must lie in (0, 1), got {f}")));
                }
            }
        }
        if let Some(delta) = self.delta {
            if !(delta > 0.0) || !delta.is_finite() {
                return Err(invalid("delta", format!("must be positive and finite, got {delta}")));
            }
        }
        let q_matrix = match &self.q_matrix {
            Some(rows) => {
                let q = matrix("q_matrix", rows, d, Some(d))?;
                if (&q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
                    return Err(invalid("q_matrix", "must be symmetric"));
                }
                Some(q)
            }
            None => None,
        };
        if self.horizon == Some(0) {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.trajectories < 2 {
            return Err(invalid("trajectories", "must be at least 2"));
        }
        if let InitialDistribution::PointMass(x) = self.initial_noise {
            let alphabet = (0..n)
                .flat_map(|s| (0..na).map(move |u| (s, u)))
                .filter(|&(s, u)| policy.prob(s, u) > 0.0)
                .map(|(s, u)| transitions[u].row(s).iter().filter(|&&v| v > 0.0).count())
                .sum::<usize>();
            if x >= alphabet {
                return Err(invalid(
                    "initial_noise.point_mass",
                    format!("noise state {x} is outside the alphabet of {alphabet} (s, u, s') triples"),
                ));
            }
        }
        let theta0 = match &self.theta0 {
            Some(t) => {
                if t.len() != d {
                    return Err(invalid("theta0", format!("expected {d} entries, got {}", t.len())));
                }
                for (i, &v) in t.iter().enumerate() {
                    check_finite(&format!("theta0[{i}]"), v)?;
                }
                t.clone()
            }
            None => vec![0.0; d],
        };

        let mdp = Mdp::new(transitions, rewards, spec.gamma).map_err(|e| invalid("mdp", e.to_string()))?;
        Ok(Experiment { config: self.clone(), mdp, policy, features, q_matrix, theta0 })
    }
}

/// Parses a constants file holding a serialized `BoundConstants`. The entries
/// `c4pp` and `c6` are recomputed from the others.
pub fn parse_constants(text: &str) -> Result<BoundConstants, ConfigError> {
    let mut c: BoundConstants = serde_json::from_str(text).map_err(parse_error)?;
    let fields = [
        ("delta", c.delta),
        ("eps_delta", c.eps_delta),
        ("lipschitz", c.lipschitz),
        ("c1p", c.c1p),
        ("c2p", c.c2p),
        ("c2pp", c.c2pp),
        ("c3p", c.c3p),
        ("c4p", c.c4p),
        ("c5p", c.c5p),
    ];
    for (name, v) in fields {
        check_finite(name, v)?;
    }
    for (name, v) in [("c1p", c.c1p), ("c2p", c.c2p), ("eps_delta", c.eps_delta), ("delta", c.delta)] {
        if !(v > 0.0) {
            return Err(invalid(name, format!("must be positive, got {v}")));
        }
    }
    if c.c3p == 0.0 {
        return Err(invalid("c3p", "must be nonzero"));
    }
    if c.t_star == 0 {
        return Err(invalid("t_star", "must be at least 1"));
    }
    c.recompute_derived();
    if !c.c4pp.is_finite() || !c.c6.is_finite() {
        return Err(invalid("c6", "derived constants are not finite"));
    }
    Ok(c)
}

pub fn load_constants(path: &Path) -> Result<BoundConstants, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    parse_constants(&text)
}
