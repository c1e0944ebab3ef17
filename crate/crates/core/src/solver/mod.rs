//! Outer loops: alternating MU/QU block updates, two baselines, and diagnostics.

mod baselines;
mod block;
mod kkt;
mod trace;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{GeneralizedSimplex, ProblemSpec, Side};

pub use baselines::{bmd_solve, pgd_solve, project_shifted_simplex};
pub use kkt::kkt_residual;
pub use trace::{SolverTrace, TraceRecord, TRACE_CSV_HEADER};

pub(crate) use block::tbsum_run;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mu,
    Qu,
    Bmd,
    Pgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Mu, Algorithm::Qu, Algorithm::Bmd, Algorithm::Pgd];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mu => "mu",
            Algorithm::Qu => "qu",
            Algorithm::Bmd => "bmd",
            Algorithm::Pgd => "pgd",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mu" => Ok(Algorithm::Mu),
            "qu" => Ok(Algorithm::Qu),
            "bmd" => Ok(Algorithm::Bmd),
            "pgd" => Ok(Algorithm::Pgd),
            other => Err(Error::InvalidSpec(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Adaptive replacement of σ_L by γ: grow by υ when the bound failed, shrink by τ otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub upsilon: f64,
    pub tau: f64,
}

impl LineSearch {
    pub fn new(upsilon: f64, tau: f64) -> Result<Self> {
        for (name, v) in [("upsilon", upsilon), ("tau", tau)] {
            if !(v > 1.0 && v <= 2.0) {
                return Err(Error::InvalidSpec(format!("{name} must lie in (1, 2], got {v}")));
            }
        }
        Ok(Self { upsilon, tau })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub max_iter: usize,
    /// Stop once `|f_{t-1} − f_t| / max(|f_{t-1}|, 1e-300) < rel_tol`.
    pub rel_tol: f64,
    pub linesearch: Option<LineSearch>,
    pub dichotomy_tol: f64,
    pub dichotomy_cap: usize,
    pub seed: u64,
    /// Record every `trace_every` iterations (the first and last are always recorded).
    pub trace_every: usize,
    /// Fan per-row/per-column work out to the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Mu,
            max_iter: 200,
            rel_tol: 1e-10,
            linesearch: None,
            dichotomy_tol: 1e-12,
            dichotomy_cap: 200,
            seed: 0,
            trace_every: 1,
            parallel: false,
        }
    }
}

impl SolverConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidSpec(format!("rel_tol must be ≥ 0, got {}", self.rel_tol)));
        }
        if !(self.dichotomy_tol > 0.0) || self.dichotomy_cap == 0 {
            return Err(Error::InvalidSpec("dichotomy tolerance and cap must be positive".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidSpec("trace_every must be ≥ 1".into()));
        }
        if let Some(ls) = self.linesearch {
            LineSearch::new(ls.upsilon, ls.tau)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Termination {
    Converged { iterations: usize },
    MaxIter { iterations: usize },
    /// PGD step fell below the underflow threshold.
    StepUnderflow { iterations: usize },
    /// An update failed; factors are the last good iterate.
    Failed { iterations: usize, reason: String },
}

impl Termination {
    pub fn iterations(&self) -> usize {
        match self {
            Termination::Converged { iterations }
            | Termination::MaxIter { iterations }
            | Termination::StepUnderflow { iterations }
            | Termination::Failed { iterations, .. } => *iterations,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Termination::Failed { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub w: DenseMatrix,
    pub h: DenseMatrix,
    pub trace: SolverTrace,
    pub termination: Termination,
    pub warnings: Vec<String>,
}

/// Entries uniform on `[ε, 1]`; the constrained side is rescaled onto `eᵀx = 1`, re-clamped
/// at `ε` and rebalanced.
pub fn initialize(spec: &ProblemSpec, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n, m) = spec.y().shape();
    let k = spec.rank();
    let eps = spec.epsilon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = eps.max(1.0);
    let mut draw = |_, _| if hi > eps { rng.random_range(eps..=hi) } else { eps };
    let mut w = DenseMatrix::from_fn(n, k, &mut draw);
    let mut h = DenseMatrix::from_fn(k, m, &mut draw);
    if let Some(c) = spec.constraint() {
        match c.side().side() {
            Side::H => {
                for j in 0..m {
                    let mut col = h.column(j);
                    project_onto_constraint(&mut col, c, eps);
                    h.set_column(j, &col);
                }
            }
            Side::W => {
                for i in 0..n {
                    project_onto_constraint(w.row_mut(i), c, eps);
                }
            }
        }
    }
    Ok((w, h))
}

/// Scale–clamp–rebalance onto `{x ≥ ε, eᵀx = 1}` for a positive starting vector.
fn project_onto_constraint(x: &mut [f64], c: &GeneralizedSimplex, eps: f64) {
    let e = c.weights();
    let total_e: f64 = e.iter().filter(|&&v| v > 0.0).sum();
    if 1.0 - eps * total_e <= 1e-15 {
        for (xj, &ej) in x.iter_mut().zip(e) {
            if ej > 0.0 {
                *xj = eps;
            }
        }
        return;
    }
    let mut clamped = vec![false; x.len()];
    for _ in 0..10 {
        let fixed: f64 = (0..x.len()).filter(|&j| e[j] > 0.0 && clamped[j]).map(|j| e[j] * eps).sum();
        let free: f64 = (0..x.len()).filter(|&j| e[j] > 0.0 && !clamped[j]).map(|j| e[j] * x[j]).sum();
        let s = (1.0 - fixed) / free;
        let mut changed = false;
        for j in 0..x.len() {
            if e[j] > 0.0 && !clamped[j] {
                x[j] *= s;
                if x[j] < eps {
                    x[j] = eps;
                    clamped[j] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// `υγ` when the bound was violated at the realized iterate, `γ/τ` when it held.
pub fn linesearch_gamma(gamma: f64, majorized: bool, upsilon: f64, tau: f64) -> f64 {
    if majorized {
        gamma / tau
    } else {
        upsilon * gamma
    }
}

/// Alternating MU (Algorithm::Mu) or QU (Algorithm::Qu) block updates.
pub fn tbsum_solve(spec: &ProblemSpec, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    if !matches!(config.algorithm, Algorithm::Mu | Algorithm::Qu) {
        return Err(Error::InvalidSpec(format!(
            "tbsum_solve runs mu or qu, not {}",
            config.algorithm.name()
        )));
    }
    let (w, h) = initialize(spec, config.seed)?;
    tbsum_run(spec, config, w, h)
}

/// Runs the configured algorithm from [`initialize`].
pub fn solve(spec: &ProblemSpec, config: &SolverConfig) -> Result<SolveResult> {
    match config.algorithm {
        Algorithm::Mu | Algorithm::Qu => tbsum_solve(spec, config),
        Algorithm::Bmd => bmd_solve(spec, config),
        Algorithm::Pgd => pgd_solve(spec, config),
    }
}

/// Runs the configured algorithm from given factors.
pub fn solve_from(spec: &ProblemSpec, config: &SolverConfig, w: DenseMatrix, h: DenseMatrix) -> Result<SolveResult> {
    config.validate()?;
    spec.check_factors(&w, &h)?;
    match config.algorithm {
        Algorithm::Mu | Algorithm::Qu | Algorithm::Bmd => tbsum_run(spec, config, w, h),
        Algorithm::Pgd => baselines::pgd_run(spec, config, w, h),
    }
}

/// `max |eᵀx − 1|` over the constrained vectors, 0 without a constraint.
pub fn constraint_violation(spec: &ProblemSpec, w: &DenseMatrix, h: &DenseMatrix) -> f64 {
    match spec.constraint() {
        None => 0.0,
        Some(c) => match c.side().side() {
            Side::H => c.violation(h),
            Side::W => c.violation(w),
        },
    }
}
