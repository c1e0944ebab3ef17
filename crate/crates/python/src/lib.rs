//! Python bindings: dataset generation, the solvers, the KKT check and the single-vector
//! update rules. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pnmf::data::{generate as generate_dataset, DatasetConfig, DatasetKind};
use pnmf::model::{log_barrier_sigma, ConstraintSide, GeneralizedSimplex, ProblemSpec, RegularizerSpec, DEFAULT_EPSILON};
use pnmf::update::{self, DualConfig, MuCoefficients, QuCoefficients};
use pnmf::{laplacian_2d, Algorithm, DenseMatrix, SolverConfig};

fn py_err(e: pnmf::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(py_err)
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Ground-truth factors and data of a synthetic dataset.
#[pyclass(frozen, get_all, module = "pnmf_py")]
struct Dataset {
    w_true: Vec<Vec<f64>>,
    h_true: Vec<Vec<f64>>,
    y_clean: Vec<Vec<f64>>,
    y_noisy: Vec<Vec<f64>>,
}

/// Factors, objective history and termination status of a solve.
#[pyclass(frozen, get_all, module = "pnmf_py")]
struct SolveResult {
    w: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    /// Objective after every iteration; index 0 is the initial point.
    objectives: Vec<f64>,
    /// `converged`, `max-iter`, `step-underflow` or `failed`.
    status: String,
    iterations: usize,
    kkt_residual: Option<f64>,
    warnings: Vec<String>,
}

#[pymethods]
impl SolveResult {
    fn __repr__(&self) -> String {
        format!(
            "SolveResult(status={:?}, iterations={}, objective={:?})",
            self.status,
            self.iterations,
            self.objectives.last()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (kind, n, k, p, noise_lambda = f64::INFINITY, seed = 0))]
fn generate(kind: &str, n: usize, k: usize, p: usize, noise_lambda: f64, seed: u64) -> PyResult<Dataset> {
    let kind: DatasetKind = kind.parse().map_err(py_err)?;
    let cfg = DatasetConfig::new(kind, n, k, p).with_noise(noise_lambda).with_seed(seed);
    let d = generate_dataset(&cfg).map_err(py_err)?;
    Ok(Dataset {
        w_true: to_rows(&d.w_true),
        h_true: to_rows(&d.h_true),
        y_clean: to_rows(&d.y_clean),
        y_noisy: to_rows(&d.y_noisy),
    })
}

/// Builds the problem from keyword options; the regularizers and the constraint act on H.
#[allow(clippy::too_many_arguments)]
fn build_spec(
    y: DenseMatrix,
    rank: usize,
    laplacian_weight: Option<f64>,
    log_sparsity: Option<f64>,
    log_barrier: Option<f64>,
    simplex_h: Option<Vec<f64>>,
    epsilon: Option<f64>,
) -> PyResult<ProblemSpec> {
    let mut reg = RegularizerSpec::none();
    if let Some(weight) = laplacian_weight {
        let m = y.cols();
        let p = (m as f64).sqrt().round() as usize;
        if p * p != m {
            return Err(PyValueError::new_err(format!(
                "laplacian_weight needs square images, Y has {m} columns"
            )));
        }
        let lap = laplacian_2d(p).map_err(py_err)?;
        reg = reg
            .merge(RegularizerSpec::laplacian_smoothness(weight, lap).map_err(py_err)?)
            .map_err(py_err)?;
    }
    let eps = epsilon.unwrap_or(DEFAULT_EPSILON);
    if let Some(offset) = log_barrier {
        let sigma = log_barrier_sigma(offset, eps).map_err(py_err)?;
        reg = reg
            .merge(RegularizerSpec::log_barrier(offset, sigma).map_err(py_err)?)
            .map_err(py_err)?;
    }
    if let Some(alpha) = log_sparsity {
        reg = reg.merge(RegularizerSpec::log_sparsity(alpha).map_err(py_err)?).map_err(py_err)?;
    }
    let mut b = ProblemSpec::builder(y, rank).reg_h(reg);
    if let Some(e) = epsilon {
        b = b.epsilon(e);
    }
    if let Some(weights) = simplex_h {
        b = b.constraint(GeneralizedSimplex::new(weights, ConstraintSide::HColumns).map_err(py_err)?);
    }
    b.build().map_err(py_err)
}

/// Factorizes `y ≈ W H` with the chosen algorithm (`mu`, `qu`, `bmd`, `pgd`).
///
/// `simplex_h=True` imposes `sum(h) = 1` on every column of H; a list of weights imposes
/// `eᵀh = 1` instead.
#[pyfunction]
#[pyo3(signature = (
    y, rank, algo = "mu", *, laplacian_weight = None, log_sparsity = None, log_barrier = None,
    simplex_h = None, max_iter = 200, rel_tol = 1e-10, seed = 0, epsilon = None
))]
#[allow(clippy::too_many_arguments)]
fn solve(
    py: Python<'_>,
    y: Vec<Vec<f64>>,
    rank: usize,
    algo: &str,
    laplacian_weight: Option<f64>,
    log_sparsity: Option<f64>,
    log_barrier: Option<f64>,
    simplex_h: Option<Bound<'_, PyAny>>,
    max_iter: usize,
    rel_tol: f64,
    seed: u64,
    epsilon: Option<f64>,
) -> PyResult<SolveResult> {
    let weights = match simplex_h {
        None => None,
        Some(obj) => match obj.extract::<bool>() {
            Ok(true) => Some(vec![1.0; rank]),
            Ok(false) => None,
            Err(_) => Some(obj.extract::<Vec<f64>>()?),
        },
    };
    let algorithm: Algorithm = algo.parse().map_err(py_err)?;
    let spec = build_spec(to_matrix(y)?, rank, laplacian_weight, log_sparsity, log_barrier, weights, epsilon)?;
    let config = SolverConfig {
        algorithm,
        max_iter,
        rel_tol,
        seed,
        ..SolverConfig::default()
    };
    let result = py.detach(|| pnmf::solve(&spec, &config)).map_err(py_err)?;
    let status = serde_status(&result.termination);
    Ok(SolveResult {
        kkt_residual: pnmf::kkt_residual(&result.w, &result.h, &spec).ok(),
        w: to_rows(&result.w),
        h: to_rows(&result.h),
        objectives: result.trace.objectives.clone(),
        status,
        iterations: result.termination.iterations(),
        warnings: result.warnings,
    })
}

fn serde_status(t: &pnmf::Termination) -> String {
    match t {
        pnmf::Termination::Converged { .. } => "converged",
        pnmf::Termination::MaxIter { .. } => "max-iter",
        pnmf::Termination::StepUnderflow { .. } => "step-underflow",
        pnmf::Termination::Failed { .. } => "failed",
    }
    .to_string()
}

/// `−⟨Y, log WH⟩ + ⟨1, WH⟩` (terms with `Y = 0` contribute only `WH`).
#[pyfunction]
fn poisson_loss(w: Vec<Vec<f64>>, h: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    pnmf::poisson_loss(&to_matrix(w)?, &to_matrix(h)?, &to_matrix(y)?).map_err(py_err)
}

/// Multiplicative update `max(xᵗ α / β, ε)`, or its simplex-constrained form when `e` is given.
#[pyfunction]
#[pyo3(signature = (x_t, alpha, beta, e = None, epsilon = DEFAULT_EPSILON))]
fn mu_update(x_t: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>, e: Option<Vec<f64>>, epsilon: f64) -> PyResult<Vec<f64>> {
    let c = MuCoefficients { alpha, beta };
    match e {
        None => update::mu_update(&x_t, &c, epsilon).map_err(py_err),
        Some(e) => update::mu_update_simplex(&x_t, &c, &e, epsilon, &DualConfig::default(), None)
            .map(|(x, _)| x)
            .map_err(py_err),
    }
}

/// Positive root of `α x² + β x − ζ = 0` per entry (floored at ε), or its
/// simplex-constrained form when `e` is given.
#[pyfunction]
#[pyo3(signature = (alpha, beta, zeta, e = None, epsilon = DEFAULT_EPSILON))]
fn qu_update(alpha: f64, beta: Vec<f64>, zeta: Vec<f64>, e: Option<Vec<f64>>, epsilon: f64) -> PyResult<Vec<f64>> {
    let c = QuCoefficients { alpha, beta, zeta };
    match e {
        None => update::qu_update(&c, epsilon).map_err(py_err),
        Some(e) => update::qu_update_simplex(&c, &e, epsilon, &DualConfig::default(), None)
            .map(|(x, _)| x)
            .map_err(py_err),
    }
}

#[pyfunction]
#[pyo3(signature = (y, e, epsilon = 0.0))]
fn project_shifted_simplex(y: Vec<f64>, e: Vec<f64>, epsilon: f64) -> Vec<f64> {
    pnmf::solver::project_shifted_simplex(&y, &e, epsilon)
}

#[pymodule]
fn pnmf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<SolveResult>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mu_update, m)?)?;
    m.add_function(wrap_pyfunction!(qu_update, m)?)?;
    m.add_function(wrap_pyfunction!(project_shifted_simplex, m)?)?;
    Ok(())
}
