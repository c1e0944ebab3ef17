//! Reference algorithms: block Bregman (mirror) descent and projected gradient.

use std::time::Instant;

use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::model::{objective_parts, GeneralizedSimplex, ProblemSpec, Side};

use super::block::{objective_block_gradient, record, relative_change, tbsum_run};
use super::trace::SolverTrace;
use super::{initialize, Algorithm, SolveResult, SolverConfig, Termination};

/// Block mirror descent: each block minimizes the Bregman bound of the whole smooth part
/// w.r.t. `−Σ log x` (constant `Σ_i b_i` for the data term), plus the regularizer bounds.
pub fn bmd_solve(spec: &ProblemSpec, config: &SolverConfig) -> Result<SolveResult> {
    let config = SolverConfig {
        algorithm: Algorithm::Bmd,
        ..config.clone()
    };
    config.validate()?;
    let (w, h) = initialize(spec, config.seed)?;
    tbsum_run(spec, &config, w, h)
}

/// Alternating projected gradient with backtracking.
pub fn pgd_solve(spec: &ProblemSpec, config: &SolverConfig) -> Result<SolveResult> {
    let config = SolverConfig {
        algorithm: Algorithm::Pgd,
        ..config.clone()
    };
    config.validate()?;
    let (w, h) = initialize(spec, config.seed)?;
    pgd_run(spec, &config, w, h)
}

const PGD_MIN_STEP: f64 = 1e-18;
const PGD_GROWTH: f64 = 1.1;

/// Euclidean projection onto `{x : x_j ≥ ε, eᵀx = 1}`; entries with `e_j = 0` are only floored.
///
/// The solution is `x_j = max(y_j − τ e_j, ε)`; `τ` is located by sweeping the sorted
/// breakpoints `(y_j − ε)/e_j`.
pub fn project_shifted_simplex(y: &[f64], e: &[f64], epsilon: f64) -> Vec<f64> {
    let mut x: Vec<f64> = y.iter().map(|&v| v.max(epsilon)).collect();
    let mut active: Vec<usize> = (0..e.len()).filter(|&j| e[j] > 0.0).collect();
    if active.is_empty() {
        return x;
    }
    let clamp_mass: f64 = active.iter().map(|&j| e[j]).sum::<f64>() * epsilon;
    if 1.0 - clamp_mass <= 0.0 {
        active.iter().for_each(|&j| x[j] = epsilon);
        return x;
    }
    let bp = |j: usize| (y[j] - epsilon) / e[j];
    active.sort_by(|&a, &b| bp(b).total_cmp(&bp(a)));
    let mut ey = 0.0;
    let mut ee = 0.0;
    let mut clamped_e: f64 = active.iter().map(|&j| e[j]).sum();
    let mut tau = 0.0;
    for (k, &j) in active.iter().enumerate() {
        ey += e[j] * y[j];
        ee += e[j] * e[j];
        clamped_e -= e[j];
        tau = (ey + epsilon * clamped_e - 1.0) / ee;
        let next = active.get(k + 1).map_or(f64::NEG_INFINITY, |&n| bp(n));
        if tau >= next {
            break;
        }
    }
    for &j in &active {
        x[j] = (y[j] - tau * e[j]).max(epsilon);
    }
    x
}

fn project_block(block: &mut DenseMatrix, side: Side, constraint: Option<&GeneralizedSimplex>, eps: f64) {
    match constraint {
        None => block.values_mut().iter_mut().for_each(|v| *v = v.max(eps)),
        Some(c) => match side {
            Side::H => {
                for j in 0..block.cols() {
                    let col = project_shifted_simplex(&block.column(j), c.weights(), eps);
                    block.set_column(j, &col);
                }
            }
            Side::W => {
                for i in 0..block.rows() {
                    let row = project_shifted_simplex(block.row(i), c.weights(), eps);
                    block.row_mut(i).copy_from_slice(&row);
                }
            }
        },
    }
}

/// Outcome of one backtracked block step.
enum Step {
    Accepted(f64),
    Underflow,
}

fn pgd_block(
    side: Side,
    w: &mut DenseMatrix,
    h: &mut DenseMatrix,
    spec: &ProblemSpec,
    f_old: f64,
    step: &mut f64,
) -> Result<Step> {
    let g = objective_block_gradient(side, w, h, spec)?;
    let current = match side {
        Side::W => w.clone(),
        Side::H => h.clone(),
    };
    loop {
        let mut trial = current.clone();
        trial
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .for_each(|(x, gx)| *x -= *step * gx);
        project_block(&mut trial, side, spec.constraint_on(side), spec.epsilon());
        let f = match side {
            Side::W => objective_parts(&trial, h, spec)?.total(),
            Side::H => objective_parts(w, &trial, spec)?.total(),
        };
        if f <= f_old {
            match side {
                Side::W => *w = trial,
                Side::H => *h = trial,
            }
            *step *= PGD_GROWTH;
            return Ok(Step::Accepted(f));
        }
        *step *= 0.5;
        if *step < PGD_MIN_STEP {
            return Ok(Step::Underflow);
        }
    }
}

pub(crate) fn pgd_run(
    spec: &ProblemSpec,
    config: &SolverConfig,
    mut w: DenseMatrix,
    mut h: DenseMatrix,
) -> Result<SolveResult> {
    spec.check_factors(&w, &h)?;
    let start = Instant::now();
    let mut trace = SolverTrace::default();
    let mut warnings = Vec::new();
    // the feasible start must be projected for PGD's own feasibility set too
    project_block(&mut h, Side::H, spec.constraint_on(Side::H), spec.epsilon());
    project_block(&mut w, Side::W, spec.constraint_on(Side::W), spec.epsilon());
    let parts = objective_parts(&w, &h, spec)?;
    let mut f_prev = parts.total();
    trace.objectives.push(f_prev);
    trace.records.push(record(0, spec, &w, &h, f_prev, parts.loss, None, 0.0, 0));

    let y = spec.y();
    let scale = y.sum() / (y.rows() * y.cols()) as f64;
    let initial = 1e-3 * if scale > 0.0 { scale } else { 1.0 };
    let mut step_w = initial;
    let mut step_h = initial;
    let mut termination = Termination::MaxIter {
        iterations: config.max_iter,
    };

    for it in 1..=config.max_iter {
        let t0 = Instant::now();
        let outcome = (|| -> Result<Option<f64>> {
            let Step::Accepted(fw) = pgd_block(Side::W, &mut w, &mut h, spec, f_prev, &mut step_w)? else {
                return Ok(None);
            };
            let Step::Accepted(fh) = pgd_block(Side::H, &mut w, &mut h, spec, fw, &mut step_h)? else {
                return Ok(None);
            };
            Ok(Some(fh))
        })();
        trace.update_seconds += t0.elapsed().as_secs_f64();
        let f = match outcome {
            Ok(Some(f)) => f,
            Ok(None) => {
                warnings.push(format!("step size fell below {PGD_MIN_STEP:e} at iteration {it}"));
                termination = Termination::StepUnderflow { iterations: it - 1 };
                break;
            }
            Err(e) => {
                warnings.push(e.to_string());
                termination = Termination::Failed {
                    iterations: it - 1,
                    reason: e.to_string(),
                };
                break;
            }
        };
        trace.objectives.push(f);
        let converged = relative_change(f_prev, f) < config.rel_tol;
        if it % config.trace_every == 0 || it == config.max_iter || converged {
            let loss = objective_parts(&w, &h, spec)?.loss;
            trace
                .records
                .push(record(it, spec, &w, &h, f, loss, None, start.elapsed().as_secs_f64(), 0));
        }
        f_prev = f;
        if converged {
            termination = Termination::Converged { iterations: it };
            break;
        }
    }
    Ok(SolveResult {
        w,
        h,
        trace,
        termination,
        warnings,
    })
}
