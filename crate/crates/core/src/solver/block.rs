//! The MU / QU / BMD block engine.
//!
//! One outer iteration updates every row of W, then every column of H. Each subproblem
//! only needs `Σ_i b_i a_ij/(Axᵗ)_i`, the column sums of `A` and the regularizer gradients
//! at `xᵗ`, all of which come out of two products with the current factors.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::majorize::gkl_divergence;
use crate::model::{objective_parts, subproblem_vector, Grouping, ProblemSpec, RegularizerSpec, Side};
use crate::update::{
    mu_update, mu_update_simplex, qu_update, qu_update_simplex, CoefficientTerms, DualConfig, DualSolve,
};

use super::trace::{SolverTrace, TraceRecord};
use super::{constraint_violation, linesearch_gamma, Algorithm, SolveResult, SolverConfig, Termination};

/// `Y ⊘ WH`, zero where `Y` is zero.
pub(crate) fn data_ratio(y: &DenseMatrix, wh: &DenseMatrix) -> Result<DenseMatrix> {
    let mut r = DenseMatrix::zeros(y.rows(), y.cols());
    for (idx, ((o, &c), &p)) in r.values_mut().iter_mut().zip(y.values()).zip(wh.values()).enumerate() {
        if c > 0.0 {
            if !(p > 0.0) {
                return Err(Error::Domain(format!("(WH) entry {idx} is {p} where Y is positive")));
            }
            *o = c / p;
        }
    }
    Ok(r)
}

/// Block-level ingredients: `em` and the regularizer gradients laid out like the block.
struct BlockInputs {
    em: DenseMatrix,
    column_sums: Vec<f64>,
    grad_l: Option<DenseMatrix>,
    grad_r: Option<DenseMatrix>,
    /// `Σ_i b_i` per subproblem, for the Bregman bound on the data term.
    data_mass: Vec<f64>,
}

fn block_inputs(side: Side, w: &DenseMatrix, h: &DenseMatrix, spec: &ProblemSpec) -> Result<BlockInputs> {
    let ratio = data_ratio(spec.y(), &w.matmul(h)?)?;
    let reg = spec.regularizer(side);
    let (em, column_sums, block, data_mass) = match side {
        Side::H => (w.t_matmul(&ratio)?, w.column_sums(), h, spec.y().column_sums()),
        Side::W => (ratio.matmul_t(h)?, h.row_sums(), w, spec.y().row_sums()),
    };
    Ok(BlockInputs {
        em,
        column_sums,
        grad_l: reg.lipschitz.as_ref().map(|t| t.block_gradient(block, side)),
        grad_r: reg.relsmooth.as_ref().map(|t| t.block_gradient(block, side)),
        data_mass,
    })
}

struct SubResult {
    x: Vec<f64>,
    dual: Option<DualSolve>,
    dual_seconds: f64,
}

pub(crate) struct BlockStats {
    pub dichotomy_iterations: usize,
    pub dichotomy_seconds: f64,
    pub unconverged_duals: usize,
}

/// Solves every subproblem of one block and reassembles it.
#[allow(clippy::too_many_arguments)]
fn update_block(
    side: Side,
    w: &DenseMatrix,
    h: &DenseMatrix,
    spec: &ProblemSpec,
    config: &SolverConfig,
    gamma: Option<f64>,
    warm: &mut [Option<f64>],
    stats: &mut BlockStats,
) -> Result<DenseMatrix> {
    let inputs = block_inputs(side, w, h, spec)?;
    let reg = spec.regularizer(side);
    let block = match side {
        Side::H => h,
        Side::W => w,
    };
    let count = warm.len();
    let eps = spec.epsilon();
    let constraint = spec.constraint_on(side);
    let dual_cfg = DualConfig {
        tol: config.dichotomy_tol,
        cap: config.dichotomy_cap,
    };
    let sigma_l = reg.lipschitz.as_ref().map(|t| gamma.unwrap_or(t.sigma));
    let sigma_r = reg.relsmooth.as_ref().map(|t| t.sigma);
    // A transverse term couples every entry of the block, so the norm-to-divergence
    // bound behind the MU constant needs the block-wide maximum.
    let lipschitz_xmax = match &reg.lipschitz {
        Some(t) if t.grouping == Grouping::Transverse => Some(block.max()),
        _ => None,
    };
    let warm_ro: &[Option<f64>] = warm;

    let solve_one = |idx: usize| -> Result<SubResult> {
        let x_t = subproblem_vector(block, side, idx);
        let em = subproblem_vector(&inputs.em, side, idx);
        let gl = inputs.grad_l.as_ref().map(|g| subproblem_vector(g, side, idx));
        let gr = inputs.grad_r.as_ref().map(|g| subproblem_vector(g, side, idx));
        let terms = CoefficientTerms {
            em: &em,
            column_sums: &inputs.column_sums,
            lipschitz: gl.as_deref().zip(sigma_l),
            lipschitz_xmax,
            relsmooth: gr.as_deref().zip(sigma_r),
            concave: reg.concave.as_deref(),
        };
        let wrap = |r: Result<Vec<f64>>| -> Result<SubResult> {
            Ok(SubResult {
                x: r?,
                dual: None,
                dual_seconds: 0.0,
            })
        };
        match config.algorithm {
            Algorithm::Mu => {
                let c = terms.mu(&x_t)?;
                match constraint {
                    None => wrap(mu_update(&x_t, &c, eps)),
                    Some(s) => {
                        let t0 = Instant::now();
                        let (x, d) = mu_update_simplex(&x_t, &c, s.weights(), eps, &dual_cfg, warm_ro[idx])?;
                        Ok(SubResult {
                            x,
                            dual: Some(d),
                            dual_seconds: t0.elapsed().as_secs_f64(),
                        })
                    }
                }
            }
            Algorithm::Qu | Algorithm::Bmd => {
                let mut c = terms.qu(&x_t)?;
                if config.algorithm == Algorithm::Bmd {
                    // Bregman bound on the data term with constant L = Σ_i b_i replaces the
                    // Jensen bound: β gains −em_j + L/xᵗ_j and ζ becomes L + σ_R.
                    let l = inputs.data_mass[idx];
                    for j in 0..c.beta.len() {
                        c.beta[j] += l / x_t[j] - em[j];
                        c.zeta[j] = l + sigma_r.unwrap_or(0.0);
                    }
                }
                match constraint {
                    None => wrap(qu_update(&c, eps)),
                    Some(s) => {
                        let t0 = Instant::now();
                        let (x, d) = qu_update_simplex(&c, s.weights(), eps, &dual_cfg, warm_ro[idx])?;
                        Ok(SubResult {
                            x,
                            dual: Some(d),
                            dual_seconds: t0.elapsed().as_secs_f64(),
                        })
                    }
                }
            }
            Algorithm::Pgd => unreachable!("projected gradient has its own loop"),
        }
    };

    let results: Vec<Result<SubResult>> = if config.parallel {
        (0..count).into_par_iter().map(solve_one).collect()
    } else {
        (0..count).map(solve_one).collect()
    };

    let mut out = block.clone();
    for (idx, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| match e {
            Error::Update { index, reason } | Error::Degenerate { index, reason } => Error::Update {
                index,
                reason: format!("{side:?} subproblem {idx}: {reason}"),
            },
            other => other,
        })?;
        if let Some(d) = r.dual {
            stats.dichotomy_iterations += d.iterations;
            stats.dichotomy_seconds += r.dual_seconds;
            if !d.converged {
                stats.unconverged_duals += 1;
            }
            warm[idx] = Some(d.nu);
        }
        match side {
            Side::H => out.set_column(idx, &r.x),
            Side::W => out.row_mut(idx).copy_from_slice(&r.x),
        }
    }
    Ok(out)
}

/// Whether the γ-scaled Lipschitz bound held at the realized block iterate.
fn lipschitz_bound_held(
    reg: &RegularizerSpec,
    side: Side,
    old: &DenseMatrix,
    new: &DenseMatrix,
    gamma: f64,
    kind: Algorithm,
) -> Result<bool> {
    let Some(term) = &reg.lipschitz else {
        return Ok(true);
    };
    let s_old = term.block_value(old, side);
    let s_new = term.block_value(new, side);
    let g = term.block_gradient(old, side);
    let lin: f64 = g
        .values()
        .iter()
        .zip(new.values().iter().zip(old.values()))
        .map(|(g, (a, b))| g * (a - b))
        .sum();
    let penalty = match kind {
        Algorithm::Mu => {
            let count = match side {
                Side::H => old.cols(),
                Side::W => old.rows(),
            };
            let block_max = (term.grouping == Grouping::Transverse).then(|| old.max());
            let mut p = 0.0;
            for idx in 0..count {
                let xt = subproblem_vector(old, side, idx);
                let x = subproblem_vector(new, side, idx);
                let m = block_max.unwrap_or_else(|| xt.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                p += 2.0 * gamma * m * gkl_divergence(&x, &xt)?;
            }
            p
        }
        _ => {
            gamma
                * new
                    .values()
                    .iter()
                    .zip(old.values())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
        }
    };
    let bound = s_old + lin + penalty;
    Ok(s_new <= bound + 1e-12 * bound.abs().max(1.0))
}

/// Gradient of the full objective with respect to one block.
pub(crate) fn objective_block_gradient(side: Side, w: &DenseMatrix, h: &DenseMatrix, spec: &ProblemSpec) -> Result<DenseMatrix> {
    let ratio = data_ratio(spec.y(), &w.matmul(h)?)?;
    let reg = spec.regularizer(side);
    let (mut g, block) = match side {
        Side::H => {
            // Wᵀ(1 − R): column sums of W minus WᵀR
            let cs = w.column_sums();
            let mut g = w.t_matmul(&ratio)?;
            for (r, c) in cs.iter().enumerate() {
                g.row_mut(r).iter_mut().for_each(|v| *v = c - *v);
            }
            (g, h)
        }
        Side::W => {
            let rs = h.row_sums();
            let mut g = ratio.matmul_t(h)?;
            for i in 0..g.rows() {
                g.row_mut(i).iter_mut().zip(&rs).for_each(|(v, s)| *v = s - *v);
            }
            (g, w)
        }
    };
    if !reg.is_empty() {
        let rg = reg.block_gradient(block, side);
        g.values_mut().iter_mut().zip(rg.values()).for_each(|(a, b)| *a += b);
    }
    Ok(g)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn record(
    iter: usize,
    spec: &ProblemSpec,
    w: &DenseMatrix,
    h: &DenseMatrix,
    objective: f64,
    kl_part: f64,
    gamma: Option<(f64, f64)>,
    seconds: f64,
    dichotomy_iters: usize,
) -> TraceRecord {
    TraceRecord {
        iter,
        objective,
        kl_part,
        constraint_violation: constraint_violation(spec, w, h),
        min_w: w.min(),
        min_h: h.min(),
        gamma,
        seconds,
        dichotomy_iters,
    }
}

pub(crate) fn relative_change(prev: f64, next: f64) -> f64 {
    (prev - next).abs() / prev.abs().max(1e-300)
}

pub(crate) fn tbsum_run(
    spec: &ProblemSpec,
    config: &SolverConfig,
    mut w: DenseMatrix,
    mut h: DenseMatrix,
) -> Result<SolveResult> {
    spec.check_factors(&w, &h)?;
    let start = Instant::now();
    let mut trace = SolverTrace::default();
    let mut warnings = Vec::new();
    let parts = objective_parts(&w, &h, spec)?;
    let mut f_prev = parts.total();
    trace.objectives.push(f_prev);

    let ls = config.linesearch;
    let gamma_of = |side: Side| -> Option<f64> {
        ls.and(spec.regularizer(side).lipschitz.as_ref().map(|t| t.sigma))
    };
    let mut gamma_w = gamma_of(Side::W);
    let mut gamma_h = gamma_of(Side::H);
    let gamma_pair = |gw: Option<f64>, gh: Option<f64>| ls.map(|_| (gw.unwrap_or(f64::NAN), gh.unwrap_or(f64::NAN)));
    trace.records.push(record(0, spec, &w, &h, f_prev, parts.loss, gamma_pair(gamma_w, gamma_h), 0.0, 0));

    let mut warm_w = vec![None; w.rows()];
    let mut warm_h = vec![None; h.cols()];
    let mut termination = Termination::MaxIter {
        iterations: config.max_iter,
    };
    let mut unconverged = 0;

    for it in 1..=config.max_iter {
        let mut stats = BlockStats {
            dichotomy_iterations: 0,
            dichotomy_seconds: 0.0,
            unconverged_duals: 0,
        };
        let t0 = Instant::now();
        let step = (|| -> Result<()> {
            let new_w = update_block(Side::W, &w, &h, spec, config, gamma_w, &mut warm_w, &mut stats)?;
            if let (Some(ls), Some(g)) = (ls, gamma_w) {
                let held = lipschitz_bound_held(spec.reg_w(), Side::W, &w, &new_w, g, config.algorithm)?;
                gamma_w = Some(linesearch_gamma(g, held, ls.upsilon, ls.tau));
            }
            w = new_w;
            let new_h = update_block(Side::H, &w, &h, spec, config, gamma_h, &mut warm_h, &mut stats)?;
            if let (Some(ls), Some(g)) = (ls, gamma_h) {
                let held = lipschitz_bound_held(spec.reg_h(), Side::H, &h, &new_h, g, config.algorithm)?;
                gamma_h = Some(linesearch_gamma(g, held, ls.upsilon, ls.tau));
            }
            h = new_h;
            Ok(())
        })();
        trace.update_seconds += t0.elapsed().as_secs_f64();
        trace.dichotomy_iterations += stats.dichotomy_iterations;
        trace.dichotomy_seconds += stats.dichotomy_seconds;
        unconverged += stats.unconverged_duals;
        if let Err(e) = step {
            termination = Termination::Failed {
                iterations: it - 1,
                reason: e.to_string(),
            };
            break;
        }
        let parts = match objective_parts(&w, &h, spec) {
            Ok(p) => p,
            Err(e) => {
                termination = Termination::Failed {
                    iterations: it,
                    reason: e.to_string(),
                };
                break;
            }
        };
        let f = parts.total();
        trace.objectives.push(f);
        let converged = relative_change(f_prev, f) < config.rel_tol;
        if it % config.trace_every == 0 || it == config.max_iter || converged {
            trace.records.push(record(
                it,
                spec,
                &w,
                &h,
                f,
                parts.loss,
                gamma_pair(gamma_w, gamma_h),
                start.elapsed().as_secs_f64(),
                stats.dichotomy_iterations,
            ));
        }
        f_prev = f;
        if converged {
            termination = Termination::Converged { iterations: it };
            break;
        }
    }
    if unconverged > 0 {
        warnings.push(format!(
            "{unconverged} dual dichotomies hit the iteration cap ({}) before tolerance {:e}",
            config.dichotomy_cap, config.dichotomy_tol
        ));
    }
    if let Termination::Failed { reason, .. } = &termination {
        warnings.push(reason.clone());
    }
    Ok(SolveResult {
        w,
        h,
        trace,
        termination,
        warnings,
    })
}
