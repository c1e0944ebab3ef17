//! Closed-form minimizers of the composite surrogates.
//!
//! The multiplicative rule sets `x_j ← x_j α_j / β_j`; the quadratic rule takes the
//! positive root of `α x_j² + β_j x_j − ζ_j = 0`. Under a generalized simplex
//! constraint `eᵀx = 1` the denominators become `β_j + ν e_j`, entries are clamped at
//! `ε`, and the multiplier `ν` is found by bisection on the monotone dual functions
//! `h₁` (MU) and `h₂` (QU).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ScalarFunction, SubproblemView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuCoefficients {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
}

/// Per-entry ingredients shared by both rules for one subproblem at `xᵗ`.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientTerms<'a> {
    /// `Σ_i b_i a_ij / (A xᵗ)_i`.
    pub em: &'a [f64],
    /// `Σ_i a_ij`.
    pub column_sums: &'a [f64],
    /// `∇s_L(xᵗ)` and its constant (σ_L, or γ under line search).
    pub lipschitz: Option<(&'a [f64], f64)>,
    /// Largest entry of xᵗ over every variable the Lipschitz term couples. `None` means
    /// the term is local to this subproblem and `max xᵗ` is used.
    pub lipschitz_xmax: Option<f64>,
    /// `∇s_R(xᵗ)` and σ_R.
    pub relsmooth: Option<(&'a [f64], f64)>,
    pub concave: Option<&'a dyn ScalarFunction>,
}

impl CoefficientTerms<'_> {
    fn check_degenerate(&self) -> Result<()> {
        if self.lipschitz.is_none() && self.relsmooth.is_none() {
            if let Some(j) = (0..self.em.len()).find(|&j| self.column_sums[j] == 0.0 && self.em[j] == 0.0) {
                if self.concave.is_none() {
                    return Err(Error::Degenerate {
                        index: j,
                        reason: "all-zero column with no regularizer".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn mu(&self, x_t: &[f64]) -> Result<MuCoefficients> {
        self.check_degenerate()?;
        let xmax = self
            .lipschitz_xmax
            .unwrap_or_else(|| x_t.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let mut alpha = self.em.to_vec();
        let mut beta = self.column_sums.to_vec();
        if let Some((g, sigma)) = self.lipschitz {
            let c = 2.0 * xmax * sigma;
            for j in 0..alpha.len() {
                alpha[j] += c;
                beta[j] += g[j] + c;
            }
        }
        if let Some((g, sigma)) = self.relsmooth {
            for j in 0..alpha.len() {
                let c = sigma / x_t[j];
                alpha[j] += c;
                beta[j] += g[j] + c;
            }
        }
        if let Some(s) = self.concave {
            for (b, &x) in beta.iter_mut().zip(x_t) {
                *b += s.derivative(x);
            }
        }
        Ok(MuCoefficients { alpha, beta })
    }

    pub fn qu(&self, x_t: &[f64]) -> Result<QuCoefficients> {
        self.check_degenerate()?;
        let mut beta = self.column_sums.to_vec();
        let mut zeta: Vec<f64> = self.em.iter().zip(x_t).map(|(e, x)| e * x).collect();
        let mut alpha = 0.0;
        if let Some((g, sigma)) = self.lipschitz {
            alpha = 2.0 * sigma;
            for j in 0..beta.len() {
                beta[j] += g[j] - 2.0 * sigma * x_t[j];
            }
        }
        if let Some((g, sigma)) = self.relsmooth {
            for j in 0..beta.len() {
                beta[j] += g[j] + sigma / x_t[j];
                zeta[j] += sigma;
            }
        }
        if let Some(s) = self.concave {
            for (b, &x) in beta.iter_mut().zip(x_t) {
                *b += s.derivative(x);
            }
        }
        Ok(QuCoefficients { alpha, beta, zeta })
    }
}

/// `Σ_i b_i a_ij / (A xᵗ)_i` for every `j`; rows with `b_i = 0` drop out.
pub fn em_numerators(view: &SubproblemView, x_t: &[f64]) -> Result<Vec<f64>> {
    if x_t.len() != view.dim() {
        return Err(Error::Dimension(format!("{} entries for a {}-dimensional view", x_t.len(), view.dim())));
    }
    let ax = view.a.mat_vec(x_t);
    let mut weights = vec![0.0; ax.len()];
    for (i, (&p, &b)) in ax.iter().zip(&view.b).enumerate() {
        if b > 0.0 {
            if !(p > 0.0) {
                return Err(Error::Domain(format!("a_{i}ᵀxᵗ = {p} with b_{i} > 0")));
            }
            weights[i] = b / p;
        }
    }
    Ok(view.a.t_mat_vec(&weights))
}

fn with_terms<T>(view: &SubproblemView, x_t: &[f64], f: impl FnOnce(&CoefficientTerms<'_>) -> Result<T>) -> Result<T> {
    if let Some(j) = x_t.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("xᵗ_{j} = {} is not positive", x_t[j])));
    }
    let em = em_numerators(view, x_t)?;
    let cs = view.a.column_sums();
    let gl = view.lipschitz.as_ref().map(|t| (t.func.gradient_vec(x_t), t.sigma));
    let gr = view.relsmooth.as_ref().map(|t| (t.func.gradient_vec(x_t), t.sigma));
    let terms = CoefficientTerms {
        em: &em,
        column_sums: &cs,
        lipschitz: gl.as_ref().map(|(g, s)| (g.as_slice(), *s)),
        lipschitz_xmax: None,
        relsmooth: gr.as_ref().map(|(g, s)| (g.as_slice(), *s)),
        concave: view.concave.as_deref(),
    };
    f(&terms)
}

pub fn mu_coefficients(view: &SubproblemView, x_t: &[f64]) -> Result<MuCoefficients> {
    with_terms(view, x_t, |t| t.mu(x_t))
}

pub fn qu_coefficients(view: &SubproblemView, x_t: &[f64]) -> Result<QuCoefficients> {
    with_terms(view, x_t, |t| t.qu(x_t))
}

/// `max(x_j α_j / β_j, ε)`.
pub fn mu_update(x_t: &[f64], coeffs: &MuCoefficients, epsilon: f64) -> Result<Vec<f64>> {
    x_t.iter()
        .zip(coeffs.alpha.iter().zip(&coeffs.beta))
        .enumerate()
        .map(|(j, (&x, (&a, &b)))| {
            if !(b > 0.0) {
                return Err(Error::Update {
                    index: j,
                    reason: format!("β = {b} is not positive"),
                });
            }
            Ok((x * a / b).max(epsilon))
        })
        .collect()
}

/// Nonnegative root of `a x² + b x − z = 0` (`a, z ≥ 0`), with the continuous limits for
/// `a = 0` or `z = 0`. Returns `+∞` when the linear case has no finite minimizer.
#[inline]
pub fn quadratic_root(a: f64, b: f64, z: f64) -> f64 {
    if a > 0.0 {
        if z > 0.0 {
            let disc = (b * b + 4.0 * a * z).sqrt();
            if b >= 0.0 {
                2.0 * z / (b + disc)
            } else {
                (disc - b) / (2.0 * a)
            }
        } else {
            (-b / a).max(0.0)
        }
    } else if b > 0.0 {
        z / b
    } else if z == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Positive quadratic root clamped at `ε`.
pub fn qu_update(coeffs: &QuCoefficients, epsilon: f64) -> Result<Vec<f64>> {
    coeffs
        .beta
        .iter()
        .zip(&coeffs.zeta)
        .enumerate()
        .map(|(j, (&b, &z))| {
            if !(z >= 0.0) {
                return Err(Error::Update {
                    index: j,
                    reason: format!("ζ = {z} is negative"),
                });
            }
            if coeffs.alpha == 0.0 && !(b > 0.0) {
                return Err(Error::Update {
                    index: j,
                    reason: format!("α = 0 with β = {b}"),
                });
            }
            Ok(quadratic_root(coeffs.alpha, b, z).max(epsilon))
        })
        .collect()
}

/// MU entry under multiplier `ν`: `max(xα / (β + ν e), ε)`, `+∞` past the pole.
#[inline]
fn mu_entry(num: f64, denom: f64, epsilon: f64) -> f64 {
    if denom > 0.0 {
        (num / denom).max(epsilon)
    } else {
        f64::INFINITY
    }
}

/// `h₁(ν) = Σ_j e_j max(x_jα_j / (β_j + ν e_j), ε) − 1` over entries with `e_j > 0`.
pub fn mu_dual(x_t: &[f64], coeffs: &MuCoefficients, e: &[f64], epsilon: f64, nu: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..e.len() {
        if e[j] > 0.0 {
            s += e[j] * mu_entry(x_t[j] * coeffs.alpha[j], coeffs.beta[j] + nu * e[j], epsilon);
        }
    }
    s - 1.0
}

/// `h₂(ν) = Σ_j e_j max(root(α, β_j + ν e_j, ζ_j), ε) − 1` over entries with `e_j > 0`.
pub fn qu_dual(coeffs: &QuCoefficients, e: &[f64], epsilon: f64, nu: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..e.len() {
        if e[j] > 0.0 {
            s += e[j] * quadratic_root(coeffs.alpha, coeffs.beta[j] + nu * e[j], coeffs.zeta[j]).max(epsilon);
        }
    }
    s - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    /// Absolute tolerance on `|h(ν)|`.
    pub tol: f64,
    pub cap: usize,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self { tol: 1e-12, cap: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSolve {
    pub nu: f64,
    pub iterations: usize,
    pub residual: f64,
    /// `(ν_up, ν_low)` with `h(ν_up) ≥ 0 ≥ h(ν_low)`.
    pub bracket: (f64, f64),
    /// False when the iteration cap was hit before the tolerance.
    pub converged: bool,
}

const MAX_DOUBLINGS: usize = 64;

/// Moves the analytic bounds outward until `h(up) ≥ 0 ≥ h(low)`.
pub fn expand_bracket(h: impl Fn(f64) -> f64, up: f64, low: f64) -> Result<(f64, f64)> {
    let sanitize = |v: f64, other: f64| if v.is_finite() { v } else if other.is_finite() { other } else { 0.0 };
    let mut up = sanitize(up, low);
    let mut low = sanitize(low, up);
    let mut step = up.abs().max(low.abs()).max(1.0);
    let mut k = 0;
    while !(h(up) >= 0.0) {
        if k == MAX_DOUBLINGS {
            return Err(Error::Bracket { doublings: k });
        }
        up -= step;
        step *= 2.0;
        k += 1;
    }
    let mut step = up.abs().max(low.abs()).max(1.0);
    let mut k = 0;
    while !(h(low) <= 0.0) {
        if k == MAX_DOUBLINGS {
            return Err(Error::Bracket { doublings: k });
        }
        low += step;
        step *= 2.0;
        k += 1;
    }
    Ok((up, low))
}

/// Bisection on a nonincreasing `h` over `(ν_up, ν_low)` with `h(ν_up) ≥ 0 ≥ h(ν_low)`.
pub fn dual_dichotomy(h: impl Fn(f64) -> f64, bracket: (f64, f64), cfg: &DualConfig) -> DualSolve {
    let (mut a, mut b) = bracket;
    let ha = h(a);
    let hb = h(b);
    let done = |nu: f64, r: f64, it: usize| DualSolve {
        nu,
        iterations: it,
        residual: r.abs(),
        bracket,
        converged: true,
    };
    if ha.abs() <= cfg.tol {
        return done(a, ha, 0);
    }
    if hb.abs() <= cfg.tol {
        return done(b, hb, 0);
    }
    if a > b {
        // h(b) ≤ 0 ≤ h(a) with b < a forces h ≡ 0 between them for a nonincreasing h
        std::mem::swap(&mut a, &mut b);
    }
    let (mut best, mut best_r) = if ha.abs() < hb.abs() { (a, ha) } else { (b, hb) };
    for it in 1..=cfg.cap {
        let mid = 0.5 * (a + b);
        let hm = h(mid);
        if hm.abs() < best_r.abs() {
            best = mid;
            best_r = hm;
        }
        if hm.abs() <= cfg.tol {
            return done(mid, hm, it);
        }
        if hm > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if mid == a && mid == b || b - a <= f64::EPSILON * mid.abs().max(f64::MIN_POSITIVE) {
            return DualSolve {
                nu: best,
                iterations: it,
                residual: best_r.abs(),
                bracket,
                converged: best_r.abs() <= cfg.tol,
            };
        }
    }
    DualSolve {
        nu: best,
        iterations: cfg.cap,
        residual: best_r.abs(),
        bracket,
        converged: false,
    }
}

/// Narrows a verified bracket around a previous root, when it lies inside.
fn warm_bracket(h: &impl Fn(f64) -> f64, bracket: (f64, f64), warm: Option<f64>) -> (f64, f64) {
    let Some(nu0) = warm.filter(|v| v.is_finite()) else {
        return bracket;
    };
    let (up, low) = bracket;
    if !(nu0 > up.min(low) && nu0 < up.max(low)) {
        return bracket;
    }
    let h0 = h(nu0);
    let mut step = 1e-6 * (1.0 + nu0.abs());
    if h0 >= 0.0 {
        let mut hi = nu0;
        for _ in 0..40 {
            let cand = nu0 + step;
            if cand >= low {
                return (nu0, low);
            }
            if h(cand) <= 0.0 {
                return (hi, cand);
            }
            hi = cand;
            step *= 4.0;
        }
        (hi, low)
    } else {
        let mut lo = nu0;
        for _ in 0..40 {
            let cand = nu0 - step;
            if cand <= up {
                return (up, nu0);
            }
            if h(cand) >= 0.0 {
                return (cand, lo);
            }
            lo = cand;
            step *= 4.0;
        }
        (up, lo)
    }
}

fn active_stats(e: &[f64]) -> (usize, f64) {
    let n = e.iter().filter(|&&v| v > 0.0).count();
    (n, e.iter().sum())
}

/// Analytic bounds for `h₁`: `ν_up = max_j(x_jα_j − β_j/e_j)` with `h₁(ν_up) ≥ 0` and
/// `ν_low = n·max_j x_jα_j − min_j β_j/e_j` with `h₁(ν_low) ≤ 0`, over entries with `e_j > 0`.
pub fn mu_bracket_bounds(x_t: &[f64], coeffs: &MuCoefficients, e: &[f64]) -> (f64, f64) {
    let (n, _) = active_stats(e);
    let mut up = f64::NEG_INFINITY;
    let mut max_num = f64::NEG_INFINITY;
    let mut min_ratio = f64::INFINITY;
    for j in 0..e.len() {
        if e[j] > 0.0 {
            let num = x_t[j] * coeffs.alpha[j];
            up = up.max(num - coeffs.beta[j] / e[j]);
            max_num = max_num.max(num);
            min_ratio = min_ratio.min(coeffs.beta[j] / e[j]);
        }
    }
    (up, n as f64 * max_num - min_ratio)
}

/// [`mu_bracket_bounds`], widened until the signs are verified.
pub fn mu_bracket(x_t: &[f64], coeffs: &MuCoefficients, e: &[f64], epsilon: f64) -> Result<(f64, f64)> {
    let (up, low) = mu_bracket_bounds(x_t, coeffs, e);
    expand_bracket(|nu| mu_dual(x_t, coeffs, e, epsilon, nu), up, low)
}

/// Analytic bounds for `h₂`: `ν_up = −(2α + Σ e_jβ_j)/Σ e_j²` and
/// `ν_low = max_j(m ζ_j − α/(m e_j²) − β_j/e_j)`. With `α = 0` the root is
/// `ζ_j/(β_j + ν e_j)`, so the MU bounds apply with numerator `ζ_j`.
pub fn qu_bracket_bounds(coeffs: &QuCoefficients, e: &[f64]) -> (f64, f64) {
    let a = coeffs.alpha;
    let (m, _) = active_stats(e);
    let m = m as f64;
    if a > 0.0 {
        let mut eb = 0.0;
        let mut ee = 0.0;
        let mut low = f64::NEG_INFINITY;
        for j in 0..e.len() {
            if e[j] > 0.0 {
                eb += e[j] * coeffs.beta[j];
                ee += e[j] * e[j];
                low = low.max(m * coeffs.zeta[j] - a / (m * e[j] * e[j]) - coeffs.beta[j] / e[j]);
            }
        }
        (-(2.0 * a + eb) / ee, low)
    } else {
        let mut up = f64::NEG_INFINITY;
        let mut max_num = f64::NEG_INFINITY;
        let mut min_ratio = f64::INFINITY;
        for j in 0..e.len() {
            if e[j] > 0.0 {
                up = up.max(coeffs.zeta[j] - coeffs.beta[j] / e[j]);
                max_num = max_num.max(coeffs.zeta[j]);
                min_ratio = min_ratio.min(coeffs.beta[j] / e[j]);
            }
        }
        (up, m * max_num - min_ratio)
    }
}

/// [`qu_bracket_bounds`], widened until the signs are verified.
pub fn qu_bracket(coeffs: &QuCoefficients, e: &[f64], epsilon: f64) -> Result<(f64, f64)> {
    let (up, low) = qu_bracket_bounds(coeffs, e);
    expand_bracket(|nu| qu_dual(coeffs, e, epsilon, nu), up, low)
}

fn check_simplex_dims(x_len: usize, e: &[f64], coeff_len: usize) -> Result<()> {
    if e.len() != x_len || coeff_len != x_len {
        return Err(Error::Dimension(format!(
            "{} weights, {} coefficients for {} entries",
            e.len(),
            coeff_len,
            x_len
        )));
    }
    Ok(())
}

/// When `ε‖e‖₁ = 1` the only feasible point puts every weighted entry at `ε`.
fn saturated(e: &[f64], epsilon: f64) -> bool {
    1.0 - epsilon * e.iter().filter(|&&v| v > 0.0).sum::<f64>() <= 1e-15
}

/// Constrained MU step: `x_j = max(x_jα_j/(β_j + ν e_j), ε)` with `eᵀx = 1`.
///
/// Entries with `e_j = 0` take the unconstrained update.
pub fn mu_update_simplex(
    x_t: &[f64],
    coeffs: &MuCoefficients,
    e: &[f64],
    epsilon: f64,
    cfg: &DualConfig,
    warm: Option<f64>,
) -> Result<(Vec<f64>, DualSolve)> {
    check_simplex_dims(x_t.len(), e, coeffs.alpha.len())?;
    let mut x = vec![0.0; x_t.len()];
    for j in 0..e.len() {
        if e[j] == 0.0 {
            if !(coeffs.beta[j] > 0.0) {
                return Err(Error::Update {
                    index: j,
                    reason: format!("β = {} is not positive", coeffs.beta[j]),
                });
            }
            x[j] = (x_t[j] * coeffs.alpha[j] / coeffs.beta[j]).max(epsilon);
        }
    }
    let h = |nu: f64| mu_dual(x_t, coeffs, e, epsilon, nu);
    let solve = if saturated(e, epsilon) {
        let nu = (0..e.len())
            .filter(|&j| e[j] > 0.0)
            .map(|j| (x_t[j] * coeffs.alpha[j] / epsilon - coeffs.beta[j]) / e[j])
            .fold(f64::NEG_INFINITY, f64::max);
        DualSolve {
            nu,
            iterations: 0,
            residual: h(nu).abs(),
            bracket: (nu, nu),
            converged: true,
        }
    } else {
        let bracket = mu_bracket(x_t, coeffs, e, epsilon)?;
        dual_dichotomy(h, warm_bracket(&h, bracket, warm), cfg)
    };
    for j in 0..e.len() {
        if e[j] > 0.0 {
            x[j] = mu_entry(x_t[j] * coeffs.alpha[j], coeffs.beta[j] + solve.nu * e[j], epsilon);
        }
    }
    Ok((x, solve))
}

/// Constrained QU step: the clamped positive root with `β_j + ν e_j`, `eᵀx = 1`.
pub fn qu_update_simplex(
    coeffs: &QuCoefficients,
    e: &[f64],
    epsilon: f64,
    cfg: &DualConfig,
    warm: Option<f64>,
) -> Result<(Vec<f64>, DualSolve)> {
    let len = coeffs.beta.len();
    check_simplex_dims(len, e, coeffs.zeta.len())?;
    let mut x = vec![0.0; len];
    for j in 0..len {
        if e[j] == 0.0 {
            if coeffs.alpha == 0.0 && !(coeffs.beta[j] > 0.0) {
                return Err(Error::Update {
                    index: j,
                    reason: format!("α = 0 with β = {}", coeffs.beta[j]),
                });
            }
            x[j] = quadratic_root(coeffs.alpha, coeffs.beta[j], coeffs.zeta[j]).max(epsilon);
        }
    }
    let h = |nu: f64| qu_dual(coeffs, e, epsilon, nu);
    let solve = if saturated(e, epsilon) {
        // smallest ν putting every weighted root at or below ε
        let a = coeffs.alpha;
        let nu = (0..len)
            .filter(|&j| e[j] > 0.0)
            .map(|j| (coeffs.zeta[j] / epsilon - a * epsilon - coeffs.beta[j]) / e[j])
            .fold(f64::NEG_INFINITY, f64::max);
        DualSolve {
            nu,
            iterations: 0,
            residual: h(nu).abs(),
            bracket: (nu, nu),
            converged: true,
        }
    } else {
        let bracket = qu_bracket(coeffs, e, epsilon)?;
        dual_dichotomy(h, warm_bracket(&h, bracket, warm), cfg)
    };
    for j in 0..len {
        if e[j] > 0.0 {
            x[j] = quadratic_root(coeffs.alpha, coeffs.beta[j] + solve.nu * e[j], coeffs.zeta[j]).max(epsilon);
        }
    }
    Ok((x, solve))
}
