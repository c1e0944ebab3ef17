//! First-order majorizers of the subproblem objective and a numerical certifier for them.
//!
//! Each term of a [`SubproblemView`] gets its own bound:
//!
//! * `−log(aᵀx)` via Jensen with EM weights `q_j ∝ a_j x_jᵗ`,
//! * the gradient-Lipschitz part via a quadratic (`σ_L‖x − xᵗ‖²`) or a generalized-KL
//!   (`2σ_L max_j x_jᵗ · D_GKL(x‖xᵗ)`) penalty,
//! * the relatively smooth part via the Bregman divergence of `κ(x) = −Σ log x`,
//! * the concave part via its tangent line.
//!
//! Summing them gives the two composite surrogates minimized by the MU and QU rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{ScalarFunction, SubproblemView, VectorFunction};

pub const A1_TOLERANCE: f64 = 1e-9;
pub const A2_TOLERANCE: f64 = 1e-10;
pub const A3_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    /// Log-penalized Lipschitz bound; minimized by the multiplicative update.
    MuLog,
    /// Quadratic Lipschitz bound; minimized by the quadratic update.
    QuQuadratic,
}

/// EM weights `q_j = a_j x_jᵗ / Σ_k a_k x_kᵗ`.
pub fn em_weights(a: &[f64], x_t: &[f64]) -> Result<Vec<f64>> {
    if a.len() != x_t.len() {
        return Err(Error::Dimension(format!("{} weights vs {} entries", a.len(), x_t.len())));
    }
    let prod: Vec<f64> = a.iter().zip(x_t).map(|(a, x)| a * x).collect();
    if let Some(j) = prod.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Domain(format!("a_{j} x_{j} = {} is not positive", prod[j])));
    }
    let total: f64 = prod.iter().sum();
    Ok(prod.into_iter().map(|p| p / total).collect())
}

/// `D_GKL(x‖xᵗ) = Σ_j xᵗ_j log(xᵗ_j / x_j) − xᵗ_j + x_j`.
pub fn gkl_divergence(x: &[f64], x_t: &[f64]) -> Result<f64> {
    if x.len() != x_t.len() {
        return Err(Error::Dimension(format!("{} vs {} entries", x.len(), x_t.len())));
    }
    let mut d = 0.0;
    for (j, (&xj, &tj)) in x.iter().zip(x_t).enumerate() {
        if !(xj > 0.0) || !(tj > 0.0) {
            return Err(Error::Domain(format!("entry {j} is not positive")));
        }
        d += tj * (tj / xj).ln() - tj + xj;
    }
    Ok(d)
}

/// `B_κ(x, xᵗ) = Σ_j x_j/xᵗ_j − log(x_j/xᵗ_j) − 1` for `κ(x) = −Σ log x`.
pub fn burg_divergence(x: &[f64], x_t: &[f64]) -> f64 {
    x.iter()
        .zip(x_t)
        .map(|(&x, &t)| {
            let r = x / t;
            r - r.ln() - 1.0
        })
        .sum()
}

/// Jensen bound on `−log(aᵀx)` at `xᵗ`: `−Σ_j q_j log(a_j x_j / q_j)`.
pub fn em_log_bound(a: &[f64], x: &[f64], x_t: &[f64]) -> Result<f64> {
    let q = em_weights(a, x_t)?;
    Ok(-q
        .iter()
        .zip(a)
        .zip(x)
        .map(|((&q, &a), &x)| q * (a * x / q).ln())
        .sum::<f64>())
}

/// Bound on a σ-gradient-Lipschitz function at `xᵗ`.
pub fn lipschitz_bound(
    kind: SurrogateKind,
    func: &dyn VectorFunction,
    sigma: f64,
    x: &[f64],
    x_t: &[f64],
) -> Result<f64> {
    let g = func.gradient_vec(x_t);
    let lin = func.value(x_t)
        + g.iter()
            .zip(x)
            .zip(x_t)
            .map(|((g, x), t)| g * (x - t))
            .sum::<f64>();
    let penalty = match kind {
        SurrogateKind::QuQuadratic => {
            sigma * x.iter().zip(x_t).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        }
        SurrogateKind::MuLog => {
            let xmax = x_t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            2.0 * sigma * xmax * gkl_divergence(x, x_t)?
        }
    };
    Ok(lin + penalty)
}

/// Bregman bound on a function σ-relatively smooth w.r.t. `−Σ log x`.
pub fn relsmooth_bound(func: &dyn VectorFunction, sigma: f64, x: &[f64], x_t: &[f64]) -> f64 {
    let g = func.gradient_vec(x_t);
    func.value(x_t)
        + g.iter()
            .zip(x)
            .zip(x_t)
            .map(|((g, x), t)| g * (x - t))
            .sum::<f64>()
        + sigma * burg_divergence(x, x_t)
}

/// Tangent-line bound on a concave scalar function, summed over entries.
pub fn concave_bound(func: &dyn ScalarFunction, x: &[f64], x_t: &[f64]) -> f64 {
    x.iter()
        .zip(x_t)
        .map(|(&x, &t)| func.value(t) + func.derivative(t) * (x - t))
        .sum()
}

/// The data-fit part of the composite surrogate:
/// `Σ_i [−b_i Σ_j q_ij log(a_ij x_j / q_ij) + a_iᵀx]`.
pub fn loss_surrogate(view: &SubproblemView, x: &[f64], x_t: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, &b) in view.b.iter().enumerate() {
        let row = view.a.row(i);
        total += dot(row, x);
        if b == 0.0 {
            continue;
        }
        let s = dot(row, x_t);
        if !(s > 0.0) {
            return Err(Error::Domain(format!("a_{i}ᵀxᵗ = {s} with b_{i} > 0")));
        }
        let mut acc = 0.0;
        for ((&a, &xj), &tj) in row.iter().zip(x).zip(x_t) {
            if a == 0.0 {
                continue;
            }
            let q = a * tj / s;
            acc += q * (a * xj / q).ln();
        }
        total -= b * acc;
    }
    Ok(total)
}

/// Bregman bound on the data-fit part with constant `L = Σ_i b_i`.
pub fn loss_bregman_bound(view: &SubproblemView, x: &[f64], x_t: &[f64]) -> Result<f64> {
    let l: f64 = view.b.iter().sum();
    let f_t = view.loss(x_t)?;
    let ax = view.a.mat_vec(x_t);
    let ratio: Vec<f64> = ax
        .iter()
        .zip(&view.b)
        .map(|(&p, &c)| if c > 0.0 { 1.0 - c / p } else { 1.0 })
        .collect();
    let g = view.a.t_mat_vec(&ratio);
    let lin: f64 = g.iter().zip(x).zip(x_t).map(|((g, x), t)| g * (x - t)).sum();
    Ok(f_t + lin + l * burg_divergence(x, x_t))
}

/// Composite surrogate `g(x, xᵗ)` of a subproblem.
pub fn surrogate_value(kind: SurrogateKind, x: &[f64], x_t: &[f64], view: &SubproblemView) -> Result<f64> {
    check_positive(x, "x")?;
    check_positive(x_t, "xᵗ")?;
    if x.len() != view.dim() || x_t.len() != view.dim() {
        return Err(Error::Dimension(format!(
            "vectors of length {}/{} for a {}-dimensional view",
            x.len(),
            x_t.len(),
            view.dim()
        )));
    }
    let mut g = loss_surrogate(view, x, x_t)?;
    if let Some(t) = &view.lipschitz {
        g += lipschitz_bound(kind, t.func.as_ref(), t.sigma, x, x_t)?;
    }
    if let Some(t) = &view.relsmooth {
        g += relsmooth_bound(t.func.as_ref(), t.sigma, x, x_t);
    }
    if let Some(c) = &view.concave {
        g += concave_bound(c.as_ref(), x, x_t);
    }
    Ok(g)
}

fn check_positive(x: &[f64], name: &str) -> Result<()> {
    if let Some(j) = x.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("{name}_{j} = {} is not positive", x[j])));
    }
    Ok(())
}

/// Uniform sampler on the box `[lower, upper]^d` with a per-sample derived stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoxSampler {
    pub lower: f64,
    pub upper: f64,
    pub seed: u64,
}

impl Default for BoxSampler {
    fn default() -> Self {
        Self {
            lower: crate::model::DEFAULT_EPSILON,
            upper: 10.0,
            seed: 0x5eed,
        }
    }
}

impl BoxSampler {
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn point(&self, rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(self.lower..=self.upper)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorizationReport {
    pub samples: usize,
    /// Worst `(f(x) − g(x, xᵗ)) / max(|f(x)|, 1)`; positive values are violations.
    pub max_violation_a1: f64,
    /// Worst `|g(xᵗ, xᵗ) − f(xᵗ)| / max(|f(xᵗ)|, 1)`.
    pub max_gap_a2: f64,
    /// Worst finite-difference gradient mismatch at `xᵗ`, relative to `max(‖∇f‖∞, 1)`.
    pub max_grad_mismatch_a3: f64,
    /// Number of samples with a strictly positive A.1 violation beyond tolerance.
    pub a1_failures: usize,
}

impl MajorizationReport {
    pub fn passes(&self) -> bool {
        self.max_violation_a1 <= A1_TOLERANCE
            && self.max_gap_a2 <= A2_TOLERANCE
            && self.max_grad_mismatch_a3 <= A3_TOLERANCE
    }

    fn merge(self, other: Self) -> Self {
        Self {
            samples: self.samples + other.samples,
            max_violation_a1: self.max_violation_a1.max(other.max_violation_a1),
            max_gap_a2: self.max_gap_a2.max(other.max_gap_a2),
            max_grad_mismatch_a3: self.max_grad_mismatch_a3.max(other.max_grad_mismatch_a3),
            a1_failures: self.a1_failures + other.a1_failures,
        }
    }

    fn empty() -> Self {
        Self {
            samples: 0,
            max_violation_a1: f64::NEG_INFINITY,
            max_gap_a2: 0.0,
            max_grad_mismatch_a3: 0.0,
            a1_failures: 0,
        }
    }
}

fn central_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = 1e-6 * x[j];
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Samples `n_samples` pairs `(x, xᵗ)` from `sampler` and measures how well
/// `g(·, xᵗ)` majorizes `f`.
///
/// Evaluation errors (points outside a term's domain) count as A.1 violations of `+∞`.
pub fn certify_pair<F, G>(f: F, g: G, dim: usize, sampler: &BoxSampler, n_samples: usize) -> MajorizationReport
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
    G: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = sampler.rng(s as u64);
            let x_t = sampler.point(&mut rng, dim);
            let x = sampler.point(&mut rng, dim);
            let mut r = MajorizationReport::empty();
            r.samples = 1;
            let (fx, gx) = match (f(&x), g(&x, &x_t)) {
                (Ok(fx), Ok(gx)) => (fx, gx),
                _ => {
                    r.max_violation_a1 = f64::INFINITY;
                    r.a1_failures = 1;
                    return r;
                }
            };
            r.max_violation_a1 = (fx - gx) / fx.abs().max(1.0);
            if r.max_violation_a1 > A1_TOLERANCE {
                r.a1_failures = 1;
            }
            match (f(&x_t), g(&x_t, &x_t)) {
                (Ok(ft), Ok(gt)) => r.max_gap_a2 = (gt - ft).abs() / ft.abs().max(1.0),
                _ => r.max_gap_a2 = f64::INFINITY,
            }
            let f_only = |p: &[f64]| f(p).unwrap_or(f64::NAN);
            let g_only = |p: &[f64]| g(p, &x_t).unwrap_or(f64::NAN);
            let df = central_gradient(&f_only, &x_t);
            let dg = central_gradient(&g_only, &x_t);
            let scale = df.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            r.max_grad_mismatch_a3 = df
                .iter()
                .zip(&dg)
                .map(|(a, b)| (a - b).abs() / scale)
                .fold(0.0, |m: f64, v| if v.is_nan() { f64::INFINITY } else { m.max(v) });
            r
        })
        .reduce(MajorizationReport::empty, MajorizationReport::merge)
}

/// Certifies the composite surrogate of `kind` against the view objective.
pub fn certify_majorization(
    kind: SurrogateKind,
    view: &SubproblemView,
    sampler: &BoxSampler,
    n_samples: usize,
) -> MajorizationReport {
    certify_pair(
        |x| view.objective(x),
        |x, x_t| surrogate_value(kind, x, x_t, view),
        view.dim(),
        sampler,
        n_samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{laplacian_2d, DenseMatrix};
    use crate::model::{LogBarrier, LogSparsity, QuadraticForm};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    #[test]
    fn em_weight_examples() {
        assert_eq!(em_weights(&[0.2, 0.8], &[1.0, 1.0]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(em_weights(&[1.0, 1.0], &[3.0, 1.0]).unwrap(), vec![0.75, 0.25]);
        let q = em_weights(&[0.3, 1.7, 2.2], &[0.1, 4.0, 0.5]).unwrap();
        assert_relative_eq!(q.iter().sum::<f64>(), 1.0, max_relative = 1e-15);
        assert!(matches!(em_weights(&[0.0, 1.0], &[1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn gkl_examples() {
        assert_eq!(gkl_divergence(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(gkl_divergence(&[2.0], &[1.0]).unwrap(), 0.306_852_819_440_054_7, max_relative = 1e-14);
        assert_relative_eq!(gkl_divergence(&[0.5], &[1.0]).unwrap(), 0.193_147_180_559_945_3, max_relative = 1e-14);
        assert!(gkl_divergence(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn em_bound_touches_at_anchor() {
        let a = [0.2, 0.8];
        let x_t = [1.3, 0.4];
        let f = -(0.2 * 1.3 + 0.8 * 0.4f64).ln();
        assert_relative_eq!(em_log_bound(&a, &x_t, &x_t).unwrap(), f, max_relative = 1e-14);
    }

    fn random_view(seed: u64, dim: usize) -> SubproblemView {
        let sampler = BoxSampler { lower: 0.05, upper: 1.0, seed };
        let mut rng = sampler.rng(9999);
        let a = DenseMatrix::from_fn(4, dim, |_, _| rng.random_range(0.05..1.0));
        let b = (0..4).map(|_| rng.random_range(0.0..5.0)).collect();
        SubproblemView::new(a, b).unwrap()
    }

    #[test]
    fn kinds_agree_without_regularizers() {
        let view = random_view(1, 3);
        let x = [0.3, 2.0, 5.0];
        let x_t = [1.0, 0.5, 4.0];
        assert_eq!(
            surrogate_value(SurrogateKind::MuLog, &x, &x_t, &view).unwrap(),
            surrogate_value(SurrogateKind::QuQuadratic, &x, &x_t, &view).unwrap()
        );
    }

    #[test]
    fn surrogate_equals_objective_at_anchor() {
        let op = crate::linalg::SparseSymmetricOperator::from_triplets(
            3,
            &[(0, 0, 1.0), (1, 1, 2.0), (2, 2, 1.0), (0, 1, -1.0), (1, 2, -1.0)],
        )
        .unwrap();
        let view = random_view(2, 3)
            .with_lipschitz(Arc::new(QuadraticForm { weight: 1.0, operator: op }), 3.0)
            .with_relsmooth(Arc::new(LogBarrier { offset: 0.0 }), 1.0)
            .with_concave(Arc::new(LogSparsity { alpha: 3.0 }));
        for kind in [SurrogateKind::MuLog, SurrogateKind::QuQuadratic] {
            let x_t = [0.7, 1.9, 0.2];
            let f = view.objective(&x_t).unwrap();
            let g = surrogate_value(kind, &x_t, &x_t, &view).unwrap();
            assert!((f - g).abs() <= 1e-12 * f.abs().max(1.0));
        }
    }

    #[test]
    fn loss_surrogate_is_additive_over_rows() {
        let view = random_view(3, 3);
        let x = [0.4, 1.2, 3.0];
        let x_t = [1.0, 1.0, 2.0];
        let whole = loss_surrogate(&view, &x, &x_t).unwrap();
        let mut parts = 0.0;
        for i in 0..view.b.len() {
            let a = view.a.row(i).to_vec();
            parts += view.b[i] * em_log_bound(&a, &x, &x_t).unwrap() + dot(&a, &x);
        }
        assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
    }

    #[test]
    fn quadratic_lipschitz_bound_is_tighter_than_log_bound_near_anchor() {
        // Holds whenever every x_j ≤ max_j xᵗ_j, which is where the log bound is valid.
        let op = laplacian_2d(2).unwrap();
        let func = QuadraticForm { weight: 1.0, operator: op };
        let sampler = BoxSampler { lower: 0.01, upper: 3.0, seed: 4 };
        for s in 0..500 {
            let mut rng = sampler.rng(s);
            let x_t = sampler.point(&mut rng, 4);
            let xmax = x_t.iter().copied().fold(0.0, f64::max);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..=xmax)).collect();
            let qu = lipschitz_bound(SurrogateKind::QuQuadratic, &func, 4.0, &x, &x_t).unwrap();
            let mu = lipschitz_bound(SurrogateKind::MuLog, &func, 4.0, &x, &x_t).unwrap();
            assert!(qu <= mu + 1e-12 * mu.abs().max(1.0));
        }
    }

    #[test]
    fn concave_tangent_dominates_log_sparsity() {
        let f = LogSparsity { alpha: 0.7 };
        let sampler = BoxSampler::default();
        for s in 0..1000 {
            let mut rng = sampler.rng(s);
            let t = rng.random_range(1e-8..10.0);
            let t0 = rng.random_range(1e-8..10.0);
            let bound = f.value(t0) + f.derivative(t0) * (t - t0);
            assert!(f.value(t) <= bound + 1e-14);
        }
    }

    #[test]
    fn bregman_dominates_log_barrier_with_declared_sigma() {
        let floor = 1e-3;
        let offset = 5e-4;
        let sigma = crate::model::log_barrier_sigma(offset, floor).unwrap();
        let func = LogBarrier { offset };
        let sampler = BoxSampler { lower: floor, upper: 10.0, seed: 7 };
        let report = certify_pair(
            |x| Ok(func.value(x)),
            |x, t| Ok(relsmooth_bound(&func, sigma, x, t)),
            3,
            &sampler,
            1000,
        );
        assert!(report.passes(), "{report:?}");
    }

    #[test]
    fn em_bound_is_tighter_than_bregman_bound_pointwise() {
        let view = SubproblemView::new(DenseMatrix::from_rows(&[vec![0.2, 0.8]]).unwrap(), vec![1.0]).unwrap();
        let x_t = [1.0, 1.0];
        for i in 1..=50 {
            for j in 1..=50 {
                let x = [i as f64 * 0.1, j as f64 * 0.1];
                let f = view.loss(&x).unwrap();
                let em = loss_surrogate(&view, &x, &x_t).unwrap() - f;
                let br = loss_bregman_bound(&view, &x, &x_t).unwrap() - f;
                assert!(em >= -1e-12 && em <= br + 1e-12, "x={x:?} em={em} br={br}");
            }
        }
    }

    #[test]
    fn certification_of_composite_qu_surrogate_passes() {
        let op = laplacian_2d(2).unwrap();
        let lmax = crate::linalg::lambda_max(&op, 1e-9, 1000).unwrap().value;
        let view = random_view(11, 4)
            .with_lipschitz(Arc::new(QuadraticForm { weight: 0.3, operator: op }), 0.3 * lmax)
            .with_concave(Arc::new(LogSparsity { alpha: 2.0 }));
        let report = certify_majorization(SurrogateKind::QuQuadratic, &view, &BoxSampler::default(), 1000);
        assert_eq!(report.samples, 1000);
        assert!(report.passes(), "{report:?}");
    }

    #[test]
    fn certification_is_deterministic() {
        let view = random_view(12, 3);
        let s = BoxSampler::default();
        let r1 = certify_majorization(SurrogateKind::MuLog, &view, &s, 200);
        let r2 = certify_majorization(SurrogateKind::MuLog, &view, &s, 200);
        assert_eq!(r1, r2);
    }
}
