//! Problem definition for regularized Poisson NMF.
//!
//! The objective is
//!
//! ```text
//! −⟨Y, log WH⟩ + ⟨1, WH⟩ + R_W(W) + R_H(H),   W ≥ ε, H ≥ ε, optional eᵀx = 1
//! ```
//!
//! where each regularizer is split into a gradient-Lipschitz part, a part that is
//! relatively smooth with respect to `κ(x) = −Σ log x`, and a concave scalar part
//! applied entrywise.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lambda_max, DenseMatrix, SparseSymmetricOperator, LAMBDA_MAX_ITER, LAMBDA_MAX_TOL};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// A differentiable function of one vector.
pub trait VectorFunction: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    fn gradient_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient(x, &mut g);
        g
    }
}

/// A differentiable scalar function, applied entrywise.
pub trait ScalarFunction: Send + Sync + fmt::Debug {
    fn value(&self, t: f64) -> f64;
    fn derivative(&self, t: f64) -> f64;
}

/// Which vectors of a factor block a smooth term acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    /// The subproblem vectors themselves: rows of W, columns of H.
    Subproblem,
    /// The other axis: columns of W, rows of H (e.g. rows of H seen as images).
    Transverse,
}

/// The two factor blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    W,
    H,
}

impl Side {
    /// True when the term's vectors are rows of the stored block matrix.
    fn groups_are_rows(self, grouping: Grouping) -> bool {
        matches!(
            (self, grouping),
            (Side::W, Grouping::Subproblem) | (Side::H, Grouping::Transverse)
        )
    }
}

#[derive(Debug, Clone)]
pub struct SmoothTerm {
    pub func: Arc<dyn VectorFunction>,
    /// Lipschitz constant of the gradient, or relative-smoothness constant.
    pub sigma: f64,
    pub grouping: Grouping,
}

impl SmoothTerm {
    pub fn block_value(&self, block: &DenseMatrix, side: Side) -> f64 {
        if side.groups_are_rows(self.grouping) {
            (0..block.rows()).map(|i| self.func.value(block.row(i))).sum()
        } else {
            (0..block.cols())
                .map(|j| self.func.value(&block.column(j)))
                .sum()
        }
    }

    pub fn block_gradient(&self, block: &DenseMatrix, side: Side) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(block.rows(), block.cols());
        if side.groups_are_rows(self.grouping) {
            for i in 0..block.rows() {
                self.func.gradient(block.row(i), out.row_mut(i));
            }
        } else {
            let mut g = vec![0.0; block.rows()];
            for j in 0..block.cols() {
                self.func.gradient(&block.column(j), &mut g);
                out.set_column(j, &g);
            }
        }
        out
    }
}

/// Composite regularizer `s_L + s_R + Σ s_C` for one factor block.
#[derive(Debug, Clone, Default)]
pub struct RegularizerSpec {
    pub lipschitz: Option<SmoothTerm>,
    pub relsmooth: Option<SmoothTerm>,
    pub concave: Option<Arc<dyn ScalarFunction>>,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.lipschitz.is_none() && self.relsmooth.is_none() && self.concave.is_none()
    }

    /// `(λ/2) xᵀΔx` on every image vector (rows of H), with `σ_L = λ·λ_max(Δ)`.
    pub fn laplacian_smoothness(weight: f64, laplacian: SparseSymmetricOperator) -> Result<Self> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::InvalidSpec(format!("laplacian weight must be ≥ 0, got {weight}")));
        }
        let lmax = lambda_max(&laplacian, LAMBDA_MAX_TOL, LAMBDA_MAX_ITER)?;
        let sigma = weight * lmax.value;
        Ok(Self {
            lipschitz: Some(SmoothTerm {
                func: Arc::new(QuadraticForm {
                    weight,
                    operator: laplacian,
                }),
                sigma,
                grouping: Grouping::Transverse,
            }),
            ..Self::default()
        })
    }

    /// `−Σ log(x − offset)` per subproblem vector, with a caller-supplied relative-smoothness
    /// constant (see [`log_barrier_sigma`]).
    pub fn log_barrier(offset: f64, sigma_r: f64) -> Result<Self> {
        if !(sigma_r >= 0.0) || !sigma_r.is_finite() {
            return Err(Error::InvalidSpec(format!("σ_R must be ≥ 0, got {sigma_r}")));
        }
        if !offset.is_finite() || offset < 0.0 {
            return Err(Error::InvalidSpec(format!("barrier offset must be ≥ 0, got {offset}")));
        }
        Ok(Self {
            relsmooth: Some(SmoothTerm {
                func: Arc::new(LogBarrier { offset }),
                sigma: sigma_r,
                grouping: Grouping::Subproblem,
            }),
            ..Self::default()
        })
    }

    /// `Σ log(t + 1/α)` entrywise.
    pub fn log_sparsity(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidSpec(format!("sparsity α must be > 0, got {alpha}")));
        }
        Ok(Self {
            concave: Some(Arc::new(LogSparsity { alpha })),
            ..Self::default()
        })
    }

    /// Combines two regularizers that occupy disjoint parts.
    pub fn merge(self, other: RegularizerSpec) -> Result<Self> {
        fn pick<T>(a: Option<T>, b: Option<T>, what: &str) -> Result<Option<T>> {
            match (a, b) {
                (Some(_), Some(_)) => Err(Error::InvalidSpec(format!("two {what} parts given"))),
                (a, b) => Ok(a.or(b)),
            }
        }
        Ok(Self {
            lipschitz: pick(self.lipschitz, other.lipschitz, "gradient-Lipschitz")?,
            relsmooth: pick(self.relsmooth, other.relsmooth, "relatively smooth")?,
            concave: pick(self.concave, other.concave, "concave")?,
        })
    }

    pub fn block_value(&self, block: &DenseMatrix, side: Side) -> f64 {
        let mut v = 0.0;
        if let Some(t) = &self.lipschitz {
            v += t.block_value(block, side);
        }
        if let Some(t) = &self.relsmooth {
            v += t.block_value(block, side);
        }
        if let Some(c) = &self.concave {
            v += block.values().iter().map(|&x| c.value(x)).sum::<f64>();
        }
        v
    }

    /// Gradient of the whole regularizer on a block.
    pub fn block_gradient(&self, block: &DenseMatrix, side: Side) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(block.rows(), block.cols());
        for t in [&self.lipschitz, &self.relsmooth].into_iter().flatten() {
            let tg = t.block_gradient(block, side);
            g.values_mut()
                .iter_mut()
                .zip(tg.values())
                .for_each(|(a, b)| *a += b);
        }
        if let Some(c) = &self.concave {
            g.values_mut()
                .iter_mut()
                .zip(block.values())
                .for_each(|(a, &x)| *a += c.derivative(x));
        }
        g
    }

    fn validate(&self) -> Result<()> {
        for t in [&self.lipschitz, &self.relsmooth].into_iter().flatten() {
            if !(t.sigma >= 0.0) || !t.sigma.is_finite() {
                return Err(Error::InvalidSpec(format!("smoothness constant {} is invalid", t.sigma)));
            }
        }
        Ok(())
    }
}

/// Smallest σ_R making `−Σ log(x − offset)` relatively smooth w.r.t. `−Σ log x` on `x ≥ floor`.
pub fn log_barrier_sigma(offset: f64, floor: f64) -> Result<f64> {
    if !(floor > offset) {
        return Err(Error::Domain(format!(
            "barrier offset {offset} must lie below the domain floor {floor}"
        )));
    }
    Ok((floor / (floor - offset)).powi(2))
}

/// `(weight/2) xᵀ Op x`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub weight: f64,
    pub operator: SparseSymmetricOperator,
}

impl VectorFunction for QuadraticForm {
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * self.weight * self.operator.quadratic_form(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.operator.apply_into(x, out);
        out.iter_mut().for_each(|g| *g *= self.weight);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogBarrier {
    pub offset: f64,
}

impl VectorFunction for LogBarrier {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .map(|&v| {
                let d = v - self.offset;
                if d > 0.0 {
                    -d.ln()
                } else {
                    f64::INFINITY
                }
            })
            .sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (g, &v) in out.iter_mut().zip(x) {
            *g = -1.0 / (v - self.offset);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogSparsity {
    pub alpha: f64,
}

impl ScalarFunction for LogSparsity {
    fn value(&self, t: f64) -> f64 {
        (t + 1.0 / self.alpha).ln()
    }

    fn derivative(&self, t: f64) -> f64 {
        1.0 / (t + 1.0 / self.alpha)
    }
}

/// Which factor carries the generalized simplex constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintSide {
    /// `eᵀ h_i = 1` for every column of H.
    HColumns,
    /// `w_j e = 1` for every row of W.
    WRows,
}

impl ConstraintSide {
    pub fn side(self) -> Side {
        match self {
            ConstraintSide::HColumns => Side::H,
            ConstraintSide::WRows => Side::W,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedSimplex {
    weights: Vec<f64>,
    side: ConstraintSide,
}

impl GeneralizedSimplex {
    pub fn new(weights: Vec<f64>, side: ConstraintSide) -> Result<Self> {
        if weights.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return Err(Error::InvalidSpec("simplex weights must be finite and ≥ 0".into()));
        }
        if !weights.iter().any(|&e| e > 0.0) {
            return Err(Error::InvalidSpec("at least one simplex weight must be positive".into()));
        }
        Ok(Self { weights, side })
    }

    /// The probability simplex `1ᵀx = 1` of dimension `k`.
    pub fn probability(k: usize, side: ConstraintSide) -> Result<Self> {
        Self::new(vec![1.0; k], side)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn side(&self) -> ConstraintSide {
        self.side
    }

    pub fn l1(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `max |eᵀx − 1|` over the constrained vectors of `block`.
    pub fn violation(&self, block: &DenseMatrix) -> f64 {
        let e = &self.weights;
        match self.side {
            ConstraintSide::HColumns => {
                let mut sums = vec![0.0; block.cols()];
                for (j, &ej) in e.iter().enumerate() {
                    for (s, &v) in sums.iter_mut().zip(block.row(j)) {
                        *s += ej * v;
                    }
                }
                sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
            }
            ConstraintSide::WRows => (0..block.rows())
                .map(|i| (crate::linalg::dot(block.row(i), e) - 1.0).abs())
                .fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    y: DenseMatrix,
    rank: usize,
    epsilon: f64,
    constraint: Option<GeneralizedSimplex>,
    reg_w: RegularizerSpec,
    reg_h: RegularizerSpec,
}

#[derive(Debug, Clone)]
pub struct ProblemSpecBuilder {
    spec: ProblemSpec,
}

impl ProblemSpecBuilder {
    pub fn epsilon(mut self, epsilon: f64) -> Self {
        self.spec.epsilon = epsilon;
        self
    }

    pub fn constraint(mut self, c: GeneralizedSimplex) -> Self {
        self.spec.constraint = Some(c);
        self
    }

    pub fn maybe_constraint(mut self, c: Option<GeneralizedSimplex>) -> Self {
        self.spec.constraint = c;
        self
    }

    pub fn reg_w(mut self, r: RegularizerSpec) -> Self {
        self.spec.reg_w = r;
        self
    }

    pub fn reg_h(mut self, r: RegularizerSpec) -> Self {
        self.spec.reg_h = r;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let s = self.spec;
        if !(s.epsilon > 0.0) || !s.epsilon.is_finite() {
            return Err(Error::InvalidSpec(format!("epsilon must be > 0, got {}", s.epsilon)));
        }
        if s.rank == 0 {
            return Err(Error::InvalidSpec("rank must be ≥ 1".into()));
        }
        if s.y.rows() == 0 || s.y.cols() == 0 {
            return Err(Error::InvalidSpec("observed matrix is empty".into()));
        }
        if let Some(pos) = s.y.values().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidSpec(format!(
                "observed matrix has a negative entry at ({}, {})",
                pos / s.y.cols(),
                pos % s.y.cols()
            )));
        }
        if let Some(c) = &s.constraint {
            if c.weights().len() != s.rank {
                return Err(Error::InvalidSpec(format!(
                    "{} simplex weights for rank {}",
                    c.weights().len(),
                    s.rank
                )));
            }
            if s.epsilon * c.l1() > 1.0 {
                return Err(Error::InvalidSpec(format!(
                    "infeasible constraint: ε·‖e‖₁ = {} > 1",
                    s.epsilon * c.l1()
                )));
            }
        }
        s.reg_w.validate()?;
        s.reg_h.validate()?;
        Ok(s)
    }
}

impl ProblemSpec {
    pub fn builder(y: DenseMatrix, rank: usize) -> ProblemSpecBuilder {
        ProblemSpecBuilder {
            spec: ProblemSpec {
                y,
                rank,
                epsilon: DEFAULT_EPSILON,
                constraint: None,
                reg_w: RegularizerSpec::none(),
                reg_h: RegularizerSpec::none(),
            },
        }
    }

    pub fn y(&self) -> &DenseMatrix {
        &self.y
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn constraint(&self) -> Option<&GeneralizedSimplex> {
        self.constraint.as_ref()
    }

    pub fn reg_w(&self) -> &RegularizerSpec {
        &self.reg_w
    }

    pub fn reg_h(&self) -> &RegularizerSpec {
        &self.reg_h
    }

    pub fn regularizer(&self, side: Side) -> &RegularizerSpec {
        match side {
            Side::W => &self.reg_w,
            Side::H => &self.reg_h,
        }
    }

    /// Simplex weights when the constraint sits on `side`.
    pub fn constraint_on(&self, side: Side) -> Option<&GeneralizedSimplex> {
        self.constraint.as_ref().filter(|c| c.side().side() == side)
    }

    pub fn check_factors(&self, w: &DenseMatrix, h: &DenseMatrix) -> Result<()> {
        let (n, m) = self.y.shape();
        if w.shape() != (n, self.rank) || h.shape() != (self.rank, m) {
            return Err(Error::Dimension(format!(
                "factors {}x{} and {}x{} do not match Y {}x{} with rank {}",
                w.rows(),
                w.cols(),
                h.rows(),
                h.cols(),
                n,
                m,
                self.rank
            )));
        }
        Ok(())
    }
}

/// `−⟨Y, log WH⟩ + ⟨1, WH⟩`, with zero counts contributing nothing to the log term.
pub fn poisson_loss(w: &DenseMatrix, h: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    let wh = w.matmul(h)?;
    poisson_loss_from_product(&wh, y)
}

pub fn poisson_loss_from_product(wh: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    if wh.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "WH is {}x{} but Y is {}x{}",
            wh.rows(),
            wh.cols(),
            y.rows(),
            y.cols()
        )));
    }
    let mut loss = 0.0;
    for (idx, (&p, &c)) in wh.values().iter().zip(y.values()).enumerate() {
        if c > 0.0 {
            if !(p > 0.0) {
                return Err(Error::Domain(format!(
                    "(WH) entry {idx} is {p} where Y is positive"
                )));
            }
            loss -= c * p.ln();
        }
        loss += p;
    }
    Ok(loss)
}

fn check_floor(m: &DenseMatrix, epsilon: f64, name: &str) -> Result<()> {
    let floor = epsilon * (1.0 - 1e-12);
    if let Some(pos) = m.values().iter().position(|&v| !(v >= floor)) {
        return Err(Error::Domain(format!(
            "{name} entry {pos} = {} is below ε = {epsilon}",
            m.values()[pos]
        )));
    }
    Ok(())
}

/// Poisson loss plus both regularizers.
pub fn total_objective(w: &DenseMatrix, h: &DenseMatrix, spec: &ProblemSpec) -> Result<f64> {
    Ok(objective_parts(w, h, spec)?.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveParts {
    pub loss: f64,
    pub reg_w: f64,
    pub reg_h: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.loss + self.reg_w + self.reg_h
    }
}

pub fn objective_parts(w: &DenseMatrix, h: &DenseMatrix, spec: &ProblemSpec) -> Result<ObjectiveParts> {
    spec.check_factors(w, h)?;
    check_floor(w, spec.epsilon, "W")?;
    check_floor(h, spec.epsilon, "H")?;
    let loss = poisson_loss(w, h, &spec.y)?;
    Ok(ObjectiveParts {
        loss,
        reg_w: spec.reg_w.block_value(w, Side::W),
        reg_h: spec.reg_h.block_value(h, Side::H),
    })
}

/// A smooth term restricted to one subproblem vector.
#[derive(Debug, Clone)]
pub struct LocalTerm {
    pub func: Arc<dyn VectorFunction>,
    pub sigma: f64,
}

/// One separable subproblem `−Σ_i (b_i log(a_iᵀx) − a_iᵀx) + s_L(x) + s_R(x) + Σ_j s_C(x_j)`.
#[derive(Debug, Clone)]
pub struct SubproblemView {
    /// Observations × variables.
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub lipschitz: Option<LocalTerm>,
    pub relsmooth: Option<LocalTerm>,
    pub concave: Option<Arc<dyn ScalarFunction>>,
}

impl SubproblemView {
    pub fn new(a: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() != b.len() {
            return Err(Error::Dimension(format!(
                "A has {} rows but b has {} entries",
                a.rows(),
                b.len()
            )));
        }
        Ok(Self {
            a,
            b,
            lipschitz: None,
            relsmooth: None,
            concave: None,
        })
    }

    pub fn with_lipschitz(mut self, func: Arc<dyn VectorFunction>, sigma: f64) -> Self {
        self.lipschitz = Some(LocalTerm { func, sigma });
        self
    }

    pub fn with_relsmooth(mut self, func: Arc<dyn VectorFunction>, sigma: f64) -> Self {
        self.relsmooth = Some(LocalTerm { func, sigma });
        self
    }

    pub fn with_concave(mut self, func: Arc<dyn ScalarFunction>) -> Self {
        self.concave = Some(func);
        self
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// The data-fit part `−Σ_i b_i log(a_iᵀx) + a_iᵀx`.
    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        let ax = self.a.mat_vec(x);
        let mut v = 0.0;
        for (i, (&p, &c)) in ax.iter().zip(&self.b).enumerate() {
            if c > 0.0 {
                if !(p > 0.0) {
                    return Err(Error::Domain(format!("a_{i}ᵀx = {p} with b_{i} > 0")));
                }
                v -= c * p.ln();
            }
            v += p;
        }
        Ok(v)
    }

    /// Full subproblem objective.
    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        let mut v = self.loss(x)?;
        if let Some(t) = &self.lipschitz {
            v += t.func.value(x);
        }
        if let Some(t) = &self.relsmooth {
            v += t.func.value(x);
        }
        if let Some(c) = &self.concave {
            v += x.iter().map(|&t| c.value(t)).sum::<f64>();
        }
        Ok(v)
    }

    /// Analytic gradient of [`SubproblemView::objective`].
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ax = self.a.mat_vec(x);
        let mut ratio = vec![0.0; ax.len()];
        for (i, (&p, &c)) in ax.iter().zip(&self.b).enumerate() {
            if c > 0.0 {
                if !(p > 0.0) {
                    return Err(Error::Domain(format!("a_{i}ᵀx = {p} with b_{i} > 0")));
                }
                ratio[i] = 1.0 - c / p;
            } else {
                ratio[i] = 1.0;
            }
        }
        let mut g = self.a.t_mat_vec(&ratio);
        for t in [&self.lipschitz, &self.relsmooth].into_iter().flatten() {
            let tg = t.func.gradient_vec(x);
            g.iter_mut().zip(&tg).for_each(|(a, b)| *a += b);
        }
        if let Some(c) = &self.concave {
            g.iter_mut().zip(x).for_each(|(a, &t)| *a += c.derivative(t));
        }
        Ok(g)
    }
}

/// Function of one subproblem vector obtained by freezing the rest of a block.
#[derive(Debug, Clone)]
struct Restricted {
    inner: Arc<dyn VectorFunction>,
    block: Arc<DenseMatrix>,
    side: Side,
    index: usize,
}

impl Restricted {
    /// The transverse group vectors with this subproblem's entries replaced by `x`.
    fn with_groups(&self, x: &[f64], mut f: impl FnMut(usize, &[f64])) {
        match self.side {
            // subproblem = column `index` of H, groups = rows of H
            Side::H => {
                let mut row = vec![0.0; self.block.cols()];
                for r in 0..self.block.rows() {
                    row.copy_from_slice(self.block.row(r));
                    row[self.index] = x[r];
                    f(r, &row);
                }
            }
            // subproblem = row `index` of W, groups = columns of W
            Side::W => {
                for c in 0..self.block.cols() {
                    let mut col = self.block.column(c);
                    col[self.index] = x[c];
                    f(c, &col);
                }
            }
        }
    }
}

impl VectorFunction for Restricted {
    fn value(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        self.with_groups(x, |_, g| v += self.inner.value(g));
        v
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let mut buf = Vec::new();
        self.with_groups(x, |r, g| {
            buf.resize(g.len(), 0.0);
            self.inner.gradient(g, &mut buf);
            out[r] = buf[self.index];
        });
    }
}

fn local_term(term: &SmoothTerm, block: &Arc<DenseMatrix>, side: Side, index: usize) -> LocalTerm {
    let func: Arc<dyn VectorFunction> = match term.grouping {
        Grouping::Subproblem => Arc::clone(&term.func),
        Grouping::Transverse => Arc::new(Restricted {
            inner: Arc::clone(&term.func),
            block: Arc::clone(block),
            side,
            index,
        }),
    };
    LocalTerm {
        func,
        sigma: term.sigma,
    }
}

/// Splits one block update into its independent subproblems.
///
/// H-block: one view per column `i` with `A = W`, `b = y_i`. W-block: one view per row
/// `j` with `A = Hᵀ`, `b` = row `j` of Y. Terms that couple subproblems are frozen at
/// the current block, so each view's value and gradient at `xᵗ` match the block's.
pub fn subproblem_view(
    side: Side,
    w: &DenseMatrix,
    h: &DenseMatrix,
    spec: &ProblemSpec,
) -> Result<Vec<SubproblemView>> {
    spec.check_factors(w, h)?;
    let reg = spec.regularizer(side);
    let (a, block) = match side {
        Side::H => (w.clone(), Arc::new(h.clone())),
        Side::W => (h.transpose(), Arc::new(w.clone())),
    };
    let count = match side {
        Side::H => h.cols(),
        Side::W => w.rows(),
    };
    let mut views = Vec::with_capacity(count);
    for idx in 0..count {
        let b = match side {
            Side::H => spec.y.column(idx),
            Side::W => spec.y.row(idx).to_vec(),
        };
        let mut view = SubproblemView::new(a.clone(), b)?;
        view.lipschitz = reg.lipschitz.as_ref().map(|t| local_term(t, &block, side, idx));
        view.relsmooth = reg.relsmooth.as_ref().map(|t| local_term(t, &block, side, idx));
        view.concave = reg.concave.clone();
        views.push(view);
    }
    Ok(views)
}

/// The subproblem vector `idx` of a block.
pub fn subproblem_vector(block: &DenseMatrix, side: Side, idx: usize) -> Vec<f64> {
    match side {
        Side::H => block.column(idx),
        Side::W => block.row(idx).to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::laplacian_2d;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    #[test]
    fn loss_examples() {
        let w = DenseMatrix::filled(2, 1, 1.0);
        let h = DenseMatrix::filled(1, 2, 1.0);
        assert_eq!(poisson_loss(&w, &h, &DenseMatrix::filled(2, 2, 1.0)).unwrap(), 4.0);
        assert_eq!(poisson_loss(&w, &h, &DenseMatrix::zeros(2, 2)).unwrap(), 4.0);
        let h2 = m(&[&[2.0, 2.0]]);
        let y = DenseMatrix::filled(2, 2, 2.0);
        // −4·2·log 2 + 8: four cells each contributing −2 log 2 + 2
        let want = -8.0 * 2f64.ln() + 8.0;
        assert_relative_eq!(poisson_loss(&w, &h2, &y).unwrap(), want, max_relative = 1e-14);
    }

    #[test]
    fn loss_domain_error_when_product_vanishes_on_counts() {
        let w = m(&[&[0.0], &[1.0]]);
        let h = m(&[&[1.0]]);
        let y = m(&[&[1.0], &[1.0]]);
        assert!(matches!(poisson_loss(&w, &h, &y), Err(Error::Domain(_))));
        let y0 = m(&[&[0.0], &[1.0]]);
        assert_eq!(poisson_loss(&w, &h, &y0).unwrap(), 1.0);
    }

    #[test]
    fn one_dimensional_loss_is_minimized_at_the_count() {
        let c = 3.7;
        let f = |s: f64| -c * s.ln() + s;
        for s in [0.5, 1.0, 3.0, 3.69, 3.71, 10.0] {
            let w = m(&[&[s]]);
            let h = m(&[&[1.0]]);
            let y = m(&[&[c]]);
            let v = poisson_loss(&w, &h, &y).unwrap();
            assert_relative_eq!(v, f(s), max_relative = 1e-14);
            assert!(v >= f(c));
        }
    }

    #[test]
    fn objective_examples() {
        let y = DenseMatrix::filled(2, 2, 1.0);
        let w = DenseMatrix::filled(2, 1, 1.0);
        let h = DenseMatrix::filled(1, 2, 1.0);
        let spec = ProblemSpec::builder(y.clone(), 1).build().unwrap();
        assert_eq!(total_objective(&w, &h, &spec).unwrap(), poisson_loss(&w, &h, &y).unwrap());

        let lap = RegularizerSpec::laplacian_smoothness(2.0, laplacian_2d(2).unwrap()).unwrap();
        let y4 = DenseMatrix::filled(2, 4, 1.0);
        let w4 = DenseMatrix::filled(2, 1, 1.0);
        let h4 = DenseMatrix::filled(1, 4, 0.7);
        let spec = ProblemSpec::builder(y4.clone(), 1).reg_h(lap).build().unwrap();
        assert_relative_eq!(
            total_objective(&w4, &h4, &spec).unwrap(),
            poisson_loss(&w4, &h4, &y4).unwrap(),
            max_relative = 1e-15
        );

        let sparse = RegularizerSpec::log_sparsity(1.0).unwrap();
        let spec = ProblemSpec::builder(y.clone(), 1).reg_h(sparse).build().unwrap();
        let extra = total_objective(&w, &h, &spec).unwrap() - poisson_loss(&w, &h, &y).unwrap();
        assert_relative_eq!(extra, 2.0 * 2f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn objective_rejects_entries_below_floor() {
        let y = DenseMatrix::filled(1, 1, 1.0);
        let spec = ProblemSpec::builder(y, 1).epsilon(0.1).build().unwrap();
        let w = DenseMatrix::filled(1, 1, 0.05);
        let h = DenseMatrix::filled(1, 1, 1.0);
        assert!(matches!(total_objective(&w, &h, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn spec_validation() {
        let y = DenseMatrix::filled(2, 3, 1.0);
        assert!(ProblemSpec::builder(y.clone(), 0).build().is_err());
        assert!(ProblemSpec::builder(y.clone(), 2).epsilon(0.0).build().is_err());
        let neg = m(&[&[1.0, -1.0]]);
        assert!(ProblemSpec::builder(neg, 1).build().is_err());
        let c = GeneralizedSimplex::probability(2, ConstraintSide::HColumns).unwrap();
        assert!(ProblemSpec::builder(y.clone(), 2).epsilon(0.6).constraint(c.clone()).build().is_err());
        assert!(ProblemSpec::builder(y.clone(), 2).epsilon(0.5).constraint(c.clone()).build().is_ok());
        assert!(ProblemSpec::builder(y.clone(), 3).constraint(c).build().is_err());
        assert!(GeneralizedSimplex::new(vec![0.0, 0.0], ConstraintSide::HColumns).is_err());
        assert!(GeneralizedSimplex::new(vec![-1.0, 2.0], ConstraintSide::HColumns).is_err());
    }

    #[test]
    fn rescaling_invariance_only_without_regularizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random(&mut rng, 4, 9, 0.0, 3.0);
        let w = random(&mut rng, 4, 2, 0.1, 1.0);
        let h = random(&mut rng, 2, 9, 0.1, 1.0);
        let plain = ProblemSpec::builder(y.clone(), 2).build().unwrap();
        let lap = RegularizerSpec::laplacian_smoothness(1.0, laplacian_2d(3).unwrap()).unwrap();
        let reg = ProblemSpec::builder(y, 2).reg_h(lap).build().unwrap();
        let base = total_objective(&w, &h, &plain).unwrap();
        let base_reg = total_objective(&w, &h, &reg).unwrap();
        for a in [0.5, 2.0] {
            let (ws, hs) = (w.scale(a), h.scale(1.0 / a));
            let v = total_objective(&ws, &hs, &plain).unwrap();
            assert!((v - base).abs() <= 1e-10 * base.abs());
            let vr = total_objective(&ws, &hs, &reg).unwrap();
            assert!((vr - base_reg).abs() > 1e-6);
        }
    }

    fn fd_check(f: &dyn VectorFunction, x: &[f64]) -> f64 {
        let g = f.gradient_vec(x);
        let mut worst: f64 = 0.0;
        for j in 0..x.len() {
            let step = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * step);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
        worst
    }

    #[test]
    fn builtin_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let quad = QuadraticForm {
            weight: 1.3,
            operator: laplacian_2d(3).unwrap(),
        };
        let barrier = LogBarrier { offset: 0.05 };
        for _ in 0..50 {
            let x: Vec<f64> = (0..9).map(|_| rng.random_range(0.2..5.0)).collect();
            assert!(fd_check(&quad, &x) <= 1e-5);
            assert!(fd_check(&barrier, &x) <= 1e-5);
        }
        let sp = LogSparsity { alpha: 2.0 };
        for _ in 0..50 {
            let t: f64 = rng.random_range(0.01..5.0);
            let h = 1e-6 * t.max(1.0);
            let fd = (sp.value(t + h) - sp.value(t - h)) / (2.0 * h);
            assert!((fd - sp.derivative(t)).abs() <= 1e-5 * sp.derivative(t).abs().max(1.0));
        }
    }

    #[test]
    fn views_have_expected_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random(&mut rng, 2, 3, 0.0, 2.0);
        let w = random(&mut rng, 2, 2, 0.1, 1.0);
        let h = random(&mut rng, 2, 3, 0.1, 1.0);
        let spec = ProblemSpec::builder(y.clone(), 2).build().unwrap();
        let hv = subproblem_view(Side::H, &w, &h, &spec).unwrap();
        assert_eq!(hv.len(), 3);
        for (i, v) in hv.iter().enumerate() {
            assert_eq!(v.a, w);
            assert_eq!(v.b, y.column(i));
        }
        let wv = subproblem_view(Side::W, &w, &h, &spec).unwrap();
        assert_eq!(wv.len(), 2);
        for (j, v) in wv.iter().enumerate() {
            assert_eq!(v.a, h.transpose());
            assert_eq!(v.b, y.row(j));
        }
    }

    #[test]
    fn laplacian_view_gradients_are_block_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = 3;
        let y = random(&mut rng, 4, p * p, 0.0, 2.0);
        let w = random(&mut rng, 4, 2, 0.1, 1.0);
        let h = random(&mut rng, 2, p * p, 0.1, 1.0);
        let lap = RegularizerSpec::laplacian_smoothness(0.7, laplacian_2d(p).unwrap()).unwrap();
        let spec = ProblemSpec::builder(y, 2).reg_h(lap.clone()).build().unwrap();
        let full = lap.block_gradient(&h, Side::H);
        let views = subproblem_view(Side::H, &w, &h, &spec).unwrap();
        for (i, v) in views.iter().enumerate() {
            let t = v.lipschitz.as_ref().unwrap();
            let g = t.func.gradient_vec(&h.column(i));
            for r in 0..2 {
                assert_relative_eq!(g[r], full.get(r, i), max_relative = 1e-13);
            }
            assert_relative_eq!(
                t.func.value(&h.column(i)),
                lap.block_value(&h, Side::H),
                max_relative = 1e-13
            );
        }
        // constant image rows give zero slices
        let hc = DenseMatrix::from_fn(2, p * p, |r, _| 0.3 + r as f64);
        let views = subproblem_view(Side::H, &w, &hc, &spec).unwrap();
        for (i, v) in views.iter().enumerate() {
            let g = v.lipschitz.as_ref().unwrap().func.gradient_vec(&hc.column(i));
            assert!(g.iter().all(|x| x.abs() < 1e-14));
        }
    }

    #[test]
    fn view_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 5, 3, 0.1, 1.0);
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
        let view = SubproblemView::new(a, b)
            .unwrap()
            .with_relsmooth(Arc::new(LogBarrier { offset: 0.0 }), 1.0)
            .with_concave(Arc::new(LogSparsity { alpha: 1.0 }));
        let x = vec![0.4, 1.1, 2.3];
        let g = view.gradient(&x).unwrap();
        for j in 0..3 {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (view.objective(&xp).unwrap() - view.objective(&xm).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0));
        }
    }

    #[test]
    fn merge_rejects_duplicate_parts() {
        let a = RegularizerSpec::log_sparsity(1.0).unwrap();
        let b = RegularizerSpec::log_sparsity(2.0).unwrap();
        assert!(a.clone().merge(b).is_err());
        let c = RegularizerSpec::log_barrier(0.0, 1.0).unwrap();
        let merged = a.merge(c).unwrap();
        assert!(merged.concave.is_some() && merged.relsmooth.is_some());
    }

    #[test]
    fn barrier_sigma_helper() {
        assert_eq!(log_barrier_sigma(0.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(log_barrier_sigma(0.5, 1.0).unwrap(), 4.0);
        assert!(log_barrier_sigma(1.0, 1.0).is_err());
    }
}
