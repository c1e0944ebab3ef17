//! Poisson nonnegative matrix factorization with composite regularizers.
//!
//! Each factor block is updated by minimizing a separable majorizer of the objective,
//! either with a multiplicative (MU) or a quadratic (QU) closed-form rule, optionally
//! under a generalized simplex constraint `eᵀx = 1, x ≥ ε`.
//!
//! ```
//! use pnmf::data::{gen_smooth, DatasetConfig, DatasetKind};
//! use pnmf::model::{ConstraintSide, GeneralizedSimplex, ProblemSpec, RegularizerSpec};
//! use pnmf::solver::{solve, Algorithm, SolverConfig};
//! use pnmf::laplacian_2d;
//!
//! let data = gen_smooth(&DatasetConfig::new(DatasetKind::Smooth, 25, 3, 8).with_seed(1)).unwrap();
//! let spec = ProblemSpec::builder(data.y_noisy, 3)
//!     .constraint(GeneralizedSimplex::probability(3, ConstraintSide::HColumns).unwrap())
//!     .reg_h(RegularizerSpec::laplacian_smoothness(0.5, laplacian_2d(8).unwrap()).unwrap())
//!     .build()
//!     .unwrap();
//! let result = solve(&spec, &SolverConfig { max_iter: 20, ..SolverConfig::new(Algorithm::Qu) }).unwrap();
//! assert!(result.trace.is_monotone(1e-10));
//! ```

pub mod data;
pub mod error;
pub mod linalg;
pub mod majorize;
pub mod model;
pub mod solver;
pub mod update;

pub use error::{Error, Result};
pub use linalg::{lambda_max, laplacian_2d, DenseMatrix, SparseSymmetricOperator};
pub use model::{
    objective_parts, poisson_loss, total_objective, ConstraintSide, GeneralizedSimplex, ProblemSpec,
    RegularizerSpec, Side, SubproblemView,
};
pub use solver::{kkt_residual, solve, Algorithm, SolveResult, SolverConfig, SolverTrace, Termination};
