use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{subproblem_vector, ProblemSpec, Side};

use super::block::objective_block_gradient;
use super::constraint_violation;

/// Relative distance above `ε` under which a coordinate counts as on the floor.
const BOUNDARY_REL: f64 = 1e-9;
/// Largest tolerated `|eᵀx − 1|` for a point to count as feasible.
const FEASIBILITY_TOL: f64 = 1e-6;

/// Stationarity residual of one subproblem vector with gradient `g`.
///
/// Interior coordinates contribute `|g_j + ν e_j|`, floor coordinates the negative part
/// of `g_j + ν e_j`. `ν` is the least-squares multiplier over interior weighted
/// coordinates (0 without a constraint).
fn vector_residual(x: &[f64], g: &[f64], e: Option<&[f64]>, eps: f64) -> f64 {
    let floor = eps * (1.0 + BOUNDARY_REL);
    let interior = |j: usize| x[j] > floor;
    let nu = match e {
        None => 0.0,
        Some(e) => {
            let (mut ge, mut ee) = (0.0, 0.0);
            for j in 0..x.len() {
                if e[j] > 0.0 && interior(j) {
                    ge += g[j] * e[j];
                    ee += e[j] * e[j];
                }
            }
            if ee > 0.0 {
                -ge / ee
            } else {
                // every weighted coordinate sits on the floor: the smallest ν making all
                // of them point inward
                (0..x.len())
                    .filter(|&j| e[j] > 0.0)
                    .map(|j| -g[j] / e[j])
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        }
    };
    (0..x.len())
        .map(|j| {
            let r = g[j] + nu * e.map_or(0.0, |e| e[j]);
            if interior(j) {
                r.abs()
            } else {
                (-r).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Max over both blocks of the per-coordinate stationarity residual.
pub fn kkt_residual(w: &DenseMatrix, h: &DenseMatrix, spec: &ProblemSpec) -> Result<f64> {
    spec.check_factors(w, h)?;
    let eps = spec.epsilon();
    let floor = eps * (1.0 - 1e-12);
    if w.values().iter().chain(h.values()).any(|&v| !(v >= floor)) {
        return Err(Error::Domain("factors fall below the floor ε".into()));
    }
    let viol = constraint_violation(spec, w, h);
    if viol > FEASIBILITY_TOL {
        return Err(Error::Domain(format!("constraint violated by {viol:e}")));
    }
    let mut worst: f64 = 0.0;
    for side in [Side::W, Side::H] {
        let g = objective_block_gradient(side, w, h, spec)?;
        let block = match side {
            Side::W => w,
            Side::H => h,
        };
        let e = spec.constraint_on(side).map(|c| c.weights());
        let count = match side {
            Side::W => w.rows(),
            Side::H => h.cols(),
        };
        for idx in 0..count {
            let x = subproblem_vector(block, side, idx);
            let gv = subproblem_vector(&g, side, idx);
            worst = worst.max(vector_residual(&x, &gv, e, eps));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstraintSide, GeneralizedSimplex};

    #[test]
    fn exact_scalar_stationary_point() {
        // 1×1 problem: −c log(wh) + wh is stationary whenever wh = c
        let y = DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        let spec = ProblemSpec::builder(y, 1).build().unwrap();
        let w = DenseMatrix::from_vec(1, 1, vec![1.5]).unwrap();
        let h = DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        assert!(kkt_residual(&w, &h, &spec).unwrap() <= 1e-15);
        let h2 = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert!(kkt_residual(&w, &h2, &spec).unwrap() > 0.1);
    }

    #[test]
    fn floor_coordinates_only_count_outward_gradients() {
        assert_eq!(vector_residual(&[1e-8, 1.0], &[5.0, 0.0], None, 1e-8), 0.0);
        assert_eq!(vector_residual(&[1e-8, 1.0], &[-5.0, 0.0], None, 1e-8), 5.0);
    }

    #[test]
    fn multiplier_absorbs_a_common_gradient_shift() {
        let e = [1.0, 1.0, 1.0];
        let r = vector_residual(&[0.2, 0.3, 0.5], &[2.0, 2.0, 2.0], Some(&e), 1e-8);
        assert!(r <= 1e-15);
        let r = vector_residual(&[0.2, 0.3, 0.5], &[1.0, 2.0, 3.0], Some(&e), 1e-8);
        assert!((r - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn infeasible_points_are_rejected() {
        let y = DenseMatrix::filled(2, 2, 1.0);
        let c = GeneralizedSimplex::probability(2, ConstraintSide::HColumns).unwrap();
        let spec = ProblemSpec::builder(y, 2).constraint(c).build().unwrap();
        let w = DenseMatrix::filled(2, 2, 1.0);
        let h = DenseMatrix::filled(2, 2, 0.3);
        assert!(kkt_residual(&w, &h, &spec).is_err());
    }
}
