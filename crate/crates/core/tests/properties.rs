//! Whole-solver properties on small random instances.

use proptest::prelude::*;

use pnmf::data::{gen_smooth, gen_uniform, DatasetConfig, DatasetKind};
use pnmf::majorize::gkl_divergence;
use pnmf::model::{ConstraintSide, GeneralizedSimplex, ProblemSpec, RegularizerSpec};
use pnmf::solver::LineSearch;
use pnmf::{laplacian_2d, solve, Algorithm, SolverConfig};

fn small_problem(seed: u64, p: usize, weights: Option<Vec<f64>>, laplacian: Option<f64>, sparsity: Option<f64>) -> ProblemSpec {
    let cfg = DatasetConfig::new(DatasetKind::Uniform, 6, 2, p)
        .with_noise(20.0)
        .with_seed(seed);
    let y = gen_uniform(&cfg).unwrap().y_noisy;
    let mut reg = RegularizerSpec::none();
    if let Some(w) = laplacian {
        reg = reg
            .merge(RegularizerSpec::laplacian_smoothness(w, laplacian_2d(p).unwrap()).unwrap())
            .unwrap();
    }
    if let Some(a) = sparsity {
        reg = reg.merge(RegularizerSpec::log_sparsity(a).unwrap()).unwrap();
    }
    let mut b = ProblemSpec::builder(y, 2).reg_h(reg);
    if let Some(e) = weights {
        b = b.constraint(GeneralizedSimplex::new(e, ConstraintSide::HColumns).unwrap());
    }
    b.build().unwrap()
}

fn run(spec: &ProblemSpec, algorithm: Algorithm, iters: usize, seed: u64) -> pnmf::SolveResult {
    let config = SolverConfig {
        algorithm,
        max_iter: iters,
        rel_tol: 0.0,
        seed,
        ..SolverConfig::default()
    };
    solve(spec, &config).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mu_and_qu_never_increase_the_objective(
        seed in 0u64..10_000,
        qu in any::<bool>(),
        e in prop::option::of(prop::collection::vec(0.5f64..2.0, 2)),
        lap in prop::option::of(0.01f64..5.0),
        sparse in prop::option::of(0.5f64..5.0),
    ) {
        let spec = small_problem(seed, 3, e, lap, sparse);
        let alg = if qu { Algorithm::Qu } else { Algorithm::Mu };
        let r = run(&spec, alg, 40, seed);
        prop_assert!(!r.termination.is_failure(), "{:?}", r.termination);
        prop_assert!(r.trace.is_monotone(1e-10), "relative increase {:e}", r.trace.max_relative_increase());
    }

    #[test]
    fn weighted_simplex_holds_at_every_record(
        seed in 0u64..10_000,
        e in prop::collection::vec(0.2f64..3.0, 2),
        alg in prop::sample::select(vec![Algorithm::Mu, Algorithm::Qu, Algorithm::Bmd, Algorithm::Pgd]),
    ) {
        let spec = small_problem(seed, 3, Some(e), Some(0.5), None);
        let r = run(&spec, alg, 25, seed);
        for rec in &r.trace.records {
            prop_assert!(rec.constraint_violation <= 1e-8, "iteration {}: {:e}", rec.iter, rec.constraint_violation);
            prop_assert!(rec.min_h >= spec.epsilon());
        }
    }

    #[test]
    fn norm_gkl_bound_holds_when_x_stays_below_the_anchor_max(
        pairs in prop::collection::vec((1e-3f64..10.0, 0.0f64..1.0), 1..6),
    ) {
        let x_t: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let m = x_t.iter().copied().fold(0.0, f64::max);
        // x ∈ (0, max xᵗ]
        let x: Vec<f64> = pairs.iter().map(|p| (p.1 * m).max(1e-6)).collect();
        let lhs: f64 = x.iter().zip(&x_t).map(|(a, b)| (a - b).powi(2)).sum();
        let rhs = 2.0 * m * gkl_divergence(&x, &x_t).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300, "{lhs} > {rhs}");
    }
}

#[test]
fn norm_gkl_bound_fails_far_above_the_anchor() {
    // one coordinate: ‖x − xᵗ‖² grows quadratically, D_GKL only linearly in x
    let (x, x_t) = ([10.0], [1.0]);
    let lhs = 81.0;
    let rhs = 2.0 * gkl_divergence(&x, &x_t).unwrap();
    assert!((rhs - 2.0 * (9.0 - 10f64.ln())).abs() < 1e-12);
    assert!(lhs > rhs);
}

#[test]
fn identical_inputs_give_bit_identical_traces() {
    let spec = small_problem(5, 3, Some(vec![1.0, 1.0]), Some(1.0), Some(2.0));
    for alg in Algorithm::ALL {
        let a = run(&spec, alg, 30, 11);
        let b = run(&spec, alg, 30, 11);
        let bits = |r: &pnmf::SolveResult| r.trace.objectives.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b), "{}", alg.name());
        assert_eq!(a.h.values(), b.h.values());
    }
}

#[test]
fn parallel_blocks_match_sequential_blocks() {
    let spec = small_problem(8, 4, Some(vec![1.0, 1.0]), Some(0.3), None);
    for alg in [Algorithm::Mu, Algorithm::Qu] {
        let seq = run(&spec, alg, 20, 2);
        let config = SolverConfig {
            algorithm: alg,
            max_iter: 20,
            rel_tol: 0.0,
            seed: 2,
            parallel: true,
            ..SolverConfig::default()
        };
        let par = solve(&spec, &config).unwrap();
        assert_eq!(seq.w.values(), par.w.values());
        assert_eq!(seq.h.values(), par.h.values());
    }
}

#[test]
fn line_search_usually_helps() {
    // soft: the adaptive Lipschitz estimate should not lose to the global constant
    // on at least 80% of seeded runs
    let runs = 50;
    let mut better = 0;
    for seed in 0..runs {
        let cfg = DatasetConfig::new(DatasetKind::Smooth, 10, 3, 8)
            .with_noise(10.0)
            .with_seed(seed);
        let y = gen_smooth(&cfg).unwrap().y_noisy;
        let spec = ProblemSpec::builder(y, 3)
            .constraint(GeneralizedSimplex::probability(3, ConstraintSide::HColumns).unwrap())
            .reg_h(RegularizerSpec::laplacian_smoothness(5.0, laplacian_2d(8).unwrap()).unwrap())
            .build()
            .unwrap();
        let alg = if seed % 2 == 0 { Algorithm::Mu } else { Algorithm::Qu };
        let plain = run(&spec, alg, 60, seed);
        let config = SolverConfig {
            algorithm: alg,
            max_iter: 60,
            rel_tol: 0.0,
            seed,
            linesearch: Some(LineSearch::new(1.5, 1.2).unwrap()),
            ..SolverConfig::default()
        };
        let searched = solve(&spec, &config).unwrap();
        if searched.trace.final_objective().unwrap() <= plain.trace.final_objective().unwrap() {
            better += 1;
        }
    }
    assert!(better * 5 >= runs * 4, "line search helped on only {better}/{runs} runs");
}

#[test]
fn mu_with_a_strong_image_laplacian_keeps_beta_positive() {
    // the Laplacian couples H across columns; a per-column maximum understates the MU
    // constant and can drive β negative
    let spec = small_problem(2928, 3, None, Some(4.0788544327008065), None);
    let r = run(&spec, Algorithm::Mu, 40, 2928);
    assert!(!r.termination.is_failure(), "{:?}", r.termination);
    assert!(r.trace.is_monotone(1e-10));
}
