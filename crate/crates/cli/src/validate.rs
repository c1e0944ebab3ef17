use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use pnmf::linalg::{dot, lambda_max, LAMBDA_MAX_ITER, LAMBDA_MAX_TOL};
use pnmf::majorize::{
    certify_majorization, certify_pair, concave_bound, em_log_bound, lipschitz_bound, loss_bregman_bound,
    loss_surrogate, relsmooth_bound, BoxSampler, MajorizationReport, SurrogateKind,
};
use pnmf::model::{
    log_barrier_sigma, LogBarrier, LogSparsity, QuadraticForm, ScalarFunction, SubproblemView, VectorFunction,
};
use pnmf::{laplacian_2d, DenseMatrix};

use crate::common::{create_dir, usage, write_json, Outcome, SCHEMA_VERSION};

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Random instances per majorizer.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Sample points per instance.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per axis of the tightness grid.
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct InstanceReport {
    majorizer: &'static str,
    instance: usize,
    dim: usize,
    passes: bool,
    report: MajorizationReport,
}

#[derive(Debug, Serialize)]
struct MajorizerSummary {
    majorizer: &'static str,
    instances: usize,
    passed: usize,
    worst_a1: f64,
    worst_a2: f64,
    worst_a3: f64,
}

#[derive(Debug, Serialize)]
struct TightnessSummary {
    function: &'static str,
    anchor: [f64; 2],
    grid: usize,
    range: [f64; 2],
    /// Grid points where the EM bound lies above the Bregman bound.
    em_looser_points: usize,
    mean_em_gap: f64,
    mean_bregman_gap: f64,
}

#[derive(Debug, Serialize)]
struct ValidationReport {
    schema_version: u32,
    seed: u64,
    instances: usize,
    samples: usize,
    all_pass: bool,
    summary: Vec<MajorizerSummary>,
    tightness: TightnessSummary,
    reports: Vec<InstanceReport>,
}

const MAJORIZERS: [&str; 8] = [
    "em_log",
    "bregman_loss",
    "lipschitz_quadratic",
    "lipschitz_log",
    "relative_smoothness",
    "concave_tangent",
    "composite_mu",
    "composite_qu",
];

/// Floor of the sampling box for the Burg-type bounds; keeps the barrier's σ finite.
const BARRIER_FLOOR: f64 = 0.1;

fn certify_instance(instance: usize, seed: u64, samples: usize) -> Vec<(usize, MajorizationReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(instance as u64));
    let side = 2 + instance % 2;
    let d = side * side;
    let rows = rng.random_range(3..9);
    let a = DenseMatrix::from_fn(rows, d, |_, _| rng.random_range(0.05..1.0));
    let b: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..5.0)).collect();
    let weight = rng.random_range(0.1..2.0);
    let op = laplacian_2d(side).expect("side ≥ 1");
    let sigma_l = weight * lambda_max(&op, LAMBDA_MAX_TOL, LAMBDA_MAX_ITER).expect("laplacian spectrum").value;
    let quad: Arc<dyn VectorFunction> = Arc::new(QuadraticForm { weight, operator: op });
    let offset = rng.random_range(0.0..0.5) * BARRIER_FLOOR;
    let sigma_r = log_barrier_sigma(offset, BARRIER_FLOOR).expect("offset below floor");
    let barrier: Arc<dyn VectorFunction> = Arc::new(LogBarrier { offset });
    let sparsity: Arc<dyn ScalarFunction> = Arc::new(LogSparsity {
        alpha: rng.random_range(0.5..5.0),
    });
    let sampler = BoxSampler {
        seed: seed ^ (0x9e37_79b9 + instance as u64),
        ..BoxSampler::default()
    };
    let above_floor = BoxSampler {
        lower: BARRIER_FLOOR,
        ..sampler
    };
    let row = a.row(0).to_vec();
    let loss_view = SubproblemView::new(a.clone(), b.clone()).expect("valid view");
    let view = SubproblemView::new(a, b)
        .expect("valid view")
        .with_lipschitz(Arc::clone(&quad), sigma_l)
        .with_relsmooth(Arc::clone(&barrier), sigma_r)
        .with_concave(Arc::clone(&sparsity));

    vec![
        (
            d,
            certify_pair(
                |x| Ok(-dot(&row, x).ln()),
                |x, xt| em_log_bound(&row, x, xt),
                d,
                &sampler,
                samples,
            ),
        ),
        (
            d,
            certify_pair(
                |x| loss_view.loss(x),
                |x, xt| loss_bregman_bound(&loss_view, x, xt),
                d,
                // Burg's curvature 1/x² defeats finite differences right above ε
                &above_floor,
                samples,
            ),
        ),
        (
            d,
            certify_pair(
                |x| Ok(quad.value(x)),
                |x, xt| lipschitz_bound(SurrogateKind::QuQuadratic, quad.as_ref(), sigma_l, x, xt),
                d,
                &sampler,
                samples,
            ),
        ),
        (
            d,
            certify_pair(
                |x| Ok(quad.value(x)),
                |x, xt| lipschitz_bound(SurrogateKind::MuLog, quad.as_ref(), sigma_l, x, xt),
                d,
                &sampler,
                samples,
            ),
        ),
        (
            d,
            certify_pair(
                |x| Ok(barrier.value(x)),
                |x, xt| Ok(relsmooth_bound(barrier.as_ref(), sigma_r, x, xt)),
                d,
                &above_floor,
                samples,
            ),
        ),
        (
            d,
            certify_pair(
                |x| Ok(x.iter().map(|&t| sparsity.value(t)).sum()),
                |x, xt| Ok(concave_bound(sparsity.as_ref(), x, xt)),
                d,
                &sampler,
                samples,
            ),
        ),
        (d, certify_majorization(SurrogateKind::MuLog, &view, &above_floor, samples)),
        (d, certify_majorization(SurrogateKind::QuQuadratic, &view, &above_floor, samples)),
    ]
}

/// Gaps of the EM and Bregman bounds of `−log(0.2x₀ + 0.8x₁)` (plus its linear term)
/// around a fixed anchor, on a `grid × grid` lattice.
fn tightness(grid: usize) -> anyhow::Result<(String, TightnessSummary)> {
    let view = SubproblemView::new(DenseMatrix::from_vec(1, 2, vec![0.2, 0.8])?, vec![1.0])?;
    let anchor = [1.0, 0.5];
    let range = [0.05, 2.0];
    let mut csv = String::from("x0,x1,f,em_gap,bregman_gap\n");
    let (mut looser, mut em_sum, mut br_sum) = (0, 0.0, 0.0);
    let step = if grid > 1 { (range[1] - range[0]) / (grid - 1) as f64 } else { 0.0 };
    for i in 0..grid {
        for j in 0..grid {
            let x = [range[0] + i as f64 * step, range[0] + j as f64 * step];
            let f = view.loss(&x)?;
            let em = loss_surrogate(&view, &x, &anchor)? - f;
            let br = loss_bregman_bound(&view, &x, &anchor)? - f;
            if em > br + 1e-12 * f.abs().max(1.0) {
                looser += 1;
            }
            em_sum += em;
            br_sum += br;
            writeln!(csv, "{:.6},{:.6},{:.12e},{:.12e},{:.12e}", x[0], x[1], f, em, br)?;
        }
    }
    let count = (grid * grid).max(1) as f64;
    Ok((
        csv,
        TightnessSummary {
            function: "log(0.2*x0 + 0.8*x1)",
            anchor,
            grid,
            range,
            em_looser_points: looser,
            mean_em_gap: em_sum / count,
            mean_bregman_gap: br_sum / count,
        },
    ))
}

pub fn run(args: &ValidateArgs) -> anyhow::Result<Outcome> {
    if args.instances == 0 || args.samples == 0 || args.grid == 0 {
        return Err(usage("--instances, --samples and --grid must be positive"));
    }
    let mut reports = Vec::new();
    for instance in 0..args.instances {
        for (name, (dim, report)) in MAJORIZERS.iter().zip(certify_instance(instance, args.seed, args.samples)) {
            reports.push(InstanceReport {
                majorizer: name,
                instance,
                dim,
                passes: report.passes(),
                report,
            });
        }
    }
    let summary: Vec<MajorizerSummary> = MAJORIZERS
        .iter()
        .map(|&name| {
            let group: Vec<&InstanceReport> = reports.iter().filter(|r| r.majorizer == name).collect();
            let worst = |f: fn(&MajorizationReport) -> f64| group.iter().map(|r| f(&r.report)).fold(f64::NEG_INFINITY, f64::max);
            MajorizerSummary {
                majorizer: name,
                instances: group.len(),
                passed: group.iter().filter(|r| r.passes).count(),
                worst_a1: worst(|r| r.max_violation_a1),
                worst_a2: worst(|r| r.max_gap_a2),
                worst_a3: worst(|r| r.max_grad_mismatch_a3),
            }
        })
        .collect();
    let (csv, tight) = tightness(args.grid)?;

    let all_pass = reports.iter().all(|r| r.passes) && tight.em_looser_points == 0;
    let dir = create_dir(&args.out)?;
    std::fs::write(dir.join("tightness.csv"), csv)?;
    for s in &summary {
        println!(
            "{:<20} {}/{} instances pass (worst A1 {:.2e}, A2 {:.1e}, A3 {:.1e})",
            s.majorizer, s.passed, s.instances, s.worst_a1, s.worst_a2, s.worst_a3
        );
    }
    println!(
        "tightness on {}: EM gap above Bregman gap at {} of {} grid points",
        tight.function,
        tight.em_looser_points,
        args.grid * args.grid
    );
    let failing: Vec<&str> = summary.iter().filter(|s| s.passed < s.instances).map(|s| s.majorizer).collect();
    let looser = tight.em_looser_points;
    let report = ValidationReport {
        schema_version: SCHEMA_VERSION,
        seed: args.seed,
        instances: args.instances,
        samples: args.samples,
        all_pass,
        summary,
        tightness: tight,
        reports,
    };
    write_json(&dir.join("majorizers.json"), &report)?;
    if all_pass {
        Ok(Outcome::Success)
    } else if failing.is_empty() {
        Ok(Outcome::Failed(format!("EM bound looser than the Bregman bound at {looser} grid points")))
    } else {
        Ok(Outcome::Failed(format!("majorization violated for: {}", failing.join(", "))))
    }
}
