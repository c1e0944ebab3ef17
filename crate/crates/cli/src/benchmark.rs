use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use pnmf::data::{generate, DatasetConfig, DatasetKind};
use pnmf::model::{ConstraintSide, GeneralizedSimplex, ProblemSpec, RegularizerSpec};
use pnmf::{laplacian_2d, solve, Algorithm, SolverConfig, Termination};

use crate::common::{create_dir, finite, parse_lambda, usage, write_json, Outcome, SCHEMA_VERSION};

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated row counts n.
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
    pub ns: Vec<usize>,
    /// Comma-separated algorithms.
    #[arg(long, value_delimiter = ',', default_value = "mu,qu,bmd,pgd")]
    pub algos: Vec<Algorithm>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Image side; m = p² stays fixed across the grid.
    #[arg(long, default_value_t = 16)]
    pub p: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Iterations per run (no early stopping).
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value = "smooth")]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 1.0)]
    pub laplacian_weight: f64,
    /// Drop the simplex constraint on the columns of H.
    #[arg(long)]
    pub no_simplex: bool,
    #[arg(long, default_value = "10", value_parser = parse_lambda)]
    pub noise_lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run this many solves at once; timings are then flagged as contended.
    #[arg(long, default_value_t = 1)]
    pub parallel_runs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct RunRecord {
    algorithm: String,
    n: usize,
    repetition: usize,
    data_seed: u64,
    final_objective: Option<f64>,
    iterations: Option<usize>,
    termination: Option<Termination>,
    seconds: f64,
    seconds_per_iteration: Option<f64>,
    seconds_per_100_iterations: Option<f64>,
    dichotomy_iterations: usize,
    dichotomy_iterations_per_iteration: Option<f64>,
    dichotomy_seconds: f64,
    /// Share of update time spent locating dual roots.
    dichotomy_fraction: Option<f64>,
    trace: Option<String>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    algorithm: String,
    n: usize,
    runs: usize,
    failed: usize,
    mean_final_objective: Option<f64>,
    mean_seconds_per_iteration: Option<f64>,
    mean_dichotomy_fraction: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BenchmarkReport {
    schema_version: u32,
    kind: String,
    ns: Vec<usize>,
    k: usize,
    p: usize,
    m: usize,
    reps: usize,
    max_iter: usize,
    laplacian_weight: f64,
    simplex: bool,
    noise_lambda: Option<f64>,
    seed: u64,
    parallel_runs: usize,
    contended: bool,
    runs: Vec<RunRecord>,
    summary: Vec<GroupSummary>,
}

struct Job {
    algorithm: Algorithm,
    n: usize,
    rep: usize,
}

fn data_seed(base: u64, n: usize, rep: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((n as u64) << 20).wrapping_add(rep as u64)
}

fn build_problem(args: &BenchmarkArgs, n: usize, seed: u64) -> anyhow::Result<ProblemSpec> {
    let cfg = DatasetConfig::new(args.kind, n, args.k, args.p)
        .with_noise(args.noise_lambda)
        .with_seed(seed);
    let data = generate(&cfg)?;
    let mut b = ProblemSpec::builder(data.y_noisy, args.k);
    if args.laplacian_weight > 0.0 {
        b = b.reg_h(RegularizerSpec::laplacian_smoothness(args.laplacian_weight, laplacian_2d(args.p)?)?);
    }
    if !args.no_simplex {
        b = b.constraint(GeneralizedSimplex::probability(args.k, ConstraintSide::HColumns)?);
    }
    Ok(b.build()?)
}

fn run_one(args: &BenchmarkArgs, job: &Job, traces: &std::path::Path) -> RunRecord {
    let seed = data_seed(args.seed, job.n, job.rep);
    let mut record = RunRecord {
        algorithm: job.algorithm.name().to_string(),
        n: job.n,
        repetition: job.rep,
        data_seed: seed,
        final_objective: None,
        iterations: None,
        termination: None,
        seconds: 0.0,
        seconds_per_iteration: None,
        seconds_per_100_iterations: None,
        dichotomy_iterations: 0,
        dichotomy_iterations_per_iteration: None,
        dichotomy_seconds: 0.0,
        dichotomy_fraction: None,
        trace: None,
        error: None,
    };
    let outcome = (|| -> anyhow::Result<()> {
        let spec = build_problem(args, job.n, seed)?;
        let config = SolverConfig {
            algorithm: job.algorithm,
            max_iter: args.max_iter,
            rel_tol: 0.0,
            seed: job.rep as u64,
            trace_every: 1,
            ..SolverConfig::default()
        };
        let t0 = std::time::Instant::now();
        let result = solve(&spec, &config)?;
        record.seconds = t0.elapsed().as_secs_f64();
        let iters = result.termination.iterations();
        let name = format!("{}_n{}_r{}.csv", job.algorithm.name(), job.n, job.rep);
        result.trace.write_csv(&traces.join(&name))?;
        record.trace = Some(format!("traces/{name}"));
        record.final_objective = result.trace.final_objective().and_then(finite);
        record.iterations = Some(iters);
        if iters > 0 {
            let per = record.seconds / iters as f64;
            record.seconds_per_iteration = Some(per);
            record.seconds_per_100_iterations = Some(100.0 * per);
            record.dichotomy_iterations_per_iteration = Some(result.trace.dichotomy_iterations as f64 / iters as f64);
        }
        record.dichotomy_iterations = result.trace.dichotomy_iterations;
        record.dichotomy_seconds = result.trace.dichotomy_seconds;
        if result.trace.update_seconds > 0.0 {
            record.dichotomy_fraction = Some(result.trace.dichotomy_seconds / result.trace.update_seconds);
        }
        if let Termination::Failed { reason, .. } = &result.termination {
            record.error = Some(reason.clone());
        }
        record.termination = Some(result.termination);
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(format!("{e:#}"));
    }
    record
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn summarize(args: &BenchmarkArgs, runs: &[RunRecord]) -> Vec<GroupSummary> {
    let mut out = Vec::new();
    for alg in &args.algos {
        for &n in &args.ns {
            let group: Vec<&RunRecord> = runs.iter().filter(|r| r.algorithm == alg.name() && r.n == n).collect();
            let ok: Vec<&&RunRecord> = group.iter().filter(|r| r.error.is_none()).collect();
            out.push(GroupSummary {
                algorithm: alg.name().to_string(),
                n,
                runs: group.len(),
                failed: group.len() - ok.len(),
                mean_final_objective: mean(ok.iter().filter_map(|r| r.final_objective)),
                mean_seconds_per_iteration: mean(ok.iter().filter_map(|r| r.seconds_per_iteration)),
                mean_dichotomy_fraction: mean(ok.iter().filter_map(|r| r.dichotomy_fraction)),
            });
        }
    }
    out
}

pub fn run(args: &BenchmarkArgs) -> anyhow::Result<Outcome> {
    if args.ns.is_empty() || args.ns.contains(&0) {
        return Err(usage("--ns must list positive sizes"));
    }
    if args.algos.is_empty() || args.reps == 0 || args.max_iter == 0 || args.parallel_runs == 0 {
        return Err(usage("--algos, --reps, --max-iter and --parallel-runs must be non-empty/positive"));
    }
    DatasetConfig::new(args.kind, args.ns[0], args.k, args.p)
        .with_noise(args.noise_lambda)
        .validate()
        .map_err(|e| usage(e.to_string()))?;

    let dir = create_dir(&args.out)?;
    let traces = create_dir(&dir.join("traces"))?;
    let mut jobs = Vec::new();
    for &algorithm in &args.algos {
        for &n in &args.ns {
            for rep in 0..args.reps {
                jobs.push(Job { algorithm, n, rep });
            }
        }
    }
    let runs: Vec<RunRecord> = if args.parallel_runs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(args.parallel_runs).build()?;
        pool.install(|| jobs.par_iter().map(|j| run_one(args, j, &traces)).collect())
    } else {
        jobs.iter()
            .map(|j| {
                let r = run_one(args, j, &traces);
                eprintln!(
                    "{} n={} rep={}: {}",
                    r.algorithm,
                    r.n,
                    r.repetition,
                    match (&r.error, r.seconds_per_100_iterations) {
                        (Some(e), _) => format!("failed: {e}"),
                        (None, Some(t)) => format!("{t:.4}s / 100 iterations"),
                        (None, None) => "no iterations".into(),
                    }
                );
                r
            })
            .collect()
    };
    let failed = runs.iter().filter(|r| r.error.is_some()).count();
    let report = BenchmarkReport {
        schema_version: SCHEMA_VERSION,
        kind: format!("{:?}", args.kind).to_lowercase(),
        ns: args.ns.clone(),
        k: args.k,
        p: args.p,
        m: args.p * args.p,
        reps: args.reps,
        max_iter: args.max_iter,
        laplacian_weight: args.laplacian_weight,
        simplex: !args.no_simplex,
        noise_lambda: finite(args.noise_lambda),
        seed: args.seed,
        parallel_runs: args.parallel_runs,
        contended: args.parallel_runs > 1,
        summary: summarize(args, &runs),
        runs,
    };
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "{} runs ({} failed); report at {}",
        report.runs.len(),
        failed,
        dir.join("report.json").display()
    );
    Ok(Outcome::Success)
}
