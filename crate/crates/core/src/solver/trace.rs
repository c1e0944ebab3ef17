use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const TRACE_CSV_HEADER: &str =
    "iter,objective,kl_part,constraint_violation,min_w,min_h,gamma,seconds,dichotomy_iters";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub kl_part: f64,
    pub constraint_violation: f64,
    pub min_w: f64,
    pub min_h: f64,
    /// `(γ_W, γ_H)` under line search.
    pub gamma: Option<(f64, f64)>,
    pub seconds: f64,
    /// Dichotomy iterations spent during this outer iteration.
    pub dichotomy_iters: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
    /// Objective after every outer iteration, recorded or not (index 0 = initialization).
    pub objectives: Vec<f64>,
    pub dichotomy_iterations: usize,
    pub dichotomy_seconds: f64,
    pub update_seconds: f64,
}

impl SolverTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objectives.last().copied()
    }

    /// Largest relative increase `(f_{t+1} − f_t)/max(|f_t|, 1)` along the full objective history.
    pub fn max_relative_increase(&self) -> f64 {
        self.objectives
            .windows(2)
            .map(|p| (p[1] - p[0]) / p[0].abs().max(1.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_monotone(&self, slack: f64) -> bool {
        self.objectives.len() < 2 || self.max_relative_increase() <= slack
    }

    /// First iteration whose objective is at or below `level`.
    pub fn first_reaching(&self, level: f64) -> Option<usize> {
        self.objectives.iter().position(|&f| f <= level)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let gamma = r.gamma.map(|(gw, gh)| format!("{gw:e};{gh:e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:e},{:e},{:e},{},{:.6e},{}",
                r.iter, r.objective, r.kl_part, r.constraint_violation, r.min_w, r.min_h, gamma, r.seconds, r.dichotomy_iters
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        // non-finite values (e.g. an empty block minimum) become null
        serde_json::to_string_pretty(self).unwrap_or_else(|_| "{}".into())
    }
}
