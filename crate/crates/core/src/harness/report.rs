//! Error metrics of a run and side-by-side comparison of two runs.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ProblemConfig;
use crate::harness::manifest::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mode: Mode,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub front_linf: f64,
    pub front_l2: f64,
    pub pressure_l2: f64,
    pub final_train_cost: f64,
    pub final_test_cost: f64,
    pub generalization_gap: f64,
    pub wall_seconds: f64,
    pub quasi_newton_iterations: usize,
    pub enrichment_steps: usize,
    pub problem: ProblemConfig,
}

impl ErrorReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config("report", e.message().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Which side of a comparison did better on one metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
    /// `b - a`
    pub delta: f64,
    pub winner: Option<Winner>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

/// Compares two runs on the same problem; lower is better for every metric.
pub fn compare_runs(a: &ErrorReport, b: &ErrorReport) -> Result<Comparison> {
    if a.problem != b.problem {
        return Err(Error::Comparison(format!(
            "runs solve different problems: {:?} vs {:?}",
            a.problem, b.problem
        )));
    }
    let metrics: [(&'static str, fn(&ErrorReport) -> f64); 7] = [
        ("front_linf", |r| r.front_linf),
        ("front_l2", |r| r.front_l2),
        ("pressure_l2", |r| r.pressure_l2),
        ("final_train_cost", |r| r.final_train_cost),
        ("final_test_cost", |r| r.final_test_cost),
        ("generalization_gap", |r| r.generalization_gap),
        ("wall_seconds", |r| r.wall_seconds),
    ];
    let rows = metrics
        .iter()
        .map(|&(metric, get)| {
            let (va, vb) = (get(a), get(b));
            let winner = if va < vb {
                Some(Winner::A)
            } else if vb < va {
                Some(Winner::B)
            } else {
                None
            };
            ComparisonRow {
                metric,
                a: va,
                b: vb,
                delta: vb - va,
                winner,
            }
        })
        .collect();
    Ok(Comparison {
        label_a: format!("{} (seed {})", a.mode, a.seed),
        label_b: format!("{} (seed {})", b.mode, b.seed),
        rows,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<20} {:>22} {:>22} {:>14}  better",
            "metric", self.label_a, self.label_b, "delta"
        )?;
        for r in &self.rows {
            let better = match r.winner {
                Some(Winner::A) => "a",
                Some(Winner::B) => "b",
                None => "-",
            };
            writeln!(
                f,
                "{:<20} {:>22.6e} {:>22.6e} {:>14.3e}  {better}",
                r.metric, r.a, r.b, r.delta
            )?;
        }
        Ok(())
    }
}
