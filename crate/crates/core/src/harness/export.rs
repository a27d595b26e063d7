//! CSV files written by a run.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::PointSets;
use crate::train::TrainRecord;

pub const COST_HISTORY: &str = "cost_history.csv";
pub const FRONT: &str = "front.csv";
pub const PRESSURE: &str = "pressure.csv";
pub const COLLOCATION_INITIAL: &str = "collocation_initial.csv";
pub const REPORT: &str = "report.toml";
pub const MANIFEST: &str = "manifest.toml";

pub fn collocation_step_name(step: usize) -> String {
    format!("collocation_step_{step:03}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub iteration: usize,
    pub phase: String,
    pub train_cost: f64,
    pub test_cost: f64,
    pub cost_f1: f64,
    pub cost_f2: f64,
    pub cost_f3: f64,
    pub cost_c: f64,
    pub cost_p: f64,
    pub n_f1: usize,
    pub n_f2: usize,
    pub n_f3: usize,
}

impl From<&TrainRecord> for CostRow {
    fn from(r: &TrainRecord) -> Self {
        CostRow {
            iteration: r.iteration,
            phase: r.phase.as_str().to_string(),
            train_cost: r.train_cost,
            test_cost: r.test_cost,
            cost_f1: r.components.cost_f1,
            cost_f2: r.components.cost_f2,
            cost_f3: r.components.cost_f3,
            cost_c: r.components.cost_c,
            cost_p: r.components.cost_p,
            n_f1: r.set_sizes[0],
            n_f2: r.set_sizes[1],
            n_f3: r.set_sizes[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub t: f64,
    pub x_f_model: f64,
    pub x_f_analytic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureRow {
    pub t_snapshot: f64,
    pub x: f64,
    pub p_model: f64,
    pub p_analytic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFrontRow {
    pub t: f64,
    pub x_f_analytic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPressureRow {
    pub t_snapshot: f64,
    pub x: f64,
    pub p_analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationRow {
    pub set_name: String,
    pub x: f64,
    pub t: f64,
    pub is_new: bool,
}

/// One row per point of every non-empty set, flagged when it is in `added`.
pub fn collocation_rows(sets: &PointSets, added: &PointSets) -> Vec<CollocationRow> {
    fn push(rows: &mut Vec<CollocationRow>, name: &str, all: &[(f64, f64)], new: &[(f64, f64)]) {
        for &(x, t) in all {
            let is_new = new.iter().any(|&(a, b)| a == x && b == t);
            rows.push(CollocationRow {
                set_name: name.to_string(),
                x,
                t,
                is_new,
            });
        }
    }
    let coords =
        |s: &[crate::flow::BoundaryPoint]| s.iter().map(|b| (b.x, b.t)).collect::<Vec<_>>();
    let wall = |s: &[crate::flow::WallPoint]| s.iter().map(|b| (b.x, b.t)).collect::<Vec<_>>();
    let mut rows = Vec::with_capacity(sets.f1.len() + sets.f2.len() + sets.f3.len());
    push(&mut rows, "f1", &sets.f1, &added.f1);
    push(&mut rows, "f2", &sets.f2, &added.f2);
    push(&mut rows, "f3", &sets.f3, &added.f3);
    push(&mut rows, "c_bc", &coords(&sets.c_bc), &coords(&added.c_bc));
    push(&mut rows, "p_bc", &coords(&sets.p_bc), &coords(&added.p_bc));
    push(&mut rows, "v_bc", &wall(&sets.v_bc), &wall(&added.v_bc));
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
