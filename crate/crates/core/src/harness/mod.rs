//! End-to-end runs: load a manifest, train, measure against the closed form
//! and write everything needed for plotting.

pub mod export;
pub mod manifest;
pub mod report;

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::{linspace, FieldTriple, ProblemConfig};
use crate::oracle::{
    front_from_model, front_position, pressure_exact, FRONT_BISECTION_TOL, FRONT_SCAN_POINTS,
};
use crate::train::{train_adaptive_with, train_fixed, TrainOutcome};

use export::*;
pub use manifest::{
    load_manifest, load_manifest_with, EvaluationConfig, Mode, Overrides, RunManifest,
};
pub use report::{compare_runs, Comparison, ErrorReport, RunStatus, Winner};

/// Front errors of a model against the closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontComparison {
    pub rows: Vec<FrontRow>,
    pub linf: f64,
    pub l2: f64,
}

/// Model front on the evaluation window. Where `c` never crosses 0.5 the
/// front is pinned to the inlet or the outlet depending on the inlet value.
pub fn compare_front(
    triple: &FieldTriple,
    cfg: &ProblemConfig,
    eval: &EvaluationConfig,
) -> Result<FrontComparison> {
    let [a, b] = eval.front_window;
    let mut rows = Vec::with_capacity(eval.front_samples);
    for t in linspace(a, b, eval.front_samples) {
        let x_f_analytic = front_position(t, cfg)?;
        if x_f_analytic > cfg.l {
            continue;
        }
        let x_f_model = front_from_model(
            &triple.c_net,
            t,
            cfg,
            FRONT_SCAN_POINTS,
            FRONT_BISECTION_TOL,
        )
        .unwrap_or_else(|| {
            if triple.c_net.forward(0.0, t)[0] >= 0.5 {
                cfg.l
            } else {
                0.0
            }
        });
        rows.push(FrontRow {
            t,
            x_f_model,
            x_f_analytic,
        });
    }
    let errs: Vec<f64> = rows
        .iter()
        .map(|r| (r.x_f_model - r.x_f_analytic).abs())
        .collect();
    Ok(FrontComparison {
        linf: errs.iter().cloned().fold(0.0, f64::max),
        l2: rms(&errs),
        rows,
    })
}

pub fn compare_pressure(
    triple: &FieldTriple,
    cfg: &ProblemConfig,
    eval: &EvaluationConfig,
) -> Result<(Vec<PressureRow>, f64)> {
    let xs = linspace(0.0, cfg.l, eval.pressure_points);
    let mut rows = Vec::with_capacity(xs.len() * eval.pressure_times.len());
    for &t in &eval.pressure_times {
        let points: Vec<(f64, f64)> = xs.iter().map(|&x| (x, t)).collect();
        for (s, &x) in triple.p_net.samples(&points).iter().zip(&xs) {
            rows.push(PressureRow {
                t_snapshot: t,
                x,
                p_model: s.value,
                p_analytic: pressure_exact(x, t, cfg)?,
            });
        }
    }
    let errs: Vec<f64> = rows.iter().map(|r| r.p_model - r.p_analytic).collect();
    Ok((rows, rms(&errs)))
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

/// Names of every file a run leaves in its output directory.
pub fn expected_files(enrichment_steps: usize) -> Vec<String> {
    let mut names: Vec<String> = [
        MANIFEST,
        COST_HISTORY,
        FRONT,
        PRESSURE,
        COLLOCATION_INITIAL,
        REPORT,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((1..=enrichment_steps).map(collocation_step_name));
    names
}

/// Removes files an earlier run may have left behind under our names.
fn clear_previous(out: &Path) -> Result<()> {
    let entries = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ours = [
            MANIFEST,
            COST_HISTORY,
            FRONT,
            PRESSURE,
            COLLOCATION_INITIAL,
            REPORT,
        ]
        .contains(&name.as_str())
            || (name.starts_with("collocation_step_") && name.ends_with(".csv"));
        if ours {
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

/// Trains as the manifest says and writes the run directory. A diverged run
/// still writes its partial history and is reported with
/// [`RunStatus::Diverged`].
pub fn run_experiment(m: &RunManifest) -> Result<ErrorReport> {
    m.validate()?;
    let out = m.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    clear_previous(out)?;
    std::fs::write(out.join(MANIFEST), m.to_toml())
        .map_err(|e| Error::io(out.join(MANIFEST), e))?;

    let start = Instant::now();
    let opt = m.optimizers();
    let outcome = match m.mode {
        Mode::Fixed => train_fixed(&m.problem, &m.weights, &m.schedule, &opt, m.seed)?,
        Mode::Adaptive => {
            let mut write_event = |e: &crate::train::EnrichmentEvent| {
                write_csv(
                    &out.join(collocation_step_name(e.step)),
                    &collocation_rows(&e.sets, &e.added),
                )
            };
            train_adaptive_with(
                &m.problem,
                &m.weights,
                &m.adaptivity,
                &m.schedule,
                &opt,
                m.seed,
                &mut write_event,
            )?
        }
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    write_outputs(m, &outcome, wall_seconds)
}

fn write_outputs(
    m: &RunManifest,
    outcome: &TrainOutcome,
    wall_seconds: f64,
) -> Result<ErrorReport> {
    let out = m.out.as_path();
    write_csv(
        &out.join(COLLOCATION_INITIAL),
        &collocation_rows(&outcome.initial_sets, &outcome.initial_sets),
    )?;
    let cost_rows: Vec<CostRow> = outcome.records.iter().map(CostRow::from).collect();
    write_csv(&out.join(COST_HISTORY), &cost_rows)?;

    let front = compare_front(&outcome.triple, &m.problem, &m.evaluation)?;
    write_csv(&out.join(FRONT), &front.rows)?;
    let (pressure_rows, pressure_l2) =
        compare_pressure(&outcome.triple, &m.problem, &m.evaluation)?;
    write_csv(&out.join(PRESSURE), &pressure_rows)?;

    let (train, test) = outcome
        .records
        .last()
        .map_or((f64::NAN, f64::NAN), |r| (r.train_cost, r.test_cost));
    let report = ErrorReport {
        mode: m.mode,
        seed: m.seed,
        status: if outcome.failure.is_some() {
            RunStatus::Diverged
        } else {
            RunStatus::Completed
        },
        failure: outcome.failure.clone(),
        front_linf: front.linf,
        front_l2: front.l2,
        pressure_l2,
        final_train_cost: train,
        final_test_cost: test,
        generalization_gap: (train - test).abs(),
        wall_seconds,
        quasi_newton_iterations: outcome
            .records
            .iter()
            .filter(|r| r.phase == crate::train::Phase::QuasiNewton)
            .count()
            .saturating_sub(1),
        enrichment_steps: outcome.events.len(),
        problem: m.problem,
    };
    report.write(&out.join(REPORT))?;
    Ok(report)
}

/// Writes the closed-form front and pressure snapshots only.
pub fn export_oracle(cfg: &ProblemConfig, eval: &EvaluationConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    eval.validate(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut front = Vec::with_capacity(eval.front_samples);
    for t in linspace(0.0, cfg.t_end, eval.front_samples) {
        front.push(AnalyticFrontRow {
            t,
            x_f_analytic: front_position(t, cfg)?,
        });
    }
    write_csv(&out.join(FRONT), &front)?;
    let mut pressure = Vec::new();
    for &t in &eval.pressure_times {
        for x in linspace(0.0, cfg.l, eval.pressure_points) {
            pressure.push(AnalyticPressureRow {
                t_snapshot: t,
                x,
                p_analytic: pressure_exact(x, t, cfg)?,
            });
        }
    }
    write_csv(&out.join(PRESSURE), &pressure)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_export_has_analytic_columns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProblemConfig::default();
        export_oracle(&cfg, &EvaluationConfig::default(), dir.path()).unwrap();
        let front: Vec<AnalyticFrontRow> = read_csv(&dir.path().join(FRONT)).unwrap();
        assert_eq!(front.len(), 81);
        assert_eq!(front[0].x_f_analytic, 0.0);
        let p: Vec<AnalyticPressureRow> = read_csv(&dir.path().join(PRESSURE)).unwrap();
        assert_eq!(p.len(), 4 * 101);
        assert_eq!(p[0].p_analytic, cfg.p_in);
    }

    #[test]
    fn expected_files_list_every_step() {
        let names = expected_files(2);
        assert_eq!(names.len(), 8);
        assert!(names.contains(&"collocation_step_002.csv".to_string()));
    }
}
