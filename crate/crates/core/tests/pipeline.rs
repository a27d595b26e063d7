use std::path::Path;

use porous_pinn::harness::export::*;
use porous_pinn::harness::{
    compare_runs, expected_files, run_experiment, ErrorReport, Mode, RunManifest, RunStatus,
};

fn tiny(mode: Mode, out: &Path) -> RunManifest {
    let mut m = RunManifest::with_defaults(mode, 3, out);
    m.adam.iterations = 30;
    m.quasi_newton.max_iterations = 40;
    m.schedule.hidden_layer_sizes = vec![6, 6];
    m.schedule.fixed_grid = [10, 10];
    m.schedule.adaptive_grid = [8, 8];
    m.schedule.test_points = 100;
    m.adaptivity.iterations_per_step = 10;
    m.adaptivity.points_per_step = 8;
    m.adaptivity.boundary_points_per_step = 2;
    m.adaptivity.dense_resolution = [25, 25];
    m.adaptivity.max_steps = 3;
    m.evaluation.front_samples = 11;
    m.evaluation.pressure_points = 21;
    m
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn fixed_run_writes_declared_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny(Mode::Fixed, dir.path())).unwrap();
    assert_eq!(report.status, RunStatus::Completed);
    assert!(report.front_linf.is_finite() && report.front_linf >= 0.0);
    assert!(report.front_l2 <= report.front_linf);
    assert!(report.pressure_l2.is_finite());
    assert_eq!(report.enrichment_steps, 0);

    let mut expected = expected_files(0);
    expected.sort();
    assert_eq!(listing(dir.path()), expected);

    let history: Vec<CostRow> = read_csv(&dir.path().join(COST_HISTORY)).unwrap();
    assert!(history
        .iter()
        .all(|r| r.n_f1 == 100 && r.n_f2 == 100 && r.n_f3 == 100));
    let front: Vec<FrontRow> = read_csv(&dir.path().join(FRONT)).unwrap();
    assert_eq!(front.len(), 11);
    let pressure: Vec<PressureRow> = read_csv(&dir.path().join(PRESSURE)).unwrap();
    assert_eq!(pressure.len(), 4 * 21);
    assert_eq!(ErrorReport::read(&dir.path().join(REPORT)).unwrap(), report);
}

#[test]
fn adaptive_run_writes_one_snapshot_per_event() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny(Mode::Adaptive, dir.path())).unwrap();
    assert!(report.enrichment_steps >= 1);
    let mut expected = expected_files(report.enrichment_steps);
    expected.sort();
    assert_eq!(listing(dir.path()), expected);

    let initial: Vec<CollocationRow> = read_csv(&dir.path().join(COLLOCATION_INITIAL)).unwrap();
    assert_eq!(initial.iter().filter(|r| r.set_name == "f1").count(), 64);
    let first: Vec<CollocationRow> = read_csv(&dir.path().join(collocation_step_name(1))).unwrap();
    let new_f1 = first
        .iter()
        .filter(|r| r.set_name == "f1" && r.is_new)
        .count();
    assert_eq!(
        first.iter().filter(|r| r.set_name == "f1").count(),
        64 + new_f1
    );
    assert!(new_f1 > 0 && new_f1 <= 8);
}

#[test]
fn rerun_in_same_directory_replaces_stale_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(Mode::Adaptive, dir.path())).unwrap();
    let report = run_experiment(&tiny(Mode::Fixed, dir.path())).unwrap();
    let mut expected = expected_files(report.enrichment_steps);
    expected.sort();
    assert_eq!(listing(dir.path()), expected);
}

#[test]
fn identical_manifests_give_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&tiny(Mode::Adaptive, a.path())).unwrap();
    run_experiment(&tiny(Mode::Adaptive, b.path())).unwrap();
    for name in listing(a.path()).iter().filter(|n| n.ends_with(".csv")) {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn divergence_keeps_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny(Mode::Fixed, dir.path());
    // One Adam step moves every weight by ~1e300, so v^2 overflows.
    m.adam.learning_rate = 1e300;
    let report = run_experiment(&m).unwrap();
    assert_eq!(report.status, RunStatus::Diverged);
    assert!(report.failure.is_some());
    assert!(dir.path().join(COST_HISTORY).exists());
    assert!(dir.path().join(REPORT).exists());
}

#[test]
fn fixed_and_adaptive_reports_compare() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny(Mode::Fixed, a.path())).unwrap();
    let rb = run_experiment(&tiny(Mode::Adaptive, b.path())).unwrap();
    let c = compare_runs(&ra, &rb).unwrap();
    assert_eq!(c.rows.len(), 7);
    let row = c.row("front_linf").unwrap();
    assert_eq!(row.delta, rb.front_linf - ra.front_linf);
}
