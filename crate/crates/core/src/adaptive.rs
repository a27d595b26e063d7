//! Residual-based enrichment of collocation and boundary point sets.
//!
//! Each residual is evaluated on a dense candidate set and turned into a
//! discrete density `max(ln(|r| / eps), 0)`, normalized over the candidates.
//! New points are drawn from that density without replacement, skipping
//! candidates already present in the training set, and appended. Every PDE
//! residual and every boundary residual has its own set and its own density.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    boundary_residuals, linspace, BoundaryPoint, FieldTriple, PointSets, ProblemConfig, WallPoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptivityConfig {
    /// Maximum number of enrichment events.
    pub max_steps: usize,
    /// Quasi-Newton iterations between enrichment events.
    pub iterations_per_step: usize,
    pub eps_1: f64,
    pub eps_2: f64,
    pub eps_3: f64,
    pub eps_v: f64,
    pub eps_c: f64,
    pub eps_p: f64,
    /// Residual magnitude below which the density vanishes.
    pub filter_epsilon: f64,
    /// Points drawn per event for every PDE residual set.
    pub points_per_step: usize,
    /// Points drawn per event for every boundary set.
    pub boundary_points_per_step: usize,
    /// Upper bound on the size of each PDE residual set.
    pub max_points_per_set: usize,
    /// Dense candidate grid `(n_x, n_t)`; boundary lines reuse these counts.
    pub dense_resolution: [usize; 2],
}

impl Default for AdaptivityConfig {
    fn default() -> Self {
        AdaptivityConfig {
            max_steps: 9,
            iterations_per_step: 50,
            eps_1: 1e-3,
            eps_2: 1e-3,
            eps_3: 1e-3,
            eps_v: 1e-3,
            eps_c: 1e-3,
            eps_p: 1e-3,
            filter_epsilon: 1e-4,
            points_per_step: 100,
            boundary_points_per_step: 10,
            max_points_per_set: 2500,
            dense_resolution: [200, 200],
        }
    }
}

impl AdaptivityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be at least 1"));
        }
        if self.iterations_per_step == 0 {
            return Err(Error::config("iterations_per_step", "must be at least 1"));
        }
        for (key, v) in [
            ("eps_1", self.eps_1),
            ("eps_2", self.eps_2),
            ("eps_3", self.eps_3),
            ("eps_v", self.eps_v),
            ("eps_c", self.eps_c),
            ("eps_p", self.eps_p),
            ("filter_epsilon", self.filter_epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    key,
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        if self.dense_resolution.iter().any(|&n| n < 2) {
            return Err(Error::config(
                "dense_resolution",
                "needs at least 2 points per axis",
            ));
        }
        Ok(())
    }
}

/// Uniform candidate grid over the space-time domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSet {
    pub points: Vec<(f64, f64)>,
    pub resolution: (usize, usize),
}

impl DenseSet {
    pub fn uniform(n_x: usize, n_t: usize, cfg: &ProblemConfig) -> Self {
        let xs = linspace(0.0, cfg.l, n_x);
        let ts = linspace(0.0, cfg.t_end, n_t);
        let points = ts
            .iter()
            .flat_map(|&t| xs.iter().map(move |&x| (x, t)))
            .collect();
        DenseSet {
            points,
            resolution: (n_x, n_t),
        }
    }
}

/// Candidates for every residual: the space-time grid plus dense boundary
/// and initial lines carrying their target values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSets {
    pub pde: DenseSet,
    pub c_bc: Vec<BoundaryPoint>,
    pub p_bc: Vec<BoundaryPoint>,
    pub v_bc: Vec<WallPoint>,
}

impl DenseSets {
    pub fn for_problem(acfg: &AdaptivityConfig, cfg: &ProblemConfig) -> Self {
        let [n_x, n_t] = acfg.dense_resolution;
        let pde = DenseSet::uniform(n_x, n_t, cfg);
        // Same point layout as the training sets, on the finer lines.
        let lines = PointSets::uniform_grid(n_x, n_t, cfg);
        DenseSets {
            pde,
            c_bc: lines.c_bc,
            p_bc: lines.p_bc,
            v_bc: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub probabilities: Vec<f64>,
    pub filter_epsilon: f64,
    all_below_threshold: bool,
}

impl DensityTable {
    /// True when no candidate exceeds the filter; `probabilities` is then all zero.
    pub fn is_all_below_threshold(&self) -> bool {
        self.all_below_threshold
    }

    pub fn support(&self) -> usize {
        self.probabilities.iter().filter(|&&p| p > 0.0).count()
    }
}

/// `max(ln(|r| / eps), 0)` at every candidate.
pub fn unnormalized_mass(residuals: &[f64], filter_epsilon: f64) -> Vec<f64> {
    residuals
        .iter()
        .map(|r| (r.abs() / filter_epsilon).ln().max(0.0))
        .collect()
}

pub fn build_density(residuals: &[f64], filter_epsilon: f64) -> Result<DensityTable> {
    if !(filter_epsilon.is_finite() && filter_epsilon > 0.0) {
        return Err(Error::config("filter_epsilon", "must be finite and > 0"));
    }
    if let Some(i) = residuals.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numerical(format!(
            "residual {i} is {} on the dense set",
            residuals[i]
        )));
    }
    let mut mass = unnormalized_mass(residuals, filter_epsilon);
    let total: f64 = mass.iter().sum();
    let all_below_threshold = !(total > 0.0);
    if !all_below_threshold {
        mass.iter_mut().for_each(|m| *m /= total);
    }
    Ok(DensityTable {
        probabilities: mass,
        filter_epsilon,
        all_below_threshold,
    })
}

/// Indices drawn without replacement with probability proportional to the
/// table, skipping `excluded` candidates. Uses exponential keys
/// `ln(u) / p`, so the result is a deterministic function of the random
/// stream. Returns fewer than `count` indices when the support is too small.
pub fn draw_indices<R: Rng + ?Sized>(
    density: &DensityTable,
    count: usize,
    rng: &mut R,
    excluded: impl Fn(usize) -> bool,
) -> Vec<usize> {
    if count == 0 || density.all_below_threshold {
        return Vec::new();
    }
    let mut keyed: Vec<(f64, usize)> = Vec::new();
    for (i, &p) in density.probabilities.iter().enumerate() {
        if p <= 0.0 || excluded(i) {
            continue;
        }
        // u in (0, 1]
        let u = 1.0 - rng.random::<f64>();
        keyed.push((u.ln() / p, i));
    }
    if keyed.len() < count {
        log::warn!(
            "requested {count} points but only {} candidates have positive probability",
            keyed.len()
        );
    }
    let take = count.min(keyed.len());
    if take < keyed.len() {
        keyed.select_nth_unstable_by(take, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed.truncate(take);
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

pub fn draw_points<R: Rng + ?Sized>(
    density: &DensityTable,
    dense: &DenseSet,
    count: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    draw_indices(density, count, rng, |_| false)
        .into_iter()
        .map(|i| dense.points[i])
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualMeans {
    pub mu_1: f64,
    pub mu_2: f64,
    pub mu_3: f64,
    pub mu_v: f64,
    pub mu_c: f64,
    pub mu_p: f64,
}

/// Residual values of the current model on every dense set.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFields {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    pub r_c: Vec<f64>,
    pub r_p: Vec<f64>,
    pub r_v: Vec<f64>,
}

fn mean_abs(r: &[f64]) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64
    }
}

impl ResidualFields {
    pub fn evaluate(triple: &FieldTriple, dense: &DenseSets, cfg: &ProblemConfig) -> Self {
        let pde = triple.residuals_at(&dense.pde.points, cfg);
        let bc = boundary_residuals(
            triple,
            &PointSets {
                c_bc: dense.c_bc.clone(),
                p_bc: dense.p_bc.clone(),
                v_bc: dense.v_bc.clone(),
                ..Default::default()
            },
        );
        ResidualFields {
            f1: pde.iter().map(|r| r.f1).collect(),
            f2: pde.iter().map(|r| r.f2).collect(),
            f3: pde.iter().map(|r| r.f3).collect(),
            r_c: bc.r_c,
            r_p: bc.r_p,
            r_v: bc.r_v,
        }
    }

    pub fn means(&self) -> ResidualMeans {
        ResidualMeans {
            mu_1: mean_abs(&self.f1),
            mu_2: mean_abs(&self.f2),
            mu_3: mean_abs(&self.f3),
            mu_v: mean_abs(&self.r_v),
            mu_c: mean_abs(&self.r_c),
            mu_p: mean_abs(&self.r_p),
        }
    }
}

pub fn residual_means(
    triple: &FieldTriple,
    dense: &DenseSets,
    cfg: &ProblemConfig,
) -> ResidualMeans {
    ResidualFields::evaluate(triple, dense, cfg).means()
}

/// True once `m >= max_steps` or every mean is within its tolerance.
pub fn should_stop(means: &ResidualMeans, m: usize, acfg: &AdaptivityConfig) -> bool {
    if m >= acfg.max_steps {
        return true;
    }
    let violated = means.mu_1 > acfg.eps_1
        || means.mu_2 > acfg.eps_2
        || means.mu_3 > acfg.eps_3
        || means.mu_v > acfg.eps_v
        || means.mu_c > acfg.eps_c
        || means.mu_p > acfg.eps_p;
    !violated
}

fn key(x: f64, t: f64) -> (u64, u64) {
    (x.to_bits(), t.to_bits())
}

fn enrich<T: Copy, R: Rng + ?Sized>(
    current: &mut Vec<T>,
    candidates: &[T],
    residuals: &[f64],
    count: usize,
    filter_epsilon: f64,
    coords: impl Fn(&T) -> (f64, f64),
    rng: &mut R,
) -> Result<Vec<T>> {
    if count == 0 || candidates.is_empty() {
        return Ok(Vec::new());
    }
    let density = build_density(residuals, filter_epsilon)?;
    if density.is_all_below_threshold() {
        return Ok(Vec::new());
    }
    let present: HashSet<(u64, u64)> = current
        .iter()
        .map(|p| {
            let (x, t) = coords(p);
            key(x, t)
        })
        .collect();
    let added: Vec<T> = draw_indices(&density, count, rng, |i| {
        let (x, t) = coords(&candidates[i]);
        present.contains(&key(x, t))
    })
    .into_iter()
    .map(|i| candidates[i])
    .collect();
    current.extend_from_slice(&added);
    Ok(added)
}

/// Draws new points for every set from residual fields already evaluated on
/// `dense`. Returns the enlarged sets and the points that were added.
pub fn enrich_from_fields<R: Rng + ?Sized>(
    current: &PointSets,
    fields: &ResidualFields,
    dense: &DenseSets,
    acfg: &AdaptivityConfig,
    rng: &mut R,
) -> Result<(PointSets, PointSets)> {
    let mut next = current.clone();
    let mut added = PointSets::default();
    let eps = acfg.filter_epsilon;
    let pde_count = |len: usize| {
        acfg.points_per_step
            .min(acfg.max_points_per_set.saturating_sub(len))
    };
    let xy = |p: &(f64, f64)| *p;
    let bxy = |b: &BoundaryPoint| (b.x, b.t);

    let n = pde_count(next.f1.len());
    added.f1 = enrich(&mut next.f1, &dense.pde.points, &fields.f1, n, eps, xy, rng)?;
    let n = pde_count(next.f2.len());
    added.f2 = enrich(&mut next.f2, &dense.pde.points, &fields.f2, n, eps, xy, rng)?;
    let n = pde_count(next.f3.len());
    added.f3 = enrich(&mut next.f3, &dense.pde.points, &fields.f3, n, eps, xy, rng)?;
    let n = acfg.boundary_points_per_step;
    added.c_bc = enrich(&mut next.c_bc, &dense.c_bc, &fields.r_c, n, eps, bxy, rng)?;
    added.p_bc = enrich(&mut next.p_bc, &dense.p_bc, &fields.r_p, n, eps, bxy, rng)?;
    added.v_bc = enrich(
        &mut next.v_bc,
        &dense.v_bc,
        &fields.r_v,
        n,
        eps,
        |w: &WallPoint| (w.x, w.t),
        rng,
    )?;
    Ok((next, added))
}

pub fn enrichment_step<R: Rng + ?Sized>(
    current: &PointSets,
    triple: &FieldTriple,
    dense: &DenseSets,
    acfg: &AdaptivityConfig,
    cfg: &ProblemConfig,
    rng: &mut R,
) -> Result<PointSets> {
    let fields = ResidualFields::evaluate(triple, dense, cfg);
    Ok(enrich_from_fields(current, &fields, dense, acfg, rng)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    #[test]
    fn equal_residuals_give_uniform_density() {
        let eps = 1e-4;
        let d = build_density(&[E * eps; 8], eps).unwrap();
        for p in &d.probabilities {
            assert!((p - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_and_e_multiple() {
        let eps = 1e-3;
        let d = build_density(&[eps, -E * eps], eps).unwrap();
        assert_eq!(d.probabilities[0], 0.0);
        assert!((d.probabilities[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_below_threshold_flag() {
        let d = build_density(&[1e-5, -2e-5, 0.0], 1e-4).unwrap();
        assert!(d.is_all_below_threshold());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(draw_indices(&d, 3, &mut rng, |_| false).is_empty());
    }

    #[test]
    fn non_finite_residual_is_rejected() {
        assert!(matches!(
            build_density(&[1.0, f64::NAN], 1e-4),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn point_mass_and_zero_count() {
        let dense = DenseSet {
            points: vec![(0.0, 0.0), (0.5, 0.1), (1.0, 0.2)],
            resolution: (3, 1),
        };
        let d = DensityTable {
            probabilities: vec![1.0, 0.0, 0.0],
            filter_epsilon: 1e-4,
            all_below_threshold: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(draw_points(&d, &dense, 1, &mut rng), vec![(0.0, 0.0)]);
        }
        assert!(draw_points(&d, &dense, 0, &mut rng).is_empty());
        // support of one: a request for two is reduced
        assert_eq!(draw_points(&d, &dense, 2, &mut rng).len(), 1);
    }

    #[test]
    fn uniform_frequencies() {
        let d = build_density(&vec![E; 100], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = [0usize; 100];
        let draws = 100_000;
        for _ in 0..draws {
            hits[draw_indices(&d, 1, &mut rng, |_| false)[0]] += 1;
        }
        for h in hits {
            assert!((h as f64 / draws as f64 - 0.01).abs() < 0.01);
        }
    }

    #[test]
    fn should_stop_logic() {
        let acfg = AdaptivityConfig {
            max_steps: 5,
            ..Default::default()
        };
        let big = ResidualMeans {
            mu_1: 1.0,
            mu_2: 1.0,
            mu_3: 1.0,
            mu_v: 1.0,
            mu_c: 1.0,
            mu_p: 1.0,
        };
        assert!(should_stop(&big, 5, &acfg));
        assert!(should_stop(&ResidualMeans::default(), 0, &acfg));
        let one = ResidualMeans {
            mu_1: 2e-3,
            ..Default::default()
        };
        assert!(!should_stop(&one, 4, &acfg));
    }

    #[test]
    fn means_of_hand_fields() {
        let fields = ResidualFields {
            f1: vec![1.0, -1.0],
            f2: vec![0.0, 0.0],
            f3: vec![0.5, -1.5],
            r_c: vec![],
            r_p: vec![0.25],
            r_v: vec![],
        };
        let m = fields.means();
        assert_eq!(m.mu_1, 1.0);
        assert_eq!(m.mu_2, 0.0);
        assert_eq!(m.mu_3, 1.0);
        assert_eq!(m.mu_v, 0.0);
        assert_eq!(m.mu_c, 0.0);
        assert_eq!(m.mu_p, 0.25);
    }

    fn small_setup() -> (ProblemConfig, PointSets, DenseSets, AdaptivityConfig) {
        let cfg = ProblemConfig::default();
        let acfg = AdaptivityConfig {
            dense_resolution: [30, 30],
            ..Default::default()
        };
        (
            cfg,
            PointSets::uniform_grid(6, 6, &cfg),
            DenseSets::for_problem(&acfg, &cfg),
            acfg,
        )
    }

    #[test]
    fn enrichment_grows_each_valid_set_by_exact_count() {
        let (cfg, sets, dense, acfg) = small_setup();
        let triple = FieldTriple::init(&[8, 8], 1).unwrap();
        let acfg = AdaptivityConfig {
            points_per_step: 50,
            boundary_points_per_step: 5,
            ..acfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fields = ResidualFields::evaluate(&triple, &dense, &cfg);
        let (next, added) = enrich_from_fields(&sets, &fields, &dense, &acfg, &mut rng).unwrap();
        for (before, after, new) in [
            (&sets.f1, &next.f1, &added.f1),
            (&sets.f2, &next.f2, &added.f2),
            (&sets.f3, &next.f3, &added.f3),
        ] {
            assert_eq!(after.len(), before.len() + 50);
            assert_eq!(&after[..before.len()], &before[..]);
            assert_eq!(new.len(), 50);
            assert!(new.iter().all(|&(x, t)| cfg.contains(x, t)));
            assert!(new.iter().all(|p| !before.contains(p)));
        }
        assert_eq!(next.c_bc.len(), sets.c_bc.len() + 5);
        assert_eq!(next.p_bc.len(), sets.p_bc.len() + 5);
        assert!(next.v_bc.is_empty());
    }

    #[test]
    fn zero_points_per_step_is_identity() {
        let (cfg, sets, dense, acfg) = small_setup();
        let triple = FieldTriple::init(&[8], 1).unwrap();
        let acfg = AdaptivityConfig {
            points_per_step: 0,
            boundary_points_per_step: 0,
            ..acfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let next = enrichment_step(&sets, &triple, &dense, &acfg, &cfg, &mut rng).unwrap();
        assert_eq!(next, sets);
    }

    #[test]
    fn below_threshold_residual_leaves_its_set_alone() {
        // f1 concentrated near x = 0.5, f3 numerically zero everywhere.
        let (_, sets, dense, acfg) = small_setup();
        let n = dense.pde.points.len();
        let f1: Vec<f64> = dense
            .pde
            .points
            .iter()
            .map(|&(x, _)| (-(x - 0.5f64).powi(2) / 0.001).exp())
            .collect();
        let fields = ResidualFields {
            f1,
            f2: vec![1.0; n],
            f3: vec![1e-9; n],
            r_c: vec![0.0; dense.c_bc.len()],
            r_p: vec![0.0; dense.p_bc.len()],
            r_v: vec![],
        };
        let acfg = AdaptivityConfig {
            points_per_step: 20,
            ..acfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (next, added) = enrich_from_fields(&sets, &fields, &dense, &acfg, &mut rng).unwrap();
        assert_eq!(next.f1.len(), sets.f1.len() + 20);
        assert!(added.f1.iter().all(|&(x, _)| (x - 0.5).abs() < 0.15));
        assert_eq!(next.f3, sets.f3);
        assert_eq!(next.c_bc, sets.c_bc);
    }

    #[test]
    fn growth_is_capped() {
        let (cfg, sets, dense, acfg) = small_setup();
        let triple = FieldTriple::init(&[8], 2).unwrap();
        let acfg = AdaptivityConfig {
            points_per_step: 30,
            max_points_per_set: sets.f1.len() + 10,
            ..acfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let next = enrichment_step(&sets, &triple, &dense, &acfg, &cfg, &mut rng).unwrap();
        assert_eq!(next.f1.len(), sets.f1.len() + 10);
        let again = enrichment_step(&next, &triple, &dense, &acfg, &cfg, &mut rng).unwrap();
        assert_eq!(again.f1.len(), next.f1.len());
    }

    proptest! {
        #[test]
        fn density_invariants(res in proptest::collection::vec(-10.0f64..10.0, 1..300), eps in 1e-4f64..1.0) {
            let d = build_density(&res, eps).unwrap();
            for (p, r) in d.probabilities.iter().zip(&res) {
                prop_assert!(*p >= 0.0);
                if r.abs() <= eps {
                    prop_assert_eq!(*p, 0.0);
                }
            }
            if !d.is_all_below_threshold() {
                let sum: f64 = d.probabilities.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn scaling_up_increases_mass(res in proptest::collection::vec(-10.0f64..10.0, 1..100), alpha in 1.01f64..100.0) {
            let eps = 1e-2;
            let before = unnormalized_mass(&res, eps);
            let scaled: Vec<f64> = res.iter().map(|r| r * alpha).collect();
            let after = unnormalized_mass(&scaled, eps);
            for ((b, a), r) in before.iter().zip(&after).zip(&res) {
                if r.abs() > eps {
                    prop_assert!(a > b);
                }
            }
        }

        #[test]
        fn draws_are_reproducible(seed in 0u64..500, count in 0usize..20) {
            let res: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
            let d = build_density(&res, 1e-2).unwrap();
            let a = draw_indices(&d, count, &mut ChaCha8Rng::seed_from_u64(seed), |_| false);
            let b = draw_indices(&d, count, &mut ChaCha8Rng::seed_from_u64(seed), |_| false);
            prop_assert_eq!(&a, &b);
            let distinct: HashSet<_> = a.iter().collect();
            prop_assert_eq!(distinct.len(), a.len());
        }
    }
}
