//! Fixed-collocation and adaptive training schedules.
//!
//! Both schedules run Adam on a uniform grid, then L-BFGS on the joint
//! `[v | p | c]` parameter array. The adaptive schedule starts from a coarser
//! grid and, during the quasi-Newton phase, enriches the point sets every
//! `iterations_per_step` iterations until the stopping rule fires.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{
    enrich_from_fields, should_stop, AdaptivityConfig, DenseSets, ResidualFields, ResidualMeans,
};
use crate::error::{Error, Result};
use crate::flow::{
    CostComponents, CostEvaluator, CostWeights, FieldTriple, PointSets, ProblemConfig,
};
use crate::optim::{
    adam_step, quasi_newton_minimize, AdamConfig, AdamState, Control, LbfgsConfig, Objective,
    QnMonitor, QnStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub hidden_layer_sizes: Vec<usize>,
    /// Uniform `(n_x, n_t)` grid of the fixed schedule.
    pub fixed_grid: [usize; 2],
    /// Starting grid of the adaptive schedule.
    pub adaptive_grid: [usize; 2],
    pub adam_log_every: usize,
    pub test_points: usize,
    /// Seed of the held-out test set; independent of the run seed.
    pub test_seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            hidden_layer_sizes: vec![20; 5],
            fixed_grid: [50, 50],
            adaptive_grid: [40, 40],
            adam_log_every: 10,
            test_points: 1000,
            test_seed: 20_220_101,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layer_sizes.is_empty() || self.hidden_layer_sizes.contains(&0) {
            return Err(Error::config(
                "hidden_layer_sizes",
                "need at least one non-empty hidden layer",
            ));
        }
        if self.fixed_grid.iter().any(|&n| n < 2) {
            return Err(Error::config(
                "fixed_grid",
                "needs at least 2 points per axis",
            ));
        }
        if self.adaptive_grid.iter().any(|&n| n < 2) {
            return Err(Error::config(
                "adaptive_grid",
                "needs at least 2 points per axis",
            ));
        }
        if self.adam_log_every == 0 {
            return Err(Error::config("adam_log_every", "must be at least 1"));
        }
        if self.test_points == 0 {
            return Err(Error::config("test_points", "must be at least 1"));
        }
        Ok(())
    }
}

/// Optimizer settings shared by both schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimizers {
    pub adam: AdamConfig,
    pub quasi_newton: LbfgsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adam,
    QuasiNewton,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Adam => "adam",
            Phase::QuasiNewton => "quasi_newton",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub train_cost: f64,
    pub test_cost: f64,
    pub components: CostComponents,
    pub wall_seconds: f64,
    /// `[f1, f2, f3, c_bc, p_bc]`
    pub set_sizes: [usize; 5],
}

/// Sets before and after one enrichment event.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentEvent {
    /// 1-based event counter.
    pub step: usize,
    /// Global iteration index at which the new sets take effect.
    pub iteration: usize,
    pub means: ResidualMeans,
    pub sets: PointSets,
    pub added: PointSets,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub triple: FieldTriple,
    pub records: Vec<TrainRecord>,
    pub events: Vec<EnrichmentEvent>,
    pub initial_sets: PointSets,
    pub final_sets: PointSets,
    pub qn_status: Option<QnStatus>,
    /// Set when training stopped on a non-finite cost.
    pub failure: Option<String>,
}

/// Uniform test points over the space-time domain.
pub fn test_points(n: usize, seed: u64, cfg: &ProblemConfig) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..=cfg.l),
                rng.random_range(0.0..=cfg.t_end),
            )
        })
        .collect()
}

/// The training cost on the current sets, with the PDE terms of a second
/// evaluator measured on the held-out points.
struct TrainingObjective {
    triple: FieldTriple,
    sets: PointSets,
    eval: CostEvaluator,
    test_eval: CostEvaluator,
    test_points: Vec<(f64, f64)>,
    last: CostComponents,
}

impl TrainingObjective {
    fn new(
        triple: FieldTriple,
        sets: PointSets,
        test_points: Vec<(f64, f64)>,
        weights: CostWeights,
        cfg: ProblemConfig,
    ) -> Result<Self> {
        let eval = CostEvaluator::new(&sets, weights, cfg)?;
        let test_eval = CostEvaluator::new(&test_sets(&sets, &test_points), weights, cfg)?;
        Ok(TrainingObjective {
            triple,
            sets,
            eval,
            test_eval,
            test_points,
            last: CostComponents::default(),
        })
    }

    fn replace_sets(&mut self, sets: PointSets) -> Result<()> {
        self.eval = CostEvaluator::new(&sets, *self.eval.weights(), *self.eval.cfg())?;
        self.test_eval = CostEvaluator::new(
            &test_sets(&sets, &self.test_points),
            *self.eval.weights(),
            *self.eval.cfg(),
        )?;
        self.sets = sets;
        Ok(())
    }

    fn test_cost(&self) -> f64 {
        self.test_eval.total(&self.triple)
    }
}

/// PDE terms on the test points; boundary terms on the training boundary sets.
fn test_sets(train: &PointSets, test: &[(f64, f64)]) -> PointSets {
    PointSets {
        f1: test.to_vec(),
        f2: test.to_vec(),
        f3: test.to_vec(),
        c_bc: train.c_bc.clone(),
        p_bc: train.p_bc.clone(),
        v_bc: train.v_bc.clone(),
    }
}

impl Objective for TrainingObjective {
    fn dim(&self) -> usize {
        self.triple.num_params()
    }

    fn value_and_gradient(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.triple.set_flat(x);
        let (total, comps) = self.eval.value_and_gradient(&self.triple, grad)?;
        self.last = comps;
        Ok(total)
    }
}

struct Recorder {
    start: Instant,
    records: Vec<TrainRecord>,
}

impl Recorder {
    fn push(&mut self, iteration: usize, phase: Phase, train_cost: f64, obj: &TrainingObjective) {
        self.records.push(TrainRecord {
            iteration,
            phase,
            train_cost,
            test_cost: obj.test_cost(),
            components: obj.last,
            wall_seconds: self.start.elapsed().as_secs_f64(),
            set_sizes: obj.sets.sizes(),
        });
    }
}

struct Adaptivity<'a> {
    acfg: &'a AdaptivityConfig,
    dense: DenseSets,
    rng: ChaCha8Rng,
    steps_done: usize,
    active: bool,
}

struct QnDriver<'a> {
    recorder: &'a mut Recorder,
    offset: usize,
    adaptivity: Option<Adaptivity<'a>>,
    events: Vec<EnrichmentEvent>,
    on_event: &'a mut dyn FnMut(&EnrichmentEvent) -> Result<()>,
}

impl QnMonitor<TrainingObjective> for QnDriver<'_> {
    fn before_iteration(
        &mut self,
        k: usize,
        x: &[f64],
        obj: &mut TrainingObjective,
    ) -> Result<Control> {
        let Some(ad) = self.adaptivity.as_mut() else {
            return Ok(Control::Continue);
        };
        if !ad.active || !k.is_multiple_of(ad.acfg.iterations_per_step) {
            return Ok(Control::Continue);
        }
        obj.triple.set_flat(x);
        let cfg = *obj.eval.cfg();
        let fields = ResidualFields::evaluate(&obj.triple, &ad.dense, &cfg);
        let means = fields.means();
        if should_stop(&means, ad.steps_done, ad.acfg) {
            log::info!(
                "adaptivity finished after {} enrichment steps at iteration {k}",
                ad.steps_done
            );
            ad.active = false;
            return Ok(Control::Continue);
        }
        let (next, added) =
            enrich_from_fields(&obj.sets, &fields, &ad.dense, ad.acfg, &mut ad.rng)?;
        ad.steps_done += 1;
        let grew = next != obj.sets;
        log::info!(
            "enrichment {} at quasi-Newton iteration {k}: sizes {:?}",
            ad.steps_done,
            next.sizes()
        );
        let event = EnrichmentEvent {
            step: ad.steps_done,
            iteration: self.offset + k,
            means,
            sets: next.clone(),
            added,
        };
        (self.on_event)(&event)?;
        self.events.push(event);
        if !grew {
            return Ok(Control::Continue);
        }
        obj.replace_sets(next)?;
        Ok(Control::ObjectiveChanged)
    }

    fn observe(
        &mut self,
        k: usize,
        x: &[f64],
        value: f64,
        obj: &mut TrainingObjective,
    ) -> Result<()> {
        obj.triple.set_flat(x);
        self.recorder
            .push(self.offset + k, Phase::QuasiNewton, value, obj);
        Ok(())
    }
}

pub fn train_fixed(
    cfg: &ProblemConfig,
    weights: &CostWeights,
    schedule: &Schedule,
    optimizers: &Optimizers,
    seed: u64,
) -> Result<TrainOutcome> {
    let [n_x, n_t] = schedule.fixed_grid;
    let sets = PointSets::uniform_grid(n_x, n_t, cfg);
    run(
        cfg,
        weights,
        schedule,
        optimizers,
        None,
        sets,
        seed,
        &mut |_| Ok(()),
    )
}

pub fn train_adaptive(
    cfg: &ProblemConfig,
    weights: &CostWeights,
    acfg: &AdaptivityConfig,
    schedule: &Schedule,
    optimizers: &Optimizers,
    seed: u64,
) -> Result<TrainOutcome> {
    train_adaptive_with(cfg, weights, acfg, schedule, optimizers, seed, &mut |_| {
        Ok(())
    })
}

/// Adaptive schedule that hands every enrichment event to `on_event` as soon
/// as it happens.
pub fn train_adaptive_with(
    cfg: &ProblemConfig,
    weights: &CostWeights,
    acfg: &AdaptivityConfig,
    schedule: &Schedule,
    optimizers: &Optimizers,
    seed: u64,
    on_event: &mut dyn FnMut(&EnrichmentEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    acfg.validate()?;
    let [n_x, n_t] = schedule.adaptive_grid;
    let sets = PointSets::uniform_grid(n_x, n_t, cfg);
    run(
        cfg,
        weights,
        schedule,
        optimizers,
        Some(acfg),
        sets,
        seed,
        on_event,
    )
}

#[allow(clippy::too_many_arguments)]
fn run(
    cfg: &ProblemConfig,
    weights: &CostWeights,
    schedule: &Schedule,
    optimizers: &Optimizers,
    acfg: Option<&AdaptivityConfig>,
    sets: PointSets,
    seed: u64,
    on_event: &mut dyn FnMut(&EnrichmentEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    schedule.validate()?;
    optimizers.adam.validate()?;
    optimizers.quasi_newton.validate()?;
    sets.validate(cfg)?;

    let triple = FieldTriple::init(&schedule.hidden_layer_sizes, seed)?;
    let tests = test_points(schedule.test_points, schedule.test_seed, cfg);
    let initial_sets = sets.clone();
    let mut obj = TrainingObjective::new(triple, sets, tests, *weights, *cfg)?;
    let mut recorder = Recorder {
        start: Instant::now(),
        records: Vec::new(),
    };

    let mut theta = obj.triple.to_flat();
    let mut grad = vec![0.0; theta.len()];
    let mut adam = AdamState::new(theta.len());
    let adam_cfg = &optimizers.adam;
    let mut failure = None;
    for it in 0..adam_cfg.iterations {
        let f = match obj.value_and_gradient(&theta, &mut grad) {
            Ok(f) => f,
            Err(Error::Numerical(msg)) => {
                failure = Some(format!("Adam iteration {it}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if it % schedule.adam_log_every == 0 {
            recorder.push(it, Phase::Adam, f, &obj);
        }
        if it % 500 == 0 {
            log::info!("Adam iteration {it}: cost {f:e}");
        }
        if let Err(e) = adam_step(&mut theta, &grad, &mut adam, adam_cfg) {
            failure = Some(e.to_string());
            break;
        }
    }

    let mut events = Vec::new();
    let mut qn_status = None;
    if failure.is_none() {
        let adaptivity = acfg.map(|acfg| Adaptivity {
            acfg,
            dense: DenseSets::for_problem(acfg, cfg),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0),
            steps_done: 0,
            active: true,
        });
        let mut driver = QnDriver {
            recorder: &mut recorder,
            offset: adam_cfg.iterations,
            adaptivity,
            events: Vec::new(),
            on_event,
        };
        match quasi_newton_minimize(
            &mut obj,
            theta.clone(),
            &optimizers.quasi_newton,
            &mut driver,
        ) {
            Ok(out) => {
                log::info!(
                    "quasi-Newton stopped after {} iterations ({:?}), cost {:e}",
                    out.iterations,
                    out.status,
                    out.value
                );
                theta = out.x;
                qn_status = Some(out.status);
            }
            Err(Error::Numerical(msg)) => failure = Some(format!("quasi-Newton: {msg}")),
            Err(e) => return Err(e),
        }
        events = driver.events;
    }
    obj.triple.set_flat(&theta);

    Ok(TrainOutcome {
        triple: obj.triple,
        records: recorder.records,
        events,
        initial_sets,
        final_sets: obj.sets,
        qn_status,
        failure,
    })
}
