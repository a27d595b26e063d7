//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The driver exposes a monitor hook before every iteration. The hook may
//! replace the objective (for instance by growing the collocation sets); the
//! curvature memory is then dropped because pairs from another objective no
//! longer satisfy the secant relation for the new one.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{dot, Objective};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
    /// Stop once the largest gradient component falls to this value.
    pub gradient_tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 50,
            max_iterations: 3000,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
            gradient_tolerance: 1e-10,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::config("memory", "must be at least 1"));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::config("c1", "need 0 < c1 < c2 < 1"));
        }
        if self.max_line_search == 0 {
            return Err(Error::config("max_line_search", "must be at least 1"));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(Error::config("gradient_tolerance", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    rho: f64,
}

/// Curvature memory of the two-loop recursion.
#[derive(Debug, Clone)]
pub struct QuasiNewtonState {
    memory: usize,
    pairs: VecDeque<CurvaturePair>,
}

impl QuasiNewtonState {
    pub fn new(memory: usize) -> Self {
        QuasiNewtonState {
            memory,
            pairs: VecDeque::with_capacity(memory),
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores `(s, y)` if `s . y > 0`; returns whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 0.0) || !sy.is_finite() {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back(CurvaturePair {
            s,
            y,
            rho: 1.0 / sy,
        });
        true
    }

    /// `-H g` with the scaled-identity initial inverse Hessian.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alpha = vec![0.0; self.pairs.len()];
        for (i, p) in self.pairs.iter().enumerate().rev() {
            let a = p.rho * dot(&p.s, &q);
            alpha[i] = a;
            q.iter_mut().zip(&p.y).for_each(|(q, y)| *q -= a * y);
        }
        if let Some(last) = self.pairs.back() {
            let gamma = 1.0 / (last.rho * dot(&last.y, &last.y));
            q.iter_mut().for_each(|q| *q *= gamma);
        }
        for (i, p) in self.pairs.iter().enumerate() {
            let b = p.rho * dot(&p.y, &q);
            let coef = alpha[i] - b;
            q.iter_mut().zip(&p.s).for_each(|(q, s)| *q += coef * s);
        }
        q.iter_mut().for_each(|q| *q = -*q);
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// The objective was modified in place; re-evaluate and drop curvature memory.
    ObjectiveChanged,
    Stop,
}

/// Hooks called by [`quasi_newton_minimize`] at every iteration `k`, where
/// `k` counts accepted steps.
pub trait QnMonitor<O: ?Sized> {
    /// Runs before the iterate is recorded; may mutate the objective.
    fn before_iteration(&mut self, _k: usize, _x: &[f64], _objective: &mut O) -> Result<Control> {
        Ok(Control::Continue)
    }

    /// Sees the (possibly re-evaluated) cost of iterate `k`.
    fn observe(&mut self, _k: usize, _x: &[f64], _value: f64, _objective: &mut O) -> Result<()> {
        Ok(())
    }
}

impl<O: ?Sized> QnMonitor<O> for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QnStatus {
    GradientConverged,
    MaxIterations,
    LineSearchFailed,
    Stopped,
}

#[derive(Debug, Clone)]
pub struct QnOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: QnStatus,
    /// Curvature memory at exit.
    pub state: QuasiNewtonState,
}

struct Evaluator<'a, O: ?Sized> {
    objective: &'a mut O,
    count: usize,
}

impl<O: Objective + ?Sized> Evaluator<'_, O> {
    /// Non-finite values are mapped to `+inf` so the line search backs off.
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.count += 1;
        match self.objective.value_and_gradient(x, grad) {
            Ok(v) if v.is_finite() && grad.iter().all(|g| g.is_finite()) => Ok(v),
            Ok(_) | Err(Error::Numerical(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }
}

pub fn quasi_newton_minimize<O, M>(
    objective: &mut O,
    x0: Vec<f64>,
    cfg: &LbfgsConfig,
    monitor: &mut M,
) -> Result<QnOutcome>
where
    O: Objective + ?Sized,
    M: QnMonitor<O> + ?Sized,
{
    cfg.validate()?;
    let n = x0.len();
    let mut ev = Evaluator {
        objective,
        count: 0,
    };
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = ev.eval(&x, &mut g)?;
    if !f.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut state = QuasiNewtonState::new(cfg.memory);
    let mut k = 0;
    let mut retrying = false;

    let status = loop {
        if !retrying {
            match monitor.before_iteration(k, &x, ev.objective)? {
                Control::Continue => {}
                Control::ObjectiveChanged => {
                    f = ev.eval(&x, &mut g)?;
                    if !f.is_finite() {
                        return Err(Error::Numerical(
                            "objective became non-finite after modification".into(),
                        ));
                    }
                    state.clear();
                }
                Control::Stop => break QnStatus::Stopped,
            }
            monitor.observe(k, &x, f, ev.objective)?;
            if g.iter().all(|gi| gi.abs() <= cfg.gradient_tolerance) {
                break QnStatus::GradientConverged;
            }
            if k >= cfg.max_iterations {
                break QnStatus::MaxIterations;
            }
        }
        retrying = false;

        let mut d = state.direction(&g);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            state.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let step0 = if state.is_empty() {
            (1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt()).min(1.0)
        } else {
            1.0
        };

        match strong_wolfe(&mut ev, &x, f, slope, &d, step0, cfg)? {
            Some(acc) => {
                let s: Vec<f64> = acc.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = acc.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
                state.push(s, y);
                x = acc.x;
                g = acc.grad;
                f = acc.value;
                k += 1;
            }
            None if !state.is_empty() => {
                log::debug!(
                    "line search failed at iteration {k}; restarting from steepest descent"
                );
                state.clear();
                retrying = true;
            }
            None => break QnStatus::LineSearchFailed,
        }
    };

    Ok(QnOutcome {
        x,
        value: f,
        iterations: k,
        evaluations: ev.count,
        status,
        state,
    })
}

struct Accepted {
    x: Vec<f64>,
    grad: Vec<f64>,
    value: f64,
}

struct Trial {
    step: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

fn strong_wolfe<O: Objective + ?Sized>(
    ev: &mut Evaluator<'_, O>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    step0: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<Accepted>> {
    let n = x.len();
    let probe = |step: f64, ev: &mut Evaluator<'_, O>| -> Result<Trial> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
        let mut gt = vec![0.0; n];
        let value = ev.eval(&xt, &mut gt)?;
        let slope = if value.is_finite() {
            dot(&gt, d)
        } else {
            f64::NAN
        };
        Ok(Trial {
            step,
            value,
            slope,
            x: xt,
            grad: gt,
        })
    };
    let armijo = |t: &Trial| t.value <= f0 + cfg.c1 * t.step * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -cfg.c2 * slope0;
    let accept = |t: Trial| {
        Some(Accepted {
            x: t.x,
            grad: t.grad,
            value: t.value,
        })
    };

    let mut prev = Trial {
        step: 0.0,
        value: f0,
        slope: slope0,
        x: x.to_vec(),
        grad: Vec::new(),
    };
    let mut step = step0;
    let mut budget = cfg.max_line_search;

    let (mut lo, mut hi) = loop {
        if budget == 0 {
            return Ok(None);
        }
        budget -= 1;
        let t = probe(step, ev)?;
        if !armijo(&t) || (prev.step > 0.0 && t.value >= prev.value) {
            break (prev, t);
        }
        if curvature(&t) {
            return Ok(accept(t));
        }
        if t.slope >= 0.0 {
            break (t, prev);
        }
        step *= 2.0;
        prev = t;
    };

    // zoom: `lo` satisfies sufficient decrease and has the lowest value seen;
    // the minimizer lies between lo.step and hi.step.
    while budget > 0 {
        budget -= 1;
        let (a, b) = (lo.step.min(hi.step), lo.step.max(hi.step));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1e-300) {
            return Ok(None);
        }
        let guess = if hi.value.is_finite() && hi.slope.is_finite() {
            cubic_minimizer(lo.step, lo.value, lo.slope, hi.step, hi.value, hi.slope)
        } else {
            None
        };
        let step = match guess {
            Some(s) if s > a + 0.1 * width && s < b - 0.1 * width => s,
            _ => 0.5 * (a + b),
        };
        let t = probe(step, ev)?;
        if !armijo(&t) || t.value >= lo.value {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(accept(t));
            }
            if t.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    Ok(None)
}

/// Minimizer of the cubic interpolating values and slopes at two steps.
fn cubic_minimizer(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64) -> Option<f64> {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let disc = d1 * d1 - g1 * g2;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = disc.sqrt().copysign(x2 - x1);
    let s = x2 - (x2 - x1) * (g2 + d2 - d1) / (g2 - g1 + 2.0 * d2);
    s.is_finite().then_some(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::FnObjective;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    struct Check {
        last: f64,
        pairs_ok: bool,
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let mut obj = FnObjective::new(2, rosenbrock);
        let out =
            quasi_newton_minimize(&mut obj, vec![-1.2, 1.0], &LbfgsConfig::default(), &mut ())
                .unwrap();
        assert!(out.value < 1e-8, "{:?} {}", out.status, out.value);
        assert!((out.x[0] - 1.0).abs() < 1e-3 && (out.x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn separable_quadratic_reaches_analytic_minimum() {
        let n = 10;
        let mut obj = FnObjective::new(n, |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for j in 0..x.len() {
                let r = x[j] - j as f64;
                g[j] = 2.0 * r;
                f += r * r;
            }
            f
        });
        let out = quasi_newton_minimize(&mut obj, vec![0.0; n], &LbfgsConfig::default(), &mut ())
            .unwrap();
        assert!(out.value < 1e-12, "{}", out.value);
        for (j, v) in out.x.iter().enumerate() {
            assert!((v - j as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn starting_at_minimizer_stops_immediately() {
        let mut obj = FnObjective::new(3, |x: &[f64], g: &mut [f64]| {
            g.iter_mut().zip(x).for_each(|(g, x)| *g = 2.0 * (x - 1.0));
            x.iter().map(|x| (x - 1.0).powi(2)).sum()
        });
        let out = quasi_newton_minimize(&mut obj, vec![1.0; 3], &LbfgsConfig::default(), &mut ())
            .unwrap();
        assert_eq!(out.status, QnStatus::GradientConverged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.evaluations, 1);
    }

    impl<O: Objective> QnMonitor<O> for Check {
        fn observe(&mut self, _k: usize, _x: &[f64], value: f64, _o: &mut O) -> Result<()> {
            assert!(value <= self.last, "{value} > {}", self.last);
            self.last = value;
            Ok(())
        }
    }

    #[test]
    fn accepted_iterates_descend_and_pairs_are_curved() {
        let mut obj = FnObjective::new(2, rosenbrock);
        let mut check = Check {
            last: f64::INFINITY,
            pairs_ok: true,
        };
        let cfg = LbfgsConfig {
            memory: 3,
            ..Default::default()
        };
        let out = quasi_newton_minimize(&mut obj, vec![-1.2, 1.0], &cfg, &mut check).unwrap();
        for p in out.state.pairs() {
            check.pairs_ok &= dot(&p.s, &p.y) > 0.0;
        }
        assert!(check.pairs_ok);
        assert!(out.state.len() <= 3);
    }

    #[test]
    fn monitor_can_stop_and_change_objective() {
        struct Shift(usize);
        impl QnMonitor<FnObjective<Box<dyn FnMut(&[f64], &mut [f64]) -> f64>>> for Shift {
            fn before_iteration(
                &mut self,
                k: usize,
                _x: &[f64],
                _o: &mut FnObjective<Box<dyn FnMut(&[f64], &mut [f64]) -> f64>>,
            ) -> Result<Control> {
                self.0 += 1;
                Ok(if k == 3 {
                    Control::Stop
                } else {
                    Control::ObjectiveChanged
                })
            }
        }
        let f: Box<dyn FnMut(&[f64], &mut [f64]) -> f64> = Box::new(rosenbrock);
        let mut obj = FnObjective::new(2, f);
        let mut mon = Shift(0);
        let out =
            quasi_newton_minimize(&mut obj, vec![-1.2, 1.0], &LbfgsConfig::default(), &mut mon)
                .unwrap();
        assert_eq!(out.status, QnStatus::Stopped);
        assert_eq!(out.iterations, 3);
        assert_eq!(mon.0, 4);
        // memory is wiped on every change, so only the last step's pair survives
        assert!(out.state.len() <= 1);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut obj = FnObjective::new(1, |_: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            f64::NAN
        });
        assert!(
            quasi_newton_minimize(&mut obj, vec![0.0], &LbfgsConfig::default(), &mut ()).is_err()
        );
    }

    #[test]
    fn cubic_minimizer_of_a_parabola() {
        // f = (s - 0.3)^2 sampled at 0 and 1
        let s = cubic_minimizer(0.0, 0.09, -0.6, 1.0, 0.49, 1.4).unwrap();
        assert!((s - 0.3).abs() < 1e-12);
    }
}
