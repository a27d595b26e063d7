//! First-order and quasi-Newton minimizers over flat parameter arrays.

mod adam;
mod lbfgs;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use lbfgs::{
    quasi_newton_minimize, Control, LbfgsConfig, QnMonitor, QnOutcome, QnStatus, QuasiNewtonState,
};

use crate::error::Result;

/// A differentiable scalar objective.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Writes the gradient at `x` into `grad` and returns the value.
    fn value_and_gradient(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// Adapts a closure into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_gradient(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        Ok((self.f)(x, grad))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
