//! Physics-informed neural networks for 1D two-phase flow in porous media,
//! trained either on fixed collocation grids or with residual-based adaptive
//! enrichment of the collocation sets.

pub mod adaptive;
pub mod diffnet;
pub mod error;
pub mod flow;
pub mod harness;
pub mod optim;
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
