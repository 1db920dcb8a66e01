//! Causally invariant inverse reinforcement learning on tabular MDPs.
//!
//! Maximum-entropy reward recovery from demonstrations collected under
//! several expert preference settings, with a gradient-norm penalty that asks
//! the recovered reward to be simultaneously optimal for every setting.
//! Includes an exact primal trainer, a small adversarial (discriminator)
//! trainer, baselines and a transfer-evaluation harness.

pub mod cli;
pub mod dual;
pub mod error;
pub mod eval;
pub mod features;
pub mod maxent;
pub mod mdp;
pub mod oracles;
pub mod regularizers;
pub mod solver;
pub mod trajectories;

pub use error::{Error, Result};
