//! Bayesian propensity-score subclassification.
//!
//! Propensity coefficients are sampled by Pólya-Gamma Gibbs updates, units
//! are cut into equal-frequency strata on the sampled scores, and the arm
//! means get a loss-based (general Bayes) posterior. A reversible-jump
//! sampler over the number of strata averages the effect posterior across
//! strata counts. Frequentist baselines and a replication harness for the
//! synthetic studies are included.

pub mod baselines;
pub mod csvio;
pub mod data;
pub mod error;
pub mod gbayes;
pub mod propensity;
pub mod rjmcmc;
pub mod rng;
pub mod sim;
pub mod strata;
pub mod summary;

pub use data::{AcceptanceForm, Arm, Dataset, Estimand, InvalidDesignRule, OmegaRule, RawDataset, RunConfig, StrataPriorKind};
pub use error::{Error, Result};
pub use rng::RngStream;
