//! Shared data model: observed units and run configuration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treated, Arm::Control];

    /// Does a unit with treatment indicator `a` belong to this arm?
    #[inline]
    pub fn contains(self, a: u8) -> bool {
        match self {
            Arm::Treated => a == 1,
            Arm::Control => a == 0,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Treated => "treated",
            Arm::Control => "control",
        })
    }
}

/// Target causal estimand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    /// E[Y1 - Y0]
    #[default]
    Ate,
    /// E[Y1 - Y0 | A = 1]
    Att,
}

/// Unvalidated input: treatment is kept as `f64` so non-binary values can be reported.
#[derive(Debug, Clone, Default)]
pub struct RawDataset {
    pub a: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Validated observational data: treatment, covariates and outcome for `n` units.
///
/// Covariates are stored row-major. No intercept column is stored; the
/// propensity model adds one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    a: Vec<u8>,
    x: Vec<f64>,
    p: usize,
    y: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from binary treatments, covariate rows and outcomes.
    pub fn new(a: Vec<u8>, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        validate_dataset(RawDataset {
            a: a.into_iter().map(f64::from).collect(),
            x,
            y,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Number of covariate columns (excluding the intercept).
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn x_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n()).map(move |i| self.x_row(i))
    }

    pub fn n_treated(&self) -> usize {
        self.a.iter().filter(|&&a| a == 1).count()
    }

    /// Mean outcome among units in `arm`.
    pub fn arm_mean(&self, arm: Arm) -> f64 {
        let (sum, count) = self
            .a
            .iter()
            .zip(&self.y)
            .filter(|(&a, _)| arm.contains(a))
            .fold((0.0, 0usize), |(s, c), (_, &y)| (s + y, c + 1));
        sum / count as f64
    }

    /// Returns a copy with outcomes replaced.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "y",
                expected: self.n(),
                found: y.len(),
            });
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row,
                column: "y".into(),
            });
        }
        Ok(Dataset { y, ..self.clone() })
    }
}

/// Checks every dataset invariant and returns the validated dataset.
///
/// Row indices in errors are zero-based.
pub fn validate_dataset(raw: RawDataset) -> Result<Dataset> {
    let n = raw.a.len();
    if raw.y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "y",
            expected: n,
            found: raw.y.len(),
        });
    }
    if raw.x.len() != n {
        return Err(Error::DimensionMismatch {
            what: "x",
            expected: n,
            found: raw.x.len(),
        });
    }
    if n < 2 {
        return Err(Error::TooFewUnits(n));
    }
    let p = raw.x[0].len();
    let mut a = Vec::with_capacity(n);
    for (row, &v) in raw.a.iter().enumerate() {
        match v {
            v if v == 0.0 => a.push(0u8),
            v if v == 1.0 => a.push(1u8),
            value => return Err(Error::NonBinaryTreatment { row, value }),
        }
    }
    let treated = a.iter().filter(|&&v| v == 1).count();
    if treated == 0 {
        return Err(Error::SingleTreatmentArm(0));
    }
    if treated == n {
        return Err(Error::SingleTreatmentArm(1));
    }
    let mut x = Vec::with_capacity(n * p);
    for (row, xr) in raw.x.iter().enumerate() {
        if xr.len() != p {
            return Err(Error::RaggedRow {
                row,
                expected: p,
                found: xr.len(),
            });
        }
        if let Some(j) = xr.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row,
                column: format!("x{}", j + 1),
            });
        }
        x.extend_from_slice(xr);
    }
    if let Some(row) = raw.y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row,
            column: "y".into(),
        });
    }
    Ok(Dataset { a, x, p, y: raw.y })
}

/// Prior family over the number of strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrataPriorKind {
    #[default]
    Uniform,
    /// Prior mass proportional to K.
    Linear,
}

/// How the learning rate of the loss-based posterior is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum OmegaRule {
    /// Recalibrated for every design at every iteration.
    #[default]
    Calibrated,
    /// Recalibrated during burn-in, then frozen (per K).
    FrozenAfterBurnIn,
    /// A user-supplied constant (0 switches the loss off).
    Fixed(f64),
}

/// Which quantity the reversible-jump acceptance ratio compares between models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceForm {
    /// Loss-based evidence of each model: the unnormalized general posterior
    /// at the drawn value divided by the density it was drawn from.
    #[default]
    Evidence,
    /// Normalized general-posterior densities at the freshly drawn values.
    DrawDensity,
}

/// What a sampler does when a new propensity draw gives an invalid design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidDesignRule {
    /// Keep the previous (valid) propensity draw, i.e. reject the move.
    /// Before the first valid draw the sampler keeps drawing, as for `Resample`.
    #[default]
    Reject,
    /// Keep drawing until the design is valid, up to `max_invalid_designs` tries.
    Resample,
}

/// Hard cap on `burn_in + n_draws`.
pub const MAX_ITERATIONS: usize = 10_000_000;

/// Configuration shared by the Bayesian samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k_max: usize,
    /// Smallest strata count in the prior support.
    pub k_min: usize,
    pub burn_in: usize,
    pub n_draws: usize,
    pub strata_prior: StrataPriorKind,
    /// Prior mean of each arm mean.
    pub theta_prior_mean: f64,
    /// Prior precision of each arm mean; 0 means flat.
    pub theta_prior_precision: f64,
    pub alpha_prior_sd: f64,
    pub base_seed: u64,
    pub overlap_clamp: f64,
    pub omega: OmegaRule,
    pub acceptance: AcceptanceForm,
    /// Consecutive invalid designs tolerated before a chain gives up.
    pub max_invalid_designs: usize,
    pub invalid_design: InvalidDesignRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k_max: 10,
            k_min: 1,
            burn_in: 200,
            n_draws: 2000,
            strata_prior: StrataPriorKind::Uniform,
            theta_prior_mean: 0.0,
            theta_prior_precision: 1e-6,
            alpha_prior_sd: 10.0,
            base_seed: 0,
            overlap_clamp: 0.01,
            omega: OmegaRule::Calibrated,
            acceptance: AcceptanceForm::Evidence,
            max_invalid_designs: 50,
            invalid_design: InvalidDesignRule::Reject,
        }
    }
}

impl RunConfig {
    /// Default maximum strata count for a sample of size `n`.
    ///
    /// Passes through (100, 10), (400, 25) and (800, 40), linear in between
    /// and beyond, and never exceeds `n / 4`.
    pub fn default_k_max(n: usize) -> usize {
        let n_f = n as f64;
        let k = if n_f <= 400.0 {
            10.0 + (n_f - 100.0) * 15.0 / 300.0
        } else {
            25.0 + (n_f - 400.0) * 15.0 / 400.0
        };
        (k.round() as usize).clamp(2, (n / 4).max(2))
    }

    /// Checks the configuration on its own.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k_max < 1 {
            return bad("k_max must be at least 1".into());
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return bad(format!(
                "k_min = {} must lie in 1..={}",
                self.k_min, self.k_max
            ));
        }
        if self.n_draws < 1 {
            return bad("n_draws must be at least 1".into());
        }
        if self.burn_in.saturating_add(self.n_draws) > MAX_ITERATIONS {
            return bad(format!(
                "burn_in + n_draws exceeds the cap of {MAX_ITERATIONS}"
            ));
        }
        if !self.theta_prior_mean.is_finite() {
            return bad("theta_prior_mean must be finite".into());
        }
        if !(self.theta_prior_precision >= 0.0 && self.theta_prior_precision.is_finite()) {
            return bad("theta_prior_precision must be finite and >= 0".into());
        }
        if !(self.alpha_prior_sd > 0.0 && self.alpha_prior_sd.is_finite()) {
            return bad("alpha_prior_sd must be positive".into());
        }
        if !(self.overlap_clamp >= 0.0 && self.overlap_clamp < 0.5) {
            return bad("overlap_clamp must lie in [0, 0.5)".into());
        }
        if let OmegaRule::Fixed(w) = self.omega {
            if !(w >= 0.0 && w.is_finite()) {
                return bad("a fixed learning rate must be finite and >= 0".into());
            }
        }
        Ok(())
    }

    /// Checks the configuration against a dataset of `n` units.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.k_max > 1 && self.k_max > n / 4 {
            return Err(Error::InvalidConfig(format!(
                "k_max = {} exceeds n/4 = {}",
                self.k_max,
                n / 4
            )));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.n_draws
    }
}
