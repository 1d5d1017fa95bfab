//! Loss-based (general Bayes) posterior of the arm means under a strata design.
//!
//! Each arm mean gets a weighted squared-error loss
//! `loss(theta) = sum_i c_i (y_i - theta)^2` whose weights come from the
//! strata counts:
//!
//! | estimand | treated weight in stratum k | control weight in stratum k |
//! |----------|-----------------------------|-----------------------------|
//! | ATE      | n_k+ / n_1k                 | n_k+ / n_0k                 |
//! | ATT      | 1                           | n_1k / n_0k                 |
//!
//! With a Normal(mu, precision tau) prior, the posterior proportional to
//! `prior(theta) * exp(-omega * loss(theta))` is Normal with precision
//! `tau + omega * sum_i s_i` and mean
//! `(tau * mu + omega * sum_i s_i y_i) / precision`, where `s_i = 2 c_i`.
//! The learning rate `omega` is calibrated so that the posterior variance
//! equals the sandwich variance of the loss minimizer.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, Estimand, InvalidDesignRule, OmegaRule, RunConfig};
use crate::error::{Error, Result};
use crate::propensity::PgGibbs;
use crate::strata::{SortedScores, StrataDesign};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normal prior on an arm mean, parameterized by precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaPrior {
    pub mean: f64,
    /// 0 means a flat (improper) prior.
    pub precision: f64,
}

impl ThetaPrior {
    pub fn flat() -> Self {
        ThetaPrior {
            mean: 0.0,
            precision: 0.0,
        }
    }

    pub fn from_config(config: &RunConfig) -> Self {
        ThetaPrior {
            mean: config.theta_prior_mean,
            precision: config.theta_prior_precision,
        }
    }

    /// Log prior density; 0 for the flat prior.
    pub fn log_density(&self, theta: f64) -> f64 {
        if self.precision == 0.0 {
            0.0
        } else {
            normal_log_density(theta, self.mean, self.precision)
        }
    }
}

fn normal_log_density(x: f64, mean: f64, precision: f64) -> f64 {
    0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * (x - mean) * (x - mean)
}

/// Per-stratum loss weight for units of `arm`.
fn stratum_weights(arm: Arm, d: &StrataDesign, estimand: Estimand) -> Result<Vec<f64>> {
    (0..d.k)
        .map(|s| {
            let (n1, n0, np) = (d.n1[s] as f64, d.n0[s] as f64, d.nplus[s] as f64);
            let empty = |arm| Err(Error::InvalidDesign { stratum: s, arm });
            match (estimand, arm) {
                (Estimand::Ate, Arm::Treated) if d.n1[s] == 0 => empty(Arm::Treated),
                (Estimand::Ate, Arm::Treated) => Ok(np / n1),
                (Estimand::Ate, Arm::Control) if d.n0[s] == 0 => empty(Arm::Control),
                (Estimand::Ate, Arm::Control) => Ok(np / n0),
                (Estimand::Att, Arm::Treated) => Ok(1.0),
                (Estimand::Att, Arm::Control) if d.n1[s] == 0 => Ok(0.0),
                (Estimand::Att, Arm::Control) if d.n0[s] == 0 => empty(Arm::Control),
                (Estimand::Att, Arm::Control) => Ok(n1 / n0),
            }
        })
        .collect()
}

/// Per-unit loss weights `c_i` (zero outside `arm`).
pub fn unit_weights(arm: Arm, data: &Dataset, d: &StrataDesign, estimand: Estimand) -> Result<Vec<f64>> {
    let w = stratum_weights(arm, d, estimand)?;
    Ok(data
        .a()
        .iter()
        .zip(&d.labels)
        .map(|(&a, &s)| if arm.contains(a) { w[s] } else { 0.0 })
        .collect())
}

/// Weighted squared-error loss of arm `arm` at `theta`.
pub fn loss(arm: Arm, theta: f64, data: &Dataset, d: &StrataDesign, estimand: Estimand) -> Result<f64> {
    let c = unit_weights(arm, data, d, estimand)?;
    Ok(c.iter()
        .zip(data.y())
        .map(|(c, y)| c * (y - theta) * (y - theta))
        .sum())
}

/// Sufficient statistics of one arm's loss under one design.
#[derive(Debug, Clone)]
struct ArmStats {
    c: Vec<f64>,
    sum_c: f64,
    theta_hat: f64,
    /// sum_i c_i^2 (y_i - theta_hat)^2
    sum_c2r2: f64,
    /// loss at theta_hat
    min_loss: f64,
}

impl ArmStats {
    fn new(arm: Arm, data: &Dataset, d: &StrataDesign, estimand: Estimand) -> Result<Self> {
        let c = unit_weights(arm, data, d, estimand)?;
        let y = data.y();
        let sum_c: f64 = c.iter().sum();
        let sum_cy: f64 = c.iter().zip(y).map(|(c, y)| c * y).sum();
        let theta_hat = sum_cy / sum_c;
        let (sum_c2r2, min_loss) = c.iter().zip(y).fold((0.0, 0.0), |(q, l), (c, y)| {
            let r2 = (y - theta_hat) * (y - theta_hat);
            (q + c * c * r2, l + c * r2)
        });
        Ok(ArmStats {
            c,
            sum_c,
            theta_hat,
            sum_c2r2,
            min_loss,
        })
    }

    fn calibrated_omega(&self, arm: Arm) -> Result<f64> {
        if self.sum_c2r2 <= 0.0 {
            return Err(Error::DegenerateOutcome { arm });
        }
        Ok(self.sum_c / (2.0 * self.sum_c2r2))
    }

    fn posterior(&self, data: &Dataset, omega: f64, prior: ThetaPrior) -> GeneralPosteriorParams {
        let s: Vec<f64> = self.c.iter().map(|c| 2.0 * c).collect();
        let sum_s = 2.0 * self.sum_c;
        let sum_sy: f64 = s.iter().zip(data.y()).map(|(s, y)| s * y).sum();
        let tau_tilde = prior.precision + omega * sum_s;
        let mu_tilde = if tau_tilde > 0.0 {
            (prior.precision * prior.mean + omega * sum_sy) / tau_tilde
        } else {
            self.theta_hat
        };
        GeneralPosteriorParams {
            mu_tilde,
            tau_tilde,
            s,
            omega,
            theta_hat: self.theta_hat,
            min_loss: self.min_loss,
            prior,
        }
    }
}

/// Minimizer of the arm loss: the weighted mean of the arm's outcomes.
pub fn loss_argmin(arm: Arm, data: &Dataset, d: &StrataDesign, estimand: Estimand) -> Result<f64> {
    Ok(ArmStats::new(arm, data, d, estimand)?.theta_hat)
}

/// Learning rate matching the posterior variance to the sandwich variance.
///
/// For loss weights `c_i` this is `sum_i c_i / (2 sum_i c_i^2 (y_i - theta_hat)^2)`;
/// under ATE `sum_i c_i = n`, giving `1 / (2/n sum_i c_i^2 r_i^2)`.
pub fn calibrate_omega(
    arm: Arm,
    theta_hat: f64,
    data: &Dataset,
    d: &StrataDesign,
    estimand: Estimand,
) -> Result<f64> {
    let c = unit_weights(arm, data, d, estimand)?;
    let sum_c: f64 = c.iter().sum();
    let q: f64 = c
        .iter()
        .zip(data.y())
        .map(|(c, y)| c * c * (y - theta_hat) * (y - theta_hat))
        .sum();
    if q <= 0.0 {
        return Err(Error::DegenerateOutcome { arm });
    }
    Ok(sum_c / (2.0 * q))
}

/// Closed-form loss-based posterior of one arm mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralPosteriorParams {
    pub mu_tilde: f64,
    /// Posterior precision; 0 only when both the prior and the loss are switched off.
    pub tau_tilde: f64,
    #[serde(skip)]
    pub s: Vec<f64>,
    pub omega: f64,
    pub theta_hat: f64,
    pub min_loss: f64,
    pub prior: ThetaPrior,
}

impl GeneralPosteriorParams {
    /// True when the posterior is the improper flat density.
    pub fn is_flat(&self) -> bool {
        self.tau_tilde == 0.0
    }

    /// Normalized log density; 0 everywhere for the flat posterior.
    pub fn log_density(&self, theta: f64) -> f64 {
        if self.is_flat() {
            0.0
        } else {
            normal_log_density(theta, self.mu_tilde, self.tau_tilde)
        }
    }

    /// Loss at `theta`, from the stored minimum.
    pub fn loss_at(&self, theta: f64) -> f64 {
        let half_sum_s = 0.5 * self.s.iter().sum::<f64>();
        self.min_loss + half_sum_s * (theta - self.theta_hat) * (theta - self.theta_hat)
    }

    /// log(prior(theta)) - omega * loss(theta).
    pub fn log_unnormalized(&self, theta: f64) -> f64 {
        self.prior.log_density(theta) - self.omega * self.loss_at(theta)
    }

    /// log of the normalizing integral of `prior(theta) * exp(-omega * loss(theta))`.
    pub fn log_evidence(&self) -> f64 {
        if self.is_flat() {
            return 0.0;
        }
        let data_precision = self.tau_tilde - self.prior.precision;
        let fit = -self.omega * self.min_loss;
        if self.prior.precision == 0.0 {
            fit + 0.5 * (LN_2PI - self.tau_tilde.ln())
        } else {
            let shrink = self.prior.precision * data_precision / self.tau_tilde;
            let gap = self.theta_hat - self.prior.mean;
            fit + 0.5 * (self.prior.precision / self.tau_tilde).ln() - 0.5 * shrink * gap * gap
        }
    }

    /// One posterior draw; the flat posterior returns the loss minimizer.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_flat() {
            self.mu_tilde
        } else {
            let z: f64 = rng.sample(StandardNormal);
            self.mu_tilde + z / self.tau_tilde.sqrt()
        }
    }
}

/// Posterior parameters of arm `arm` for a given learning rate and prior.
pub fn posterior_params(
    arm: Arm,
    data: &Dataset,
    d: &StrataDesign,
    omega: f64,
    prior: ThetaPrior,
    estimand: Estimand,
) -> Result<GeneralPosteriorParams> {
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {omega} must be finite and >= 0")));
    }
    if !(prior.precision >= 0.0 && prior.precision.is_finite()) {
        return Err(Error::InvalidConfig("prior precision must be finite and >= 0".into()));
    }
    Ok(ArmStats::new(arm, data, d, estimand)?.posterior(data, omega, prior))
}

/// Posterior pair for a design, indexed by `Arm as usize` (control first).
pub(crate) type ArmPair<T> = [T; 2];

/// Learning-rate bookkeeping for a chain, including the freeze-after-burn-in rule.
#[derive(Debug, Clone)]
pub(crate) struct OmegaState {
    rule: OmegaRule,
    burn_in: usize,
    frozen: std::collections::HashMap<usize, ArmPair<f64>>,
    last: std::collections::HashMap<usize, ArmPair<f64>>,
}

impl OmegaState {
    pub(crate) fn new(config: &RunConfig) -> Self {
        OmegaState {
            rule: config.omega,
            burn_in: config.burn_in,
            frozen: Default::default(),
            last: Default::default(),
        }
    }

    fn omega(&mut self, k: usize, iteration: usize, stats: &ArmPair<ArmStats>) -> Result<ArmPair<f64>> {
        let calibrate = || -> Result<ArmPair<f64>> {
            Ok([
                stats[0].calibrated_omega(Arm::Control)?,
                stats[1].calibrated_omega(Arm::Treated)?,
            ])
        };
        match self.rule {
            OmegaRule::Fixed(w) => Ok([w, w]),
            OmegaRule::Calibrated => calibrate(),
            OmegaRule::FrozenAfterBurnIn => {
                if iteration < self.burn_in {
                    let w = calibrate()?;
                    self.last.insert(k, w);
                    return Ok(w);
                }
                if let Some(w) = self.frozen.get(&k) {
                    return Ok(*w);
                }
                let w = match self.last.get(&k) {
                    Some(w) => *w,
                    None => calibrate()?,
                };
                self.frozen.insert(k, w);
                Ok(w)
            }
        }
    }
}

/// Both arms' posteriors for one design at one iteration.
pub(crate) fn fit_design(
    data: &Dataset,
    d: &StrataDesign,
    estimand: Estimand,
    prior: ThetaPrior,
    omega_state: &mut OmegaState,
    iteration: usize,
) -> Result<ArmPair<GeneralPosteriorParams>> {
    let stats = [
        ArmStats::new(Arm::Control, data, d, estimand)?,
        ArmStats::new(Arm::Treated, data, d, estimand)?,
    ];
    let w = omega_state.omega(d.k, iteration, &stats)?;
    Ok([
        stats[0].posterior(data, w[0], prior),
        stats[1].posterior(data, w[1], prior),
    ])
}

/// One joint draw of the arm means and their difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectDraw {
    pub k: usize,
    pub theta1: f64,
    pub theta0: f64,
    pub tau_effect: f64,
    /// Index into the chain's retained propensity draws; `None` for known scores.
    pub alpha_index: Option<usize>,
}

impl EffectDraw {
    pub fn new(k: usize, theta1: f64, theta0: f64, alpha_index: Option<usize>) -> Self {
        EffectDraw {
            k,
            theta1,
            theta0,
            tau_effect: theta1 - theta0,
            alpha_index,
        }
    }
}

/// Where the propensity scores come from.
#[derive(Debug, Clone, Copy)]
pub enum ScoreSource<'a> {
    /// Sampled each iteration by Pólya-Gamma Gibbs updates.
    Estimated,
    /// Fixed, externally supplied scores (no design uncertainty).
    Known(&'a [f64]),
}

/// Produces the score vector of each iteration.
pub(crate) enum ScoreSampler<'a> {
    Estimated {
        gibbs: PgGibbs<'a>,
        alpha: Vec<f64>,
        scores: Vec<f64>,
        /// Whether `alpha` has produced a valid design yet.
        has_valid: bool,
    },
    Known(&'a [f64]),
}

/// A saved propensity state to fall back on when a move is rejected.
pub(crate) struct ScoreSnapshot {
    alpha: Vec<f64>,
    scores: Vec<f64>,
}

impl<'a> ScoreSampler<'a> {
    pub(crate) fn new(data: &'a Dataset, source: ScoreSource<'a>, config: &RunConfig) -> Result<Self> {
        match source {
            ScoreSource::Known(scores) => {
                if scores.len() != data.n() {
                    return Err(Error::DimensionMismatch {
                        what: "scores",
                        expected: data.n(),
                        found: scores.len(),
                    });
                }
                Ok(ScoreSampler::Known(scores))
            }
            ScoreSource::Estimated => {
                let gibbs = PgGibbs::new(data, config.alpha_prior_sd);
                let alpha = gibbs.initial_alpha();
                Ok(ScoreSampler::Estimated {
                    gibbs,
                    alpha,
                    scores: Vec::new(),
                    has_valid: false,
                })
            }
        }
    }

    /// Moves to the next propensity draw (no-op for known scores).
    pub(crate) fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if let ScoreSampler::Estimated { gibbs, alpha, scores, .. } = self {
            let draw = gibbs.step(alpha, rng)?;
            *alpha = draw.alpha;
            *scores = draw.scores;
        }
        Ok(())
    }

    pub(crate) fn scores(&self) -> &[f64] {
        match self {
            ScoreSampler::Estimated { scores, .. } => scores,
            ScoreSampler::Known(s) => s,
        }
    }

    pub(crate) fn alpha(&self) -> Option<&[f64]> {
        match self {
            ScoreSampler::Estimated { alpha, .. } => Some(alpha),
            ScoreSampler::Known(_) => None,
        }
    }

    pub(crate) fn resamplable(&self) -> bool {
        matches!(self, ScoreSampler::Estimated { .. })
    }

    fn snapshot(&self) -> Option<ScoreSnapshot> {
        match self {
            ScoreSampler::Estimated {
                alpha,
                scores,
                has_valid: true,
                ..
            } => Some(ScoreSnapshot {
                alpha: alpha.clone(),
                scores: scores.clone(),
            }),
            _ => None,
        }
    }

    fn restore(&mut self, snap: ScoreSnapshot) {
        if let ScoreSampler::Estimated { alpha, scores, .. } = self {
            *alpha = snap.alpha;
            *scores = snap.scores;
        }
    }

    fn mark_valid(&mut self) {
        if let ScoreSampler::Estimated { has_valid, .. } = self {
            *has_valid = true;
        }
    }
}

/// Moves the score sampler to its next state with a valid design for `k`.
///
/// Under [`InvalidDesignRule::Reject`] an invalid proposal is discarded and
/// the previous valid state kept; under `Resample`, or before any valid state
/// exists, the sampler keeps drawing. Returns the sorted scores, the design
/// and the number of invalid proposals. Known scores cannot be redrawn, so an
/// invalid design is an error there.
pub(crate) fn next_valid_scores<R: Rng + ?Sized>(
    sampler: &mut ScoreSampler<'_>,
    data: &Dataset,
    k: usize,
    estimand: Estimand,
    config: &RunConfig,
    rng: &mut R,
) -> Result<(SortedScores, StrataDesign, usize)> {
    let mut invalid = 0;
    loop {
        let previous = match config.invalid_design {
            InvalidDesignRule::Reject => sampler.snapshot(),
            InvalidDesignRule::Resample => None,
        };
        sampler.advance(rng)?;
        let sorted = SortedScores::new(sampler.scores())?;
        let d = sorted.design(data.a(), k)?;
        match d.require_valid(estimand) {
            Ok(()) => {
                sampler.mark_valid();
                return Ok((sorted, d, invalid));
            }
            Err(e) if !sampler.resamplable() => return Err(e),
            Err(_) => {
                invalid += 1;
                if let Some(prev) = previous {
                    sampler.restore(prev);
                    let sorted = SortedScores::new(sampler.scores())?;
                    let d = sorted.design(data.a(), k)?;
                    if d.require_valid(estimand).is_ok() {
                        return Ok((sorted, d, invalid));
                    }
                }
                if invalid > config.max_invalid_designs {
                    return Err(Error::TooManyInvalidDesigns { k, attempts: invalid });
                }
            }
        }
    }
}

/// Output of a fixed-K chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Post-burn-in draws.
    pub draws: Vec<EffectDraw>,
    /// Propensity coefficients behind each retained draw (empty for known scores).
    pub alphas: Vec<Vec<f64>>,
    /// Propensity proposals discarded because they produced an invalid design.
    pub invalid_resamples: usize,
}

/// Two-step sampler at fixed K with estimated scores.
///
/// Every iteration: Gibbs-update alpha, build the strata, calibrate the
/// learning rates, then draw each arm mean from its Normal posterior.
pub fn two_step_chain<R: Rng + ?Sized>(
    data: &Dataset,
    k: usize,
    config: &RunConfig,
    estimand: Estimand,
    rng: &mut R,
) -> Result<ChainOutput> {
    two_step_chain_with(data, ScoreSource::Estimated, k, config, estimand, rng)
}

/// [`two_step_chain`] with an explicit score source.
pub fn two_step_chain_with<R: Rng + ?Sized>(
    data: &Dataset,
    source: ScoreSource<'_>,
    k: usize,
    config: &RunConfig,
    estimand: Estimand,
    rng: &mut R,
) -> Result<ChainOutput> {
    config.validate()?;
    if k == 0 || k > data.n() {
        return Err(Error::TooManyStrata { k, n: data.n() });
    }
    let prior = ThetaPrior::from_config(config);
    let mut sampler = ScoreSampler::new(data, source, config)?;
    let mut omega = OmegaState::new(config);
    let mut out = ChainOutput {
        draws: Vec::with_capacity(config.n_draws),
        alphas: Vec::new(),
        invalid_resamples: 0,
    };
    for r in 0..config.total_iterations() {
        let (_, design, skipped) =
            next_valid_scores(&mut sampler, data, k, estimand, config, rng)?;
        out.invalid_resamples += skipped;
        let posts = fit_design(data, &design, estimand, prior, &mut omega, r)?;
        let theta1 = posts[Arm::Treated as usize].sample(rng);
        let theta0 = posts[Arm::Control as usize].sample(rng);
        if r >= config.burn_in {
            let alpha_index = sampler.alpha().map(|a| {
                out.alphas.push(a.to_vec());
                out.alphas.len() - 1
            });
            out.draws.push(EffectDraw::new(k, theta1, theta0, alpha_index));
        }
    }
    Ok(out)
}
