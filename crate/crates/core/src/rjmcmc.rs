//! Reversible-jump sampler over the number of strata.
//!
//! Each iteration:
//! 1. Gibbs-update the propensity coefficients (skipped for known scores).
//! 2. Build the strata for the current K; if they are invalid, draw new
//!    coefficients until they are not.
//! 3. Propose K* uniformly from the prior support and build its strata.
//! 4. Draw fresh arm means under both K and K*.
//! 5. Accept K* with probability min(1, r); an invalid K* design is rejected.
//!
//! The parameter dimension is the same (two arm means) in every model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AcceptanceForm, Arm, Dataset, Estimand, RunConfig, StrataPriorKind};
use crate::error::{Error, Result};
use crate::summary::PosteriorSummary;
use crate::gbayes::{
    fit_design, next_valid_scores, ArmPair, EffectDraw, GeneralPosteriorParams, OmegaState,
    ScoreSampler, ScoreSource, ThetaPrior,
};
use crate::strata::SortedScores;

/// Prior over K on `{k_min, ..., k_max}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrataPrior {
    pub kind: StrataPriorKind,
    pub k_min: usize,
    pub k_max: usize,
}

impl StrataPrior {
    pub fn new(kind: StrataPriorKind, k_min: usize, k_max: usize) -> Result<Self> {
        if k_min < 1 || k_min > k_max {
            return Err(Error::InvalidConfig(format!(
                "strata prior support {k_min}..={k_max} is empty"
            )));
        }
        Ok(StrataPrior { kind, k_min, k_max })
    }

    pub fn from_config(config: &RunConfig) -> Result<Self> {
        Self::new(config.strata_prior, config.k_min, config.k_max)
    }

    pub fn support(&self) -> std::ops::RangeInclusive<usize> {
        self.k_min..=self.k_max
    }

    pub fn support_len(&self) -> usize {
        self.k_max - self.k_min + 1
    }

    /// Prior probability of `k` (0 outside the support).
    ///
    /// Uniform: 1 / |support|. Linear: k / sum of the support, which is
    /// 2k / (k_max (k_max + 1)) when the support starts at 1.
    pub fn prob(&self, k: usize) -> f64 {
        if !self.support().contains(&k) {
            return 0.0;
        }
        match self.kind {
            StrataPriorKind::Uniform => 1.0 / self.support_len() as f64,
            StrataPriorKind::Linear => {
                let total: usize = self.support().sum();
                k as f64 / total as f64
            }
        }
    }

    /// Jump probability K -> K*; uniform and independent of K.
    pub fn jump_prob(&self, _from: usize, to: usize) -> f64 {
        if self.support().contains(&to) {
            1.0 / self.support_len() as f64
        } else {
            0.0
        }
    }
}

/// Draws K* uniformly from the prior support, independently of the current K.
pub fn propose_k<R: Rng + ?Sized>(prior: &StrataPrior, rng: &mut R) -> usize {
    rng.random_range(prior.support())
}

/// State of the chain after one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RjState {
    pub k: usize,
    /// (treated mean, control mean)
    pub theta: (f64, f64),
    pub last_accept: bool,
    pub log_ratio: f64,
}

impl RjState {
    fn theta_of(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Treated => self.theta.0,
            Arm::Control => self.theta.1,
        }
    }
}

/// log r for moving from `cur` to `prop`.
///
/// `posts_*` are indexed by `Arm as usize`. With [`AcceptanceForm::DrawDensity`]
/// each model contributes its normalized general-posterior densities at its
/// own drawn arm means. With [`AcceptanceForm::Evidence`] each contributes the
/// unnormalized general posterior at the draw divided by the density the draw
/// came from, which equals the model's loss-based evidence for any draw.
pub fn log_accept_ratio(
    cur: &RjState,
    prop: &RjState,
    posts_cur: &ArmPair<GeneralPosteriorParams>,
    posts_prop: &ArmPair<GeneralPosteriorParams>,
    prior: &StrataPrior,
    form: AcceptanceForm,
) -> f64 {
    let model_term = |state: &RjState, posts: &ArmPair<GeneralPosteriorParams>| -> f64 {
        Arm::BOTH
            .iter()
            .map(|&arm| {
                let p = &posts[arm as usize];
                match form {
                    AcceptanceForm::DrawDensity => p.log_density(state.theta_of(arm)),
                    AcceptanceForm::Evidence => p.log_evidence(),
                }
            })
            .sum()
    };
    let log_prior = prior.prob(prop.k).ln() - prior.prob(cur.k).ln();
    let log_jump = prior.jump_prob(prop.k, cur.k).ln() - prior.jump_prob(cur.k, prop.k).ln();
    model_term(prop, posts_prop) - model_term(cur, posts_cur) + log_prior + log_jump
}

/// Output of [`run_rjmcmc`].
#[derive(Debug, Clone, PartialEq)]
pub struct RjOutput {
    pub draws: Vec<EffectDraw>,
    pub alphas: Vec<Vec<f64>>,
    /// Empirical posterior of K over the retained draws, ascending in K
    /// (values never visited are omitted).
    pub k_posterior: Vec<(usize, f64)>,
    pub acceptance_rate: f64,
    pub invalid_resamples: usize,
    /// Proposals rejected because the proposed design was invalid.
    pub invalid_proposals: usize,
}

/// Reversible-jump chain over (K, theta1, theta0) with estimated scores.
pub fn run_rjmcmc<R: Rng + ?Sized>(
    data: &Dataset,
    config: &RunConfig,
    estimand: Estimand,
    rng: &mut R,
) -> Result<RjOutput> {
    run_rjmcmc_with(data, ScoreSource::Estimated, config, estimand, rng)
}

/// [`run_rjmcmc`] with an explicit score source.
pub fn run_rjmcmc_with<R: Rng + ?Sized>(
    data: &Dataset,
    source: ScoreSource<'_>,
    config: &RunConfig,
    estimand: Estimand,
    rng: &mut R,
) -> Result<RjOutput> {
    config.validate_for(data.n())?;
    let prior = StrataPrior::from_config(config)?;
    let theta_prior = ThetaPrior::from_config(config);
    let mut sampler = ScoreSampler::new(data, source, config)?;
    let mut omega = OmegaState::new(config);

    let mut state = RjState {
        k: initial_k(&sampler, data, &prior, estimand)?,
        theta: (f64::NAN, f64::NAN),
        last_accept: false,
        log_ratio: 0.0,
    };
    let mut draws = Vec::with_capacity(config.n_draws);
    let mut alphas = Vec::new();
    let mut accepted = 0usize;
    let mut invalid_resamples = 0usize;
    let mut invalid_proposals = 0usize;

    for r in 0..config.total_iterations() {
        let (sorted, design_cur, skipped) =
            next_valid_scores(&mut sampler, data, state.k, estimand, config, rng)?;
        invalid_resamples += skipped;
        let k_prop = propose_k(&prior, rng);

        let posts_cur = fit_design(data, &design_cur, estimand, theta_prior, &mut omega, r)?;
        let cur = RjState {
            theta: (
                posts_cur[Arm::Treated as usize].sample(rng),
                posts_cur[Arm::Control as usize].sample(rng),
            ),
            ..state
        };

        let design_prop = sorted.design(data.a(), k_prop)?;
        let proposal = match design_prop.require_valid(estimand) {
            Ok(()) => {
                let posts_prop = fit_design(data, &design_prop, estimand, theta_prior, &mut omega, r)?;
                let mut prop = RjState {
                    k: k_prop,
                    theta: (
                        posts_prop[Arm::Treated as usize].sample(rng),
                        posts_prop[Arm::Control as usize].sample(rng),
                    ),
                    last_accept: true,
                    log_ratio: 0.0,
                };
                prop.log_ratio =
                    log_accept_ratio(&cur, &prop, &posts_cur, &posts_prop, &prior, config.acceptance);
                Some(prop)
            }
            Err(_) => {
                invalid_proposals += 1;
                None
            }
        };

        state = match proposal {
            Some(prop) if prop.log_ratio >= 0.0 || rng.random::<f64>().ln() < prop.log_ratio => {
                accepted += 1;
                prop
            }
            Some(prop) => RjState {
                last_accept: false,
                log_ratio: prop.log_ratio,
                ..cur
            },
            None => RjState {
                last_accept: false,
                log_ratio: f64::NEG_INFINITY,
                ..cur
            },
        };

        if r >= config.burn_in {
            let alpha_index = sampler.alpha().map(|a| {
                alphas.push(a.to_vec());
                alphas.len() - 1
            });
            draws.push(EffectDraw::new(state.k, state.theta.0, state.theta.1, alpha_index));
        }
    }

    let k_posterior = k_frequencies(&draws);
    Ok(RjOutput {
        draws,
        alphas,
        k_posterior,
        acceptance_rate: accepted as f64 / config.total_iterations() as f64,
        invalid_resamples,
        invalid_proposals,
    })
}

/// Starting K: 5 clamped to the support. Known scores cannot be redrawn, so
/// there the valid K nearest to 5 is used instead (smaller K on ties).
fn initial_k(
    sampler: &ScoreSampler<'_>,
    data: &Dataset,
    prior: &StrataPrior,
    estimand: Estimand,
) -> Result<usize> {
    let start = 5.clamp(prior.k_min, prior.k_max);
    if sampler.resamplable() {
        return Ok(start);
    }
    let sorted = SortedScores::new(sampler.scores())?;
    let mut candidates: Vec<usize> = prior.support().collect();
    candidates.sort_by_key(|&k| (k.abs_diff(start), k));
    for k in candidates {
        if sorted.design(data.a(), k)?.require_valid(estimand).is_ok() {
            return Ok(k);
        }
    }
    Err(Error::NoValidK { k_max: prior.k_max })
}

/// Relative frequency of each visited K, ascending.
pub fn k_frequencies(draws: &[EffectDraw]) -> Vec<(usize, f64)> {
    let mut counts = BTreeMap::new();
    for d in draws {
        *counts.entry(d.k).or_insert(0usize) += 1;
    }
    let total = draws.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / total)).collect()
}

/// Pooled and per-K summaries of the effect draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAveragedSummary {
    pub pooled: PosteriorSummary,
    /// (K, share of draws, summary of draws at that K), ascending in K.
    pub per_k: Vec<(usize, f64, PosteriorSummary)>,
}

/// Summarizes the effect posterior averaged over K, plus its per-K conditionals.
pub fn model_averaged_posterior(draws: &[EffectDraw]) -> Result<ModelAveragedSummary> {
    if draws.is_empty() {
        return Err(Error::Empty("effect draws"));
    }
    let all: Vec<f64> = draws.iter().map(|d| d.tau_effect).collect();
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for d in draws {
        by_k.entry(d.k).or_default().push(d.tau_effect);
    }
    let per_k = by_k
        .into_iter()
        .map(|(k, v)| {
            let share = v.len() as f64 / draws.len() as f64;
            PosteriorSummary::from_sample(&v).map(|s| (k, share, s))
        })
        .collect::<Result<_>>()?;
    Ok(ModelAveragedSummary {
        pooled: PosteriorSummary::from_sample(&all)?,
        per_k,
    })
}
