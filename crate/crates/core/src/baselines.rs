//! Frequentist and bootstrap comparators.
//!
//! Standard errors treat the propensity scores as fixed.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, Estimand};
use crate::error::{Error, Result};
use crate::gbayes::unit_weights;
use crate::strata::{SortedScores, StrataDesign};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

/// Which estimator produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Ipw,
    SubclassFreq,
    /// Plug-in MSE selection of K, a stand-in for the Orihara-Hamada rule.
    SubclassSelect,
    GbayesFixed,
    GbayesRjmcmc,
    Llb,
}

impl MethodTag {
    pub const ALL: [MethodTag; 6] = [
        MethodTag::Ipw,
        MethodTag::SubclassFreq,
        MethodTag::SubclassSelect,
        MethodTag::GbayesFixed,
        MethodTag::GbayesRjmcmc,
        MethodTag::Llb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Ipw => "ipw",
            MethodTag::SubclassFreq => "subclass-freq",
            MethodTag::SubclassSelect => "subclass-select",
            MethodTag::GbayesFixed => "gbayes-fixed",
            MethodTag::GbayesRjmcmc => "gbayes-rjmcmc",
            MethodTag::Llb => "llb",
        }
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        MethodTag::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

/// Point estimate with a Wald interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub tau_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method_tag: MethodTag,
}

impl PointEstimate {
    pub fn wald(tau_hat: f64, se: f64, method_tag: MethodTag) -> Self {
        PointEstimate {
            tau_hat,
            se,
            ci_low: tau_hat - Z_975 * se,
            ci_high: tau_hat + Z_975 * se,
            method_tag,
        }
    }
}

/// Hájek IPW estimate of the ATE.
///
/// Each arm mean is a normalized weighted mean; its variance is the
/// fixed-weights sandwich `sum w_i^2 (y_i - mu)^2 / (sum w_i)^2`.
pub fn ipw_hajek(data: &Dataset, scores: &[f64]) -> Result<PointEstimate> {
    if scores.len() != data.n() {
        return Err(Error::DimensionMismatch {
            what: "scores",
            expected: data.n(),
            found: scores.len(),
        });
    }
    if let Some((row, &value)) = scores
        .iter()
        .enumerate()
        .find(|(_, e)| !(e.is_finite() && **e > 0.0 && **e < 1.0))
    {
        return Err(Error::ScoreOutOfRange { row, value });
    }
    let arm_estimate = |arm: Arm| -> (f64, f64) {
        let w: Vec<(f64, f64)> = data
            .a()
            .iter()
            .zip(scores)
            .zip(data.y())
            .filter(|((&a, _), _)| arm.contains(a))
            .map(|((_, &e), &y)| {
                let w = match arm {
                    Arm::Treated => 1.0 / e,
                    Arm::Control => 1.0 / (1.0 - e),
                };
                (w, y)
            })
            .collect();
        let sum_w: f64 = w.iter().map(|(w, _)| w).sum();
        let mu = w.iter().map(|(w, y)| w * y).sum::<f64>() / sum_w;
        let var = w.iter().map(|(w, y)| w * w * (y - mu) * (y - mu)).sum::<f64>() / (sum_w * sum_w);
        (mu, var)
    };
    let (m1, v1) = arm_estimate(Arm::Treated);
    let (m0, v0) = arm_estimate(Arm::Control);
    Ok(PointEstimate::wald(m1 - m0, (v1 + v0).sqrt(), MethodTag::Ipw))
}

/// Within-stratum arm means and variances.
struct StratumMoments {
    mean: [Vec<f64>; 2],
    var: [Vec<f64>; 2],
}

fn stratum_moments(data: &Dataset, d: &StrataDesign) -> StratumMoments {
    let k = d.k;
    let mut sum = [vec![0.0; k], vec![0.0; k]];
    for ((&a, &s), &y) in data.a().iter().zip(&d.labels).zip(data.y()) {
        sum[a as usize][s] += y;
    }
    let count = |arm: usize, s: usize| if arm == 1 { d.n1[s] } else { d.n0[s] } as f64;
    let mean: [Vec<f64>; 2] = [0, 1].map(|arm| (0..k).map(|s| sum[arm][s] / count(arm, s)).collect());
    let mut ss = [vec![0.0; k], vec![0.0; k]];
    for ((&a, &s), &y) in data.a().iter().zip(&d.labels).zip(data.y()) {
        let r = y - mean[a as usize][s];
        ss[a as usize][s] += r * r;
    }
    // Singleton cells borrow the arm's pooled within-stratum variance.
    let var = [0, 1].map(|arm| {
        let (pool_ss, pool_df) = (0..k).fold((0.0, 0.0), |(p, df), s| {
            let c = count(arm, s);
            (p + ss[arm][s], df + (c - 1.0).max(0.0))
        });
        let pooled = if pool_df > 0.0 { pool_ss / pool_df } else { 0.0 };
        (0..k)
            .map(|s| {
                let c = count(arm, s);
                if c > 1.0 {
                    ss[arm][s] / (c - 1.0)
                } else {
                    pooled
                }
            })
            .collect()
    });
    StratumMoments { mean, var }
}

/// Subclassification estimate of the ATE at a fixed design.
pub fn subclass_point(data: &Dataset, d: &StrataDesign) -> Result<PointEstimate> {
    subclass_point_for(data, d, Estimand::Ate)
}

/// Subclassification estimate for either estimand.
///
/// The ATE weights stratum differences by `n_k+ / n`, the ATT by
/// `n_1k / n_1`. The variance is the stratified two-sample formula
/// `sum_k w_k^2 (s_1k^2 / n_1k + s_0k^2 / n_0k)`.
pub fn subclass_point_for(data: &Dataset, d: &StrataDesign, estimand: Estimand) -> Result<PointEstimate> {
    d.require_valid(estimand)?;
    let m = stratum_moments(data, d);
    let n = d.n() as f64;
    let n1_total = d.n1.iter().sum::<usize>() as f64;
    let mut tau = 0.0;
    let mut var = 0.0;
    for s in 0..d.k {
        let w = match estimand {
            Estimand::Ate => d.nplus[s] as f64 / n,
            Estimand::Att => d.n1[s] as f64 / n1_total,
        };
        if w == 0.0 {
            continue;
        }
        tau += w * (m.mean[1][s] - m.mean[0][s]);
        var += w * w * (m.var[1][s] / d.n1[s] as f64 + m.var[0][s] / d.n0[s] as f64);
    }
    Ok(PointEstimate::wald(tau, var.sqrt(), MethodTag::SubclassFreq))
}

/// Criterion value of one candidate K in [`select_k_plugin`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate {
    pub k: usize,
    pub tau_hat: f64,
    pub se: f64,
    pub criterion: f64,
}

/// Result of [`select_k_plugin`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub k: usize,
    pub estimate: PointEstimate,
    /// The reference K whose estimate serves as the low-bias anchor.
    pub k_reference: usize,
    pub candidates: Vec<SelectionCandidate>,
}

/// Plug-in MSE selection of the number of strata.
///
/// For every valid K in `2..=k_max` the squared bias is approximated by
/// `(tau_K - tau_ref)^2`, where `tau_ref` is the estimate at the largest
/// valid K, and the variance by the subclass SE^2. The smallest
/// `bias^2 + SE^2` wins; ties go to the smaller K.
pub fn select_k_plugin(data: &Dataset, scores: &[f64], k_max: usize) -> Result<Selection> {
    if k_max < 2 {
        return Err(Error::InvalidConfig("plug-in selection needs k_max >= 2".into()));
    }
    let sorted = SortedScores::new(scores)?;
    let mut fits = Vec::new();
    for k in 2..=k_max.min(data.n()) {
        let d = sorted.design(data.a(), k)?;
        if d.require_valid(Estimand::Ate).is_ok() {
            fits.push((k, subclass_point(data, &d)?));
        }
    }
    let &(k_reference, reference) = fits.last().ok_or(Error::NoValidK { k_max })?;
    let candidates: Vec<SelectionCandidate> = fits
        .iter()
        .map(|&(k, est)| {
            let bias = est.tau_hat - reference.tau_hat;
            SelectionCandidate {
                k,
                tau_hat: est.tau_hat,
                se: est.se,
                criterion: bias * bias + est.se * est.se,
            }
        })
        .collect();
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.criterion.total_cmp(&b.criterion))
        .map(|(i, _)| i)
        .expect("at least one candidate");
    let estimate = PointEstimate {
        method_tag: MethodTag::SubclassSelect,
        ..fits[best].1
    };
    Ok(Selection {
        k: fits[best].0,
        estimate,
        k_reference,
        candidates,
    })
}

/// Uniform Dirichlet weights scaled to sum to `n`.
pub fn dirichlet_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|v| v * n as f64 / total).collect()
}

/// Minimizer difference of the unit-weight-perturbed arm losses.
pub fn llb_draw_with_weights(
    data: &Dataset,
    d: &StrataDesign,
    estimand: Estimand,
    weights: &[f64],
) -> Result<f64> {
    if weights.len() != data.n() {
        return Err(Error::DimensionMismatch {
            what: "bootstrap weights",
            expected: data.n(),
            found: weights.len(),
        });
    }
    let argmin = |arm: Arm| -> Result<f64> {
        let c = unit_weights(arm, data, d, estimand)?;
        let (num, den) = c
            .iter()
            .zip(weights)
            .zip(data.y())
            .fold((0.0, 0.0), |(num, den), ((c, w), y)| (num + c * w * y, den + c * w));
        Ok(num / den)
    };
    Ok(argmin(Arm::Treated)? - argmin(Arm::Control)?)
}

/// Loss-likelihood bootstrap sample of the effect at a fixed design.
pub fn llb<R: Rng + ?Sized>(
    data: &Dataset,
    d: &StrataDesign,
    n_boot: usize,
    estimand: Estimand,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_boot == 0 {
        return Err(Error::InvalidConfig("n_boot must be at least 1".into()));
    }
    d.require_valid(estimand)?;
    (0..n_boot)
        .map(|_| {
            let w = dirichlet_weights(data.n(), rng);
            llb_draw_with_weights(data, d, estimand, &w)
        })
        .collect()
}
