//! Equal-frequency propensity-score strata.
//!
//! Units are ordered by score (ties by original index) and cut into `k`
//! contiguous blocks whose sizes differ by at most one; the `n mod k` extra
//! units go to the lowest strata. Given the scores the design is fully
//! determined.

use serde::Serialize;

use crate::data::{Arm, Estimand};
use crate::error::{Error, Result};

/// Strata for one value of K. Stratum indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrataDesign {
    pub k: usize,
    /// `k + 1` boundaries from 0 to 1; interior ones are midpoints between
    /// neighbouring block-edge scores (non-decreasing when scores tie).
    pub cutpoints: Vec<f64>,
    /// Stratum of each unit, in original unit order.
    pub labels: Vec<usize>,
    pub n1: Vec<usize>,
    pub n0: Vec<usize>,
    pub nplus: Vec<usize>,
}

impl StrataDesign {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn count(&self, arm: Arm, stratum: usize) -> usize {
        match arm {
            Arm::Treated => self.n1[stratum],
            Arm::Control => self.n0[stratum],
        }
    }

    /// First stratum with no units of `arm`.
    pub fn first_empty(&self, arm: Arm) -> Option<usize> {
        (0..self.k).find(|&s| self.count(arm, s) == 0)
    }

    /// Checks that the arms needed by `estimand` are present where required.
    ///
    /// ATE needs both arms in every stratum. ATT only needs controls wherever
    /// there are treated units.
    pub fn require_valid(&self, estimand: Estimand) -> Result<()> {
        match estimand {
            Estimand::Ate => match check_validity(self).first_empty_arm {
                Some((stratum, arm)) => Err(Error::InvalidDesign { stratum, arm }),
                None => Ok(()),
            },
            Estimand::Att => match (0..self.k).find(|&s| self.n0[s] == 0 && self.n1[s] > 0) {
                Some(stratum) => Err(Error::InvalidDesign {
                    stratum,
                    arm: Arm::Control,
                }),
                None => Ok(()),
            },
        }
    }
}

/// Outcome of [`check_validity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrataValidity {
    pub valid: bool,
    pub first_empty_arm: Option<(usize, Arm)>,
}

/// Reports the lowest stratum missing treated or control units (treated checked first).
pub fn check_validity(d: &StrataDesign) -> StrataValidity {
    let first_empty_arm = (0..d.k).find_map(|s| {
        if d.n1[s] == 0 {
            Some((s, Arm::Treated))
        } else if d.n0[s] == 0 {
            Some((s, Arm::Control))
        } else {
            None
        }
    });
    StrataValidity {
        valid: first_empty_arm.is_none(),
        first_empty_arm,
    }
}

/// Scores with their sort order computed once, so designs for several K can
/// be built from one ordering.
#[derive(Debug, Clone)]
pub struct SortedScores {
    scores: Vec<f64>,
    order: Vec<usize>,
}

impl SortedScores {
    pub fn new(scores: &[f64]) -> Result<Self> {
        if let Some((row, &value)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0 && **s < 1.0))
        {
            return Err(Error::ScoreOutOfRange { row, value });
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
        Ok(SortedScores {
            scores: scores.to_vec(),
            order,
        })
    }

    /// Builds the K-strata design; `a` holds the treatment indicators.
    pub fn design(&self, a: &[u8], k: usize) -> Result<StrataDesign> {
        let n = self.order.len();
        if k == 0 || k > n {
            return Err(Error::TooManyStrata { k, n });
        }
        debug_assert_eq!(a.len(), n);
        let base = n / k;
        let rem = n % k;
        let mut labels = vec![0usize; n];
        let mut n1 = vec![0usize; k];
        let mut nplus = vec![0usize; k];
        let mut cutpoints = Vec::with_capacity(k + 1);
        cutpoints.push(0.0);
        let mut pos = 0;
        for s in 0..k {
            let size = base + usize::from(s < rem);
            for &i in &self.order[pos..pos + size] {
                labels[i] = s;
                n1[s] += usize::from(a[i]);
            }
            nplus[s] = size;
            pos += size;
            if s + 1 < k {
                let lo = self.scores[self.order[pos - 1]];
                let hi = self.scores[self.order[pos]];
                cutpoints.push(0.5 * (lo + hi));
            }
        }
        cutpoints.push(1.0);
        let n0 = nplus.iter().zip(&n1).map(|(p, t)| p - t).collect();
        Ok(StrataDesign {
            k,
            cutpoints,
            labels,
            n1,
            n0,
            nplus,
        })
    }
}

/// Equal-frequency strata for `k` from a score vector.
pub fn make_strata(scores: &[f64], a: &[u8], k: usize) -> Result<StrataDesign> {
    if a.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            what: "scores",
            expected: a.len(),
            found: scores.len(),
        });
    }
    SortedScores::new(scores)?.design(a, k)
}
