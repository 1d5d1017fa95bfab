//! Logistic propensity model e(X; alpha) = expit(alpha . [1, X]).
//!
//! Two fitting routes share the same linear predictor: maximum likelihood by
//! damped Newton iterations, and posterior sampling by Pólya-Gamma augmented
//! Gibbs updates under a Normal(0, sd^2 I) prior.

mod pg;

pub use pg::{pg_mean, sample_pg};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Newton iteration limit for [`fit_mle`].
pub const MLE_MAX_ITER: usize = 100;
/// Gradient max-norm at which [`fit_mle`] stops.
pub const MLE_GRAD_TOL: f64 = 1e-8;
/// |linear predictor| beyond which a fit is treated as separated.
const SEPARATION_ETA: f64 = 35.0;

/// Overflow-safe logistic function.
#[inline]
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
#[inline]
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// One value of the propensity coefficients together with the scores it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityDraw {
    /// Intercept first, then one coefficient per covariate.
    pub alpha: Vec<f64>,
    pub scores: Vec<f64>,
}

impl PropensityDraw {
    pub fn from_alpha(data: &Dataset, alpha: Vec<f64>) -> Self {
        let scores = data
            .x_rows()
            .map(|x| expit(linear_predictor(&alpha, x)))
            .collect();
        PropensityDraw { alpha, scores }
    }
}

/// Pólya-Gamma auxiliary variables, one per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PgLatent {
    pub omega_pg: Vec<f64>,
}

#[inline]
fn linear_predictor(alpha: &[f64], x: &[f64]) -> f64 {
    alpha[0] + alpha[1..].iter().zip(x).map(|(a, x)| a * x).sum::<f64>()
}

/// Bernoulli log-likelihood of the treatment under coefficients `alpha`.
pub fn log_likelihood(data: &Dataset, alpha: &[f64]) -> f64 {
    data.x_rows()
        .zip(data.a())
        .map(|(x, &a)| {
            let eta = linear_predictor(alpha, x);
            f64::from(a) * eta - log1p_exp(eta)
        })
        .sum()
}

fn design_row(x: &[f64], out: &mut [f64]) {
    out[0] = 1.0;
    out[1..].copy_from_slice(x);
}

/// Accumulates Z' diag(w) Z for the intercept-augmented design.
fn weighted_gram(data: &Dataset, w: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let q = data.p() + 1;
    let mut g = DMatrix::<f64>::zeros(q, q);
    let mut z = vec![0.0; q];
    for (x, wi) in data.x_rows().zip(w) {
        design_row(x, &mut z);
        for r in 0..q {
            let zr = wi * z[r];
            for c in 0..=r {
                g[(r, c)] += zr * z[c];
            }
        }
    }
    g.fill_upper_triangle_with_lower_triangle();
    g
}

fn has_full_rank(data: &Dataset) -> bool {
    let gram = weighted_gram(data, std::iter::repeat(1.0));
    let scale = gram.diagonal().max();
    match gram.clone().cholesky() {
        Some(ch) => ch
            .l()
            .diagonal()
            .iter()
            .all(|&d| d * d > 1e-10 * scale.max(1.0)),
        None => false,
    }
}

/// Maximum likelihood fit of the logistic propensity model.
///
/// Damped Newton from alpha = 0. Fails with [`Error::Separation`] when the
/// linear predictor of some unit diverges and [`Error::NotConverged`] when the
/// gradient is still above tolerance after [`MLE_MAX_ITER`] iterations.
pub fn fit_mle(data: &Dataset) -> Result<PropensityDraw> {
    if !has_full_rank(data) {
        return Err(Error::RankDeficient);
    }
    let q = data.p() + 1;
    let mut alpha = vec![0.0; q];
    let mut ll = log_likelihood(data, &alpha);
    let mut z = vec![0.0; q];
    for _ in 0..MLE_MAX_ITER {
        let mut grad = DVector::<f64>::zeros(q);
        let mut w = Vec::with_capacity(data.n());
        let mut max_eta = 0.0f64;
        for (x, &a) in data.x_rows().zip(data.a()) {
            let eta = linear_predictor(&alpha, x);
            max_eta = max_eta.max(eta.abs());
            let p = expit(eta);
            design_row(x, &mut z);
            let r = f64::from(a) - p;
            for j in 0..q {
                grad[j] += r * z[j];
            }
            w.push(p * (1.0 - p));
        }
        if max_eta > SEPARATION_ETA {
            return Err(Error::Separation);
        }
        if grad.amax() < MLE_GRAD_TOL {
            return Ok(PropensityDraw::from_alpha(data, alpha));
        }
        let hess = weighted_gram(data, w.into_iter());
        let step = hess
            .cholesky()
            .ok_or(Error::Separation)?
            .solve(&grad);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = alpha.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let cand_ll = log_likelihood(data, &cand);
            // Near the optimum the gain is below rounding noise in the log-likelihood.
            if cand_ll >= ll - 1e-12 * (1.0 + ll.abs()) || t < 1e-10 {
                alpha = cand;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NotConverged(MLE_MAX_ITER))
}

/// Pólya-Gamma Gibbs sampler for the propensity coefficients.
#[derive(Debug, Clone)]
pub struct PgGibbs<'a> {
    data: &'a Dataset,
    /// Z' (a - 1/2), fixed across iterations.
    z_kappa: DVector<f64>,
    prior_precision: f64,
}

impl<'a> PgGibbs<'a> {
    pub fn new(data: &'a Dataset, prior_sd: f64) -> Self {
        let q = data.p() + 1;
        let mut z_kappa = DVector::<f64>::zeros(q);
        let mut z = vec![0.0; q];
        for (x, &a) in data.x_rows().zip(data.a()) {
            design_row(x, &mut z);
            let kappa = f64::from(a) - 0.5;
            for j in 0..q {
                z_kappa[j] += kappa * z[j];
            }
        }
        PgGibbs {
            data,
            z_kappa,
            prior_precision: 1.0 / (prior_sd * prior_sd),
        }
    }

    /// Draws omega_i ~ PG(1, [1, x_i] . alpha) for every unit.
    pub fn sample_latent<R: Rng + ?Sized>(&self, alpha: &[f64], rng: &mut R) -> PgLatent {
        let omega_pg = self
            .data
            .x_rows()
            .map(|x| sample_pg(linear_predictor(alpha, x), rng))
            .collect();
        PgLatent { omega_pg }
    }

    /// Draws alpha from its Normal full conditional given the latent variables.
    pub fn sample_alpha<R: Rng + ?Sized>(&self, latent: &PgLatent, rng: &mut R) -> Result<Vec<f64>> {
        let q = self.data.p() + 1;
        let mut precision = weighted_gram(self.data, latent.omega_pg.iter().copied());
        for j in 0..q {
            precision[(j, j)] += self.prior_precision;
        }
        let chol = precision.cholesky().ok_or(Error::NotPositiveDefinite)?;
        let mean = chol.solve(&self.z_kappa);
        let eps = DVector::<f64>::from_fn(q, |_, _| rng.sample(StandardNormal));
        // alpha = mean + L^{-T} eps has covariance (L L^T)^{-1}
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or(Error::NotPositiveDefinite)?;
        let alpha: Vec<f64> = (mean + dev).iter().copied().collect();
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(alpha)
    }

    /// One full Gibbs sweep starting from `alpha`.
    pub fn step<R: Rng + ?Sized>(&self, alpha: &[f64], rng: &mut R) -> Result<PropensityDraw> {
        let latent = self.sample_latent(alpha, rng);
        let next = self.sample_alpha(&latent, rng)?;
        Ok(PropensityDraw::from_alpha(self.data, next))
    }

    /// A reasonable chain start: the MLE when it exists, else zero.
    pub fn initial_alpha(&self) -> Vec<f64> {
        fit_mle(self.data)
            .map(|d| d.alpha)
            .unwrap_or_else(|_| vec![0.0; self.data.p() + 1])
    }
}

/// One Gibbs update of the propensity coefficients.
pub fn gibbs_step<R: Rng + ?Sized>(
    data: &Dataset,
    alpha: &[f64],
    prior_sd: f64,
    rng: &mut R,
) -> Result<PropensityDraw> {
    PgGibbs::new(data, prior_sd).step(alpha, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn synthetic(n: usize, coef: &[f64], seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed);
        let mut a = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: Vec<f64> = (1..coef.len()).map(|_| rng.sample(StandardNormal)).collect();
            let e = expit(linear_predictor(coef, &xi));
            a.push(u8::from(rng.random::<f64>() < e));
            x.push(xi);
        }
        let y = vec![0.0; n];
        Dataset::new(a, x, y).unwrap()
    }

    #[test]
    fn expit_values() {
        assert_eq!(expit(0.0), 0.5);
        for z in [-3.0, 0.7, 10.0] {
            assert!((expit(z) - (1.0 - expit(-z))).abs() < 1e-15);
        }
        // mpmath, 30 digits: 0.331812227831833893469211670370
        assert!((expit(-0.7) - 0.331_812_227_831_833_9).abs() < 1e-15);
        assert!(expit(-800.0) >= 0.0 && expit(800.0) == 1.0);
    }

    #[test]
    fn intercept_only_mle_is_logit_of_mean() {
        let data = Dataset::new(
            vec![1, 0, 1, 1, 0, 1, 0, 1],
            vec![vec![]; 8],
            vec![0.0; 8],
        )
        .unwrap();
        let fit = fit_mle(&data).unwrap();
        let m: f64 = 5.0 / 8.0;
        assert!((fit.alpha[0] - (m / (1.0 - m)).ln()).abs() < 1e-9);
    }

    #[test]
    fn balanced_independent_covariate_gives_zero_slope() {
        // a independent of x by construction: each x value has one of each arm.
        let xs = [-1.0, -0.5, 0.5, 1.0];
        let mut a = vec![];
        let mut x = vec![];
        for &v in &xs {
            a.extend([0u8, 1]);
            x.extend([vec![v], vec![v]]);
        }
        let data = Dataset::new(a, x, vec![0.0; 8]).unwrap();
        let fit = fit_mle(&data).unwrap();
        assert!(fit.alpha.iter().all(|v| v.abs() < 1e-9), "{:?}", fit.alpha);
    }

    #[test]
    fn separated_data_fails() {
        let data = Dataset::new(
            vec![0, 0, 1, 1],
            vec![vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]],
            vec![0.0; 4],
        )
        .unwrap();
        let err = fit_mle(&data).unwrap_err();
        assert!(matches!(err, Error::Separation | Error::NotConverged(_)), "{err}");
    }

    #[test]
    fn rank_deficient_design_fails() {
        let data = Dataset::new(
            vec![0, 1, 0, 1],
            vec![vec![0.0]; 4],
            vec![0.0; 4],
        )
        .unwrap();
        assert!(matches!(fit_mle(&data).unwrap_err(), Error::RankDeficient));
    }

    #[test]
    fn mle_recovers_generating_coefficients() {
        let truth = [0.0, 1.0, -0.5, 0.25, 0.1];
        let data = synthetic(50_000, &truth, 5);
        let fit = fit_mle(&data).unwrap();
        for (est, t) in fit.alpha.iter().zip(truth) {
            assert!((est - t).abs() < 0.05, "{:?}", fit.alpha);
        }
    }

    #[test]
    fn mle_converges_on_steep_designs() {
        for seed in 0..60 {
            let (data, _) = crate::sim::gen_kang_schafer_steep(400, &mut RngStream::new(seed));
            let fit = fit_mle(&data);
            assert!(fit.is_ok(), "seed {seed}: {:?}", fit.err());
        }
    }

    #[test]
    fn mle_beats_random_perturbations() {
        let data = synthetic(500, &[0.2, 0.8, -0.4], 6);
        let fit = fit_mle(&data).unwrap();
        let best = log_likelihood(&data, &fit.alpha);
        let mut rng = RngStream::new(9);
        for _ in 0..100 {
            let d: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let norm = d.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
            let pert: Vec<f64> = fit.alpha.iter().zip(&d).map(|(a, v)| a + 0.1 * v / norm).collect();
            assert!(log_likelihood(&data, &pert) <= best);
        }
    }

    #[test]
    fn scores_recompute_from_alpha() {
        let data = synthetic(200, &[0.3, -0.7], 8);
        let draw = gibbs_step(&data, &[0.0, 0.0], 10.0, &mut RngStream::new(1)).unwrap();
        for (x, s) in data.x_rows().zip(&draw.scores) {
            assert!(*s > 0.0 && *s < 1.0);
            let direct = 1.0 / (1.0 + (-(draw.alpha[0] + draw.alpha[1] * x[0])).exp());
            assert!((s - direct).abs() < 1e-12);
        }
    }

    fn chain_means(data: &Dataset, start: Vec<f64>, prior_sd: f64, seed: u64, burn: usize, keep: usize) -> Vec<Vec<f64>> {
        let gibbs = PgGibbs::new(data, prior_sd);
        let mut rng = RngStream::new(seed);
        let mut alpha = start;
        let mut out = Vec::with_capacity(keep);
        for r in 0..burn + keep {
            alpha = gibbs.step(&alpha, &mut rng).unwrap().alpha;
            if r >= burn {
                out.push(alpha.clone());
            }
        }
        out
    }

    /// Mean and a batch-means Monte-Carlo standard error per coordinate.
    fn mean_and_mcse(draws: &[Vec<f64>]) -> Vec<(f64, f64)> {
        let q = draws[0].len();
        let batches = 50;
        let size = draws.len() / batches;
        (0..q)
            .map(|j| {
                let m = draws.iter().map(|d| d[j]).sum::<f64>() / draws.len() as f64;
                let bm: Vec<f64> = (0..batches)
                    .map(|b| draws[b * size..(b + 1) * size].iter().map(|d| d[j]).sum::<f64>() / size as f64)
                    .collect();
                let var = bm.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
                (m, (var / batches as f64).sqrt())
            })
            .collect()
    }

    #[test]
    fn gibbs_posterior_mean_near_mle() {
        let data = synthetic(2000, &[0.2, 0.8, -0.5], 12);
        let mle = fit_mle(&data).unwrap();
        let draws = chain_means(&data, vec![0.0; 3], 10.0, 13, 200, 5000);
        for ((m, se), t) in mean_and_mcse(&draws).into_iter().zip(&mle.alpha) {
            // Posterior mean and MLE differ by O(1/n) plus Monte-Carlo error.
            assert!((m - t).abs() < 3.0 * se + 0.01, "{m} vs {t} (se {se})");
        }
    }

    #[test]
    fn gibbs_start_invariance() {
        let data = synthetic(1000, &[-0.3, 0.6], 14);
        let mle = fit_mle(&data).unwrap();
        let a = mean_and_mcse(&chain_means(&data, mle.alpha, 10.0, 15, 200, 4000));
        let b = mean_and_mcse(&chain_means(&data, vec![0.0, 0.0], 10.0, 16, 200, 4000));
        for ((ma, sa), (mb, sb)) in a.into_iter().zip(b) {
            let combined = (sa * sa + sb * sb).sqrt();
            assert!((ma - mb).abs() < 3.0 * combined, "{ma} vs {mb} ({combined})");
        }
    }

    #[test]
    fn tight_prior_dominates() {
        let data = synthetic(500, &[1.0, 2.0], 17);
        let draws = chain_means(&data, vec![0.0, 0.0], 0.001, 18, 50, 500);
        for (m, _) in mean_and_mcse(&draws) {
            assert!(m.abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn gibbs_is_deterministic() {
        let data = synthetic(300, &[0.1, 0.4], 19);
        let a = chain_means(&data, vec![0.0, 0.0], 10.0, 20, 0, 30);
        let b = chain_means(&data, vec![0.0, 0.0], 10.0, 20, 0, 30);
        assert_eq!(a, b);
    }
}
