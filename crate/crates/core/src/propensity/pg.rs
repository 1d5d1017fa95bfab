//! Exact Pólya-Gamma PG(1, c) sampling.
//!
//! Uses Devroye's alternating-series accept/reject scheme for the Jacobi
//! distribution J*(1, z) with z = |c|/2, then returns J*/4. The proposal
//! splits at `TRUNC`: a truncated inverse Gaussian to the left and a
//! shifted exponential to the right.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

const TRUNC: f64 = 0.64;
const FRAC_PI2_8: f64 = PI * PI / 8.0;

/// One exact draw from PG(1, c).
pub fn sample_pg<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    let z = 0.5 * c.abs();
    let fz = FRAC_PI2_8 + 0.5 * z * z;
    let right_mass = right_proposal_mass(z, fz);
    loop {
        let x = if rng.random::<f64>() < right_mass {
            TRUNC + rng.sample::<f64, _>(Exp1) / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        let mut s = series_coef(0, x);
        let u = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if u <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if u > s {
                    break;
                }
            }
        }
    }
}

/// Mean of PG(1, c): tanh(c/2) / (2c), with limit 1/4 at c = 0.
pub fn pg_mean(c: f64) -> f64 {
    if c.abs() < 1e-8 {
        0.25
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

/// n-th coefficient of the alternating series for the J*(1) density,
/// piecewise in x around `TRUNC`.
fn series_coef(n: u32, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

/// Probability that the mixture proposal draws from the right-hand exponential piece.
fn right_proposal_mass(z: f64, fz: f64) -> f64 {
    let root = (1.0 / TRUNC).sqrt();
    let b = root * (TRUNC * z - 1.0);
    let a = -root * (TRUNC * z + 1.0);
    let x0 = fz.ln() + fz * TRUNC;
    let xb = x0 - z + log_norm_cdf(b);
    let xa = x0 + z + log_norm_cdf(a);
    let left_over_right = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + left_over_right)
}

fn log_norm_cdf(x: f64) -> f64 {
    (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln()
}

/// Inverse Gaussian IG(1/z, 1) truncated to (0, TRUNC).
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    if z < 1.0 / TRUNC {
        // Mean above the truncation point: propose from the truncated
        // Lévy (1/chi^2_1) and accept with exp(-z^2 x / 2).
        loop {
            let x = loop {
                let e1: f64 = rng.sample(Exp1);
                let e2: f64 = rng.sample(Exp1);
                if e1 * e1 <= 2.0 * e2 / TRUNC {
                    let d = 1.0 + e1 * TRUNC;
                    break TRUNC / (d * d);
                }
            };
            if rng.random::<f64>() <= (-0.5 * z * z * x).exp() {
                return x;
            }
        }
    } else {
        let mu = 1.0 / z;
        loop {
            let v: f64 = rng.sample(StandardNormal);
            let mu_y = mu * v * v;
            let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x < TRUNC {
                return x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn empirical_mean(c: f64, draws: usize, seed: u64) -> f64 {
        let mut rng = RngStream::new(seed);
        (0..draws).map(|_| sample_pg(c, &mut rng)).sum::<f64>() / draws as f64
    }

    #[test]
    fn mean_at_zero() {
        let m = empirical_mean(0.0, 1_000_000, 1);
        assert!((m - 0.25).abs() < 0.001, "mean {m}");
    }

    #[test]
    fn mean_at_two() {
        // 0.25 * tanh(1)
        let m = empirical_mean(2.0, 1_000_000, 2);
        assert!((m - 0.190_398_538_988_941).abs() < 0.001, "mean {m}");
    }

    #[test]
    fn variance_matches_analytic() {
        // Var PG(1, c) = (sinh c - c) / (4 c^3 cosh^2(c/2))
        for &c in &[0.3, 3.0, 9.0] {
            let mut rng = RngStream::new(11);
            let xs: Vec<f64> = (0..400_000).map(|_| sample_pg(c, &mut rng)).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            let exact = (c.sinh() - c) / (4.0 * c.powi(3) * (0.5 * c).cosh().powi(2));
            assert!((v - exact).abs() / exact < 0.03, "c={c}: {v} vs {exact}");
        }
    }

    #[test]
    fn draws_are_positive_and_sign_symmetric() {
        let mut rng = RngStream::new(3);
        for i in 0..50_000 {
            let c = (i as f64 - 25_000.0) / 1000.0;
            assert!(sample_pg(c, &mut rng) > 0.0);
        }
        let a = empirical_mean(-1.5, 200_000, 4);
        assert!((a - pg_mean(1.5)).abs() < 0.002);
    }

    #[test]
    fn analytic_mean_limit() {
        assert_eq!(pg_mean(0.0), 0.25);
        assert!((pg_mean(1e-6) - 0.25).abs() < 1e-9);
    }
}
