//! Closed-form error rates. All logarithms are natural and every unspecified
//! leading constant is 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rate split into its sampling and privacy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTerms {
    pub sampling: f64,
    pub privacy: f64,
}

impl RateTerms {
    pub fn total(&self) -> f64 {
        self.sampling + self.privacy
    }
}

fn check_eps(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("epsilon must be positive and finite, got {epsilon}")))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("eta must lie in (0, 1), got {eta}")))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `sqrt(log(1/η)/n) + log(1/η) sqrt(log(n/η)) / (εn)`.
pub fn rate_mean_terms(n: usize, eta: f64, epsilon: f64) -> Result<RateTerms> {
    if n < 2 {
        return Err(Error::param(format!("rate_mean needs n >= 2, got {n}")));
    }
    check_eta(eta)?;
    check_eps(epsilon)?;
    let n = n as f64;
    let l = (1.0 / eta).ln();
    Ok(RateTerms {
        sampling: (l / n).sqrt(),
        privacy: l * (n / eta).ln().sqrt() / (epsilon * n),
    })
}

pub fn rate_mean(n: usize, eta: f64, epsilon: f64) -> Result<f64> {
    rate_mean_terms(n, eta, epsilon).map(|r| r.total())
}

/// `log(log(n)/η) sqrt(d log n / n) + d log²(n/η) sqrt(log(1/δ) log log(n/η)) / (nε)`.
pub fn rate_lowdim_terms(n: usize, d: usize, epsilon: f64, delta: f64, eta: f64) -> Result<RateTerms> {
    if n < 3 {
        return Err(Error::param(format!("rate_lowdim needs n >= 3, got {n}")));
    }
    if d == 0 {
        return Err(Error::param("rate_lowdim needs d >= 1"));
    }
    check_eps(epsilon)?;
    check_delta(delta)?;
    check_eta(eta)?;
    let (n, d) = (n as f64, d as f64);
    let ln = n.ln();
    let lne = (n / eta).ln();
    Ok(RateTerms {
        sampling: (ln / eta).ln() * (d * ln / n).sqrt(),
        privacy: d * lne * lne * ((1.0 / delta).ln() * lne.ln()).sqrt() / (n * epsilon),
    })
}

pub fn rate_lowdim(n: usize, d: usize, epsilon: f64, delta: f64, eta: f64) -> Result<f64> {
    rate_lowdim_terms(n, d, epsilon, delta, eta).map(|r| r.total())
}

/// `sqrt(s' log(d/η) log n / n) + s' log^{1/2}(1/δ) log^{5/2}(nd/η) / (nε)`.
pub fn rate_highdim_terms(
    n: usize,
    s_prime: usize,
    d: usize,
    epsilon: f64,
    delta: f64,
    eta: f64,
) -> Result<RateTerms> {
    if n < 2 {
        return Err(Error::param(format!("rate_highdim needs n >= 2, got {n}")));
    }
    if s_prime == 0 || s_prime > d {
        return Err(Error::param(format!("rate_highdim needs 1 <= s' <= d, got s' = {s_prime}, d = {d}")));
    }
    check_eps(epsilon)?;
    check_delta(delta)?;
    check_eta(eta)?;
    let (n, s, d) = (n as f64, s_prime as f64, d as f64);
    Ok(RateTerms {
        sampling: (s * (d / eta).ln() * n.ln() / n).sqrt(),
        privacy: s * (1.0 / delta).ln().sqrt() * (n * d / eta).ln().powf(2.5) / (n * epsilon),
    })
}

pub fn rate_highdim(n: usize, s_prime: usize, d: usize, epsilon: f64, delta: f64, eta: f64) -> Result<f64> {
    rate_highdim_terms(n, s_prime, d, epsilon, delta, eta).map(|r| r.total())
}

/// Privacy cost of aggregating `k_hat` sources with `n_agg = n_Â + n_0` samples:
/// `sqrt(|Â| d s') log^{1/2}(1/δ) log^{5/2}(n_agg d/η) / (n_agg ε)`.
pub fn aggregation_privacy_term(
    k_hat: usize,
    n_agg: usize,
    s_prime: usize,
    d: usize,
    epsilon: f64,
    delta: f64,
    eta: f64,
) -> Result<f64> {
    if n_agg < 2 {
        return Err(Error::param(format!("aggregation term needs n_agg >= 2, got {n_agg}")));
    }
    if s_prime == 0 || s_prime > d {
        return Err(Error::param(format!("need 1 <= s' <= d, got s' = {s_prime}, d = {d}")));
    }
    check_eps(epsilon)?;
    check_delta(delta)?;
    check_eta(eta)?;
    let (k, n, s, d) = (k_hat as f64, n_agg as f64, s_prime as f64, d as f64);
    Ok((k * d * s).sqrt() * (1.0 / delta).ln().sqrt() * (n * d / eta).ln().powf(2.5) / (n * epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    // Reference values evaluated independently at 40 significant digits.
    #[test]
    fn reference_values() {
        assert!(rel(rate_mean(100, 0.05, 1.0).unwrap(), 0.255_673_380_890_325_64) < 1e-12);
        assert!(rel(rate_lowdim(1000, 5, 1.0, 1e-5, 0.05).unwrap(), 3.435_513_280_505_752_1) < 1e-10);
        assert!(rel(rate_highdim(2000, 4, 200, 1.0, 1e-5, 0.05).unwrap(), 7.190_593_479_686_975_2) < 1e-10);
        assert!(
            rel(aggregation_privacy_term(5, 12000, 4, 200, 1.0, 1e-5, 0.05).unwrap(), 23.526_608_733_240_204) < 1e-10
        );
    }

    #[test]
    fn parameter_errors() {
        assert!(rate_mean(1, 0.05, 1.0).is_err());
        assert!(rate_mean(10, 1.0, 1.0).is_err());
        assert!(rate_lowdim(2, 1, 1.0, 1e-5, 0.05).is_err());
        assert!(rate_highdim(100, 5, 4, 1.0, 1e-5, 0.05).is_err());
        assert_eq!(aggregation_privacy_term(0, 100, 2, 10, 1.0, 1e-5, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn sampling_regime_halves_with_4n() {
        let a = rate_mean(1000, 0.05, 1e12).unwrap();
        let b = rate_mean(4000, 0.05, 1e12).unwrap();
        assert!((a / b - 2.0).abs() < 1e-6);
        let t = rate_lowdim_terms(1000, 3, 1e15, 1e-5, 0.05).unwrap();
        assert!(t.privacy < 1e-12);
    }

    #[test]
    fn grid_monotonicity() {
        let ns = [10usize, 30, 100, 300, 1000, 3000, 10_000, 30_000, 100_000];
        for w in ns.windows(2) {
            assert!(rate_mean(w[1], 0.05, 1.0).unwrap() < rate_mean(w[0], 0.05, 1.0).unwrap());
        }
        for d in 1..30 {
            assert!(rate_lowdim(1000, d + 1, 1.0, 1e-5, 0.05).unwrap() > rate_lowdim(1000, d, 1.0, 1e-5, 0.05).unwrap());
        }
        for d in [10usize, 20, 50, 100, 400, 1000] {
            let ratio = rate_highdim(2000, 4, 2 * d, 1.0, 1e-5, 0.05).unwrap() / rate_highdim(2000, 4, d, 1.0, 1e-5, 0.05).unwrap();
            assert!(ratio > 1.0 && ratio < 1.5, "d = {d}: {ratio}");
        }
        for n in [100usize, 1000, 5000, 20_000] {
            assert!(
                aggregation_privacy_term(3, n + 100, 4, 200, 1.0, 1e-5, 0.05).unwrap()
                    < aggregation_privacy_term(3, n, 4, 200, 1.0, 1e-5, 0.05).unwrap()
            );
        }
    }

    #[test]
    fn highdim_privacy_term_linear_in_s() {
        let a = rate_highdim_terms(2000, 2, 200, 1.0, 1e-5, 0.05).unwrap().privacy;
        let b = rate_highdim_terms(2000, 6, 200, 1.0, 1e-5, 0.05).unwrap().privacy;
        assert!((b / a - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rates_decrease_in_epsilon(n in 10usize..100_000, d in 1usize..50, e in 0.01f64..9.0, de in 0.001f64..1.0) {
            let e2 = (e + de).min(10.0);
            prop_assume!(e2 > e);
            let s = d.min(5);
            for (a, b) in [
                (rate_mean(n, 0.05, e).unwrap(), rate_mean(n, 0.05, e2).unwrap()),
                (rate_lowdim(n, d, e, 1e-5, 0.05).unwrap(), rate_lowdim(n, d, e2, 1e-5, 0.05).unwrap()),
                (rate_highdim(n, s, d, e, 1e-5, 0.05).unwrap(), rate_highdim(n, s, d, e2, 1e-5, 0.05).unwrap()),
            ] {
                prop_assert!(a.is_finite() && b.is_finite() && b > 0.0);
                prop_assert!(b < a);
            }
        }
    }
}
