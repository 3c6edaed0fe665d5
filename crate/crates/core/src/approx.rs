//! Poisson and normal approximation toolkit: Skellam matching probabilities,
//! Stein–Chen total-variation bounds, local CLT error measurements and the
//! heat-kernel comparison bound.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::binom::{binom_pmf, match_prob, BinomialSpec, WINDOW_TAIL};
use crate::error::{invalid, Result};
use crate::special::{dpois_raw, ie, KahanSum};

/// Means of two independent Poisson variables `V(λ)`, `V'(λ')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonPair {
    pub lambda: f64,
    pub lambda_prime: f64,
}

impl PoissonPair {
    pub fn new(lambda: f64, lambda_prime: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda_prime >= 0.0) {
            return invalid(format!("Poisson means must be nonnegative, got {lambda}, {lambda_prime}"));
        }
        Ok(Self { lambda, lambda_prime })
    }
}

/// Parameters of the binomial local CLT; `mu` and `sigma_sq` are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcltParams {
    pub m: u64,
    pub m_prime: u64,
    pub q: f64,
    pub q_prime: f64,
    pub n: u64,
    pub mu: f64,
    pub sigma_sq: f64,
}

impl LcltParams {
    pub fn new(m: u64, m_prime: u64, q: f64, q_prime: f64, n: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&q_prime) || n == 0 {
            return invalid("LCLT parameters need q, q' in [0,1] and N >= 1");
        }
        let nf = n as f64;
        let mu = (m as f64 * q - m_prime as f64 * q_prime) / nf.sqrt();
        let sigma_sq = m as f64 / nf * q * (1.0 - q) + m_prime as f64 / nf * q_prime * (1.0 - q_prime);
        Ok(Self { m, m_prime, q, q_prime, n, mu, sigma_sq })
    }
}

/// Centered normal density with variance `sigma_sq`.
pub fn gaussian_density(sigma_sq: f64, x: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) {
        return invalid(format!("variance must be positive, got {sigma_sq}"));
    }
    Ok(gauss(sigma_sq, x))
}

#[inline]
pub(crate) fn gauss(sigma_sq: f64, x: f64) -> f64 {
    (-x * x / (2.0 * sigma_sq)).exp() / (2.0 * PI * sigma_sq).sqrt()
}

pub fn poisson_pmf(lambda: f64, k: i64) -> f64 {
    if k < 0 {
        0.0
    } else {
        dpois_raw(k as u64, lambda)
    }
}

/// Index range outside of which each Poisson tail has mass below [`WINDOW_TAIL`].
pub fn poisson_window(lambda: f64) -> (u64, u64) {
    if lambda == 0.0 {
        return (0, 0);
    }
    let l = (2.0 / WINDOW_TAIL).ln();
    let bern = l / 3.0 + (l * l / 9.0 + 2.0 * l * lambda).sqrt();
    let h = (12.0 * lambda.sqrt()).max(bern) + 1.0;
    ((lambda - h).ceil().max(0.0) as u64, (lambda + h).floor() as u64)
}

/// `P(V(λ) - V'(λ') = k)` from the exponentially scaled Bessel function.
pub fn skellam_match(pair: PoissonPair, k: i64) -> f64 {
    let (l, lp) = (pair.lambda, pair.lambda_prime);
    if l == 0.0 {
        return poisson_pmf(lp, -k);
    }
    if lp == 0.0 {
        return poisson_pmf(l, k);
    }
    let x = 2.0 * (l * lp).sqrt();
    let d = l.sqrt() - lp.sqrt();
    let log_pre = -d * d + 0.5 * k as f64 * (l.ln() - lp.ln());
    log_pre.exp() * ie(k, x)
}

/// Same probability as the convolution `Σ_j P(V = j + k) P(V' = j)`.
pub fn skellam_series(pair: PoissonPair, k: i64) -> f64 {
    let (lo1, hi1) = poisson_window(pair.lambda);
    let (lo2, hi2) = poisson_window(pair.lambda_prime);
    let jlo = (lo2 as i64).max(lo1 as i64 - k).max(0);
    let jhi = (hi2 as i64).min(hi1 as i64 - k);
    let mut acc = KahanSum::new();
    for j in jlo..=jhi {
        acc.add(poisson_pmf(pair.lambda, j + k) * poisson_pmf(pair.lambda_prime, j));
    }
    acc.value()
}

/// `(1 - e^{-mp}) p`.
pub fn stein_chen_bound(m: u64, p: f64) -> Result<f64> {
    if m < 1 || !(p > 0.0 && p < 1.0) {
        return invalid(format!("Stein–Chen bound needs m >= 1 and 0 < p < 1, got m = {m}, p = {p}"));
    }
    Ok(-(-(m as f64) * p).exp_m1() * p)
}

/// Exact `d_TV(Binomial(m,p), Poisson(mp))`.
///
/// Written as `Σ_{k<=m} (b(k) - π(k))^+`, which needs no Poisson tail beyond `m`.
/// Indices outside the binomial window contribute at most their binomial mass,
/// below `2·WINDOW_TAIL`.
pub fn tv_binom_poisson(m: u64, p: f64) -> Result<f64> {
    let spec = BinomialSpec::new(m, p)?;
    let lambda = m as f64 * p;
    let (lo, hi) = spec.window();
    let mut acc = KahanSum::new();
    for k in lo..=hi {
        let d = binom_pmf(spec, k as i64) - poisson_pmf(lambda, k as i64);
        if d > 0.0 {
            acc.add(d);
        }
    }
    Ok(acc.value())
}

/// Sup-error of the Gaussian approximation to the Skellam pmf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcltError {
    pub sup_error: f64,
    pub argmax: i64,
    /// `sup_error` times the scale of the bound.
    pub scaled: f64,
}

pub fn poisson_lclt_error(pair: PoissonPair) -> Result<LcltError> {
    if !(pair.lambda > 0.0 && pair.lambda_prime > 0.0) {
        return invalid("Poisson local CLT needs positive means");
    }
    let v = pair.lambda + pair.lambda_prime;
    let sd = v.sqrt();
    let mean = pair.lambda - pair.lambda_prime;
    let lo = (mean - 12.0 * sd).floor() as i64 - 1;
    let hi = (mean + 12.0 * sd).ceil() as i64 + 1;
    let mut best = LcltError { sup_error: 0.0, argmax: lo, scaled: 0.0 };
    for a in lo..=hi {
        let approx = gauss(1.0, (-pair.lambda + pair.lambda_prime + a as f64) / sd) / sd;
        let err = (skellam_match(pair, a) - approx).abs();
        if err > best.sup_error {
            best.sup_error = err;
            best.argmax = a;
        }
    }
    best.scaled = best.sup_error * v;
    Ok(best)
}

/// Gaussian approximation to `√N·P(S_M(q) = S'_{M'}(q') + a)` with its error budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcltApprox {
    pub approximation: f64,
    /// `1/(√N σ²)`, the bound up to a universal constant.
    pub error_budget: f64,
    pub exact: f64,
}

pub fn binom_lclt_approx(params: LcltParams, a: i64) -> Result<LcltApprox> {
    if !(params.sigma_sq > 0.0) {
        return invalid("binomial local CLT needs sigma_sq > 0");
    }
    let sn = (params.n as f64).sqrt();
    let approximation = gauss(params.sigma_sq, a as f64 / sn - params.mu);
    let exact = sn
        * match_prob(
            BinomialSpec::new(params.m, params.q)?,
            BinomialSpec::new(params.m_prime, params.q_prime)?,
            a,
        );
    Ok(LcltApprox { approximation, error_budget: 1.0 / (sn * params.sigma_sq), exact })
}

/// Sup over `a` of the binomial local CLT error; `scaled` multiplies by `√N σ²`.
pub fn binom_lclt_sup_error(params: LcltParams) -> Result<LcltError> {
    if !(params.sigma_sq > 0.0) {
        return invalid("binomial local CLT needs sigma_sq > 0");
    }
    let sn = (params.n as f64).sqrt();
    let center = sn * params.mu;
    let sd = sn * params.sigma_sq.sqrt();
    let lo = (center - 12.0 * sd).floor() as i64 - 1;
    let hi = (center + 12.0 * sd).ceil() as i64 + 1;
    let mut best = LcltError { sup_error: 0.0, argmax: lo, scaled: 0.0 };
    for a in lo..=hi {
        let r = binom_lclt_approx(params, a)?;
        let err = (r.exact - r.approximation).abs();
        if err > best.sup_error {
            best.sup_error = err;
            best.argmax = a;
        }
    }
    best.scaled = best.sup_error * sn * params.sigma_sq;
    Ok(best)
}

/// Constant in `|g(a;x) - g(b;y)| <= C (|b-a|/a^{3/2} + |x-y|/b)`, calibrated on a
/// log-spaced grid `a, b ∈ [1e-3, 1e3]`, `x, y ∈ [-30, 30]` (10^4 points).
pub const HEAT_LIPSCHITZ_C: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub bound: f64,
    pub difference: f64,
    pub holds: bool,
}

pub fn heat_kernel_lipschitz(a: f64, b: f64, x: f64, y: f64) -> Result<LipschitzCheck> {
    if !(a > 0.0 && a <= b) {
        return invalid(format!("need 0 < a <= b, got a = {a}, b = {b}"));
    }
    let bound = (b - a).abs() / a.powf(1.5) + (x - y).abs() / b;
    let difference = (gauss(a, x) - gauss(b, y)).abs();
    Ok(LipschitzCheck { bound, difference, holds: difference <= HEAT_LIPSCHITZ_C * bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, QuadratureConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn gaussian_examples() {
        assert_relative_eq!(gaussian_density(1.0, 0.0).unwrap(), 0.398_942_280_4, max_relative = 1e-10);
        assert_relative_eq!(gaussian_density(2.0, 0.0).unwrap(), 0.282_094_791_8, max_relative = 1e-10);
        assert!(gaussian_density(0.0, 1.0).is_err());
        let cfg = QuadratureConfig::new(1e-13, 1e-13);
        let r = integrate(|x| gauss(0.7, x), -40.0, 40.0, &[0.0], &cfg).unwrap();
        assert!((r.value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn skellam_examples() {
        let one = PoissonPair::new(1.0, 1.0).unwrap();
        assert_relative_eq!(skellam_match(one, 0), 0.308_508_322_5, max_relative = 1e-9);
        assert_relative_eq!(skellam_match(one, 0), skellam_series(one, 0), max_relative = 1e-14);
        let pr = PoissonPair::new(3.5, 3.5).unwrap();
        assert_relative_eq!(skellam_match(pr, 4), skellam_match(pr, -4), max_relative = 1e-15);
        let p21 = PoissonPair::new(2.0, 1.0).unwrap();
        let expected = (-3.0f64).exp() * 2f64.sqrt() * crate::special::ie(1, 8f64.sqrt()) * 8f64.sqrt().exp();
        assert_relative_eq!(skellam_match(p21, 1), expected, max_relative = 1e-14);
        assert!((skellam_match(p21, 1) - skellam_series(p21, 1)).abs() < 1e-13);
    }

    #[test]
    fn skellam_sums_to_one() {
        let pr = PoissonPair::new(40.0, 7.5).unwrap();
        let total: f64 = (-200..=300).map(|k| skellam_match(pr, k)).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn stein_chen_examples() {
        assert_relative_eq!(stein_chen_bound(10, 0.1).unwrap(), (1.0 - (-1.0f64).exp()) * 0.1, max_relative = 1e-15);
        assert!(stein_chen_bound(10, 1e-12).unwrap() < 1e-20);
        assert!(stein_chen_bound(0, 0.5).is_err());
    }

    #[test]
    fn tv_by_hand_at_m1() {
        let p = 0.5f64;
        let tv = tv_binom_poisson(1, p).unwrap();
        // Only k = 1 has b > π.
        assert_relative_eq!(tv, p - p * (-p).exp(), max_relative = 1e-14);
        assert_eq!(tv_binom_poisson(0, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn poisson_lclt_self_scaling() {
        let a = poisson_lclt_error(PoissonPair::new(50.0, 50.0).unwrap()).unwrap();
        let b = poisson_lclt_error(PoissonPair::new(200.0, 200.0).unwrap()).unwrap();
        assert!(b.scaled <= 2.0 * a.scaled);
        let far = PoissonPair::new(1.0, 1.0).unwrap();
        assert!(skellam_match(far, 60) < 1e-15);
        assert!(gauss(1.0, 60.0 / 2f64.sqrt()) < 1e-15);
    }

    #[test]
    fn binom_lclt_symmetric_case() {
        let p = LcltParams::new(10_000, 10_000, 0.5, 0.5, 10_000).unwrap();
        assert_eq!(p.mu, 0.0);
        let r = binom_lclt_approx(p, 0).unwrap();
        assert_relative_eq!(r.approximation, gauss(0.5, 0.0), max_relative = 1e-15);
        assert!((r.exact - r.approximation).abs() <= r.error_budget);
        assert!(binom_lclt_approx(LcltParams::new(10, 10, 0.0, 1.0, 10).unwrap(), 0).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        let c = heat_kernel_lipschitz(1.0, 1.0, 0.3, 0.3).unwrap();
        assert_eq!(c.bound, 0.0);
        assert_eq!(c.difference, 0.0);
        let c = heat_kernel_lipschitz(1.0, 2.0, 0.0, 0.0).unwrap();
        assert_eq!(c.bound, 1.0);
        assert!((c.difference - 0.117).abs() < 1e-3 && c.holds);
        assert!(heat_kernel_lipschitz(2.0, 1.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn lipschitz_inequality(la in -3.0f64..3.0, lr in 0.0f64..3.0, x in -30.0f64..30.0, y in -30.0f64..30.0) {
            let a = 10f64.powf(la);
            let b = a * 10f64.powf(lr);
            prop_assert!(heat_kernel_lipschitz(a, b, x, y).unwrap().holds);
        }

        #[test]
        fn tv_is_a_distance(m in 0u64..3000, p in 0.0f64..1.0) {
            let tv = tv_binom_poisson(m, p).unwrap();
            prop_assert!((0.0..=1.0).contains(&tv));
        }
    }
}
