//! Exact covariances of the Whittaker Gaussian field as integrals of matching
//! probabilities, their diffusive rescaling, and the logarithmic re-centering
//! constants.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{skellam_match, PoissonPair};
use crate::binom::{match_prob, BinomialSpec};
use crate::error::{invalid, Error, Result};
use crate::lattice::DeathPair;
use crate::quadrature::{geometric_hints_left, geometric_hints_right, integrate, QuadResult, QuadratureConfig, Segment};
use crate::special::i0e;

/// `N`, `η`, the cutoffs `ℓ_N = 1 - r_N = τ_N = N^{-(1/2+η)}` and the time window
/// `[T_0, T_1]` of the primary condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingScheme {
    pub n: u64,
    pub eta: f64,
    pub ell_n: f64,
    pub r_n: f64,
    pub tau_n: f64,
    pub t0: f64,
    pub t1: f64,
}

pub const DEFAULT_ETA: f64 = 0.25;
pub const DEFAULT_T0: f64 = 0.5;
pub const DEFAULT_T1: f64 = 2.0;

impl ScalingScheme {
    pub fn new(n: u64, eta: f64) -> Result<Self> {
        Self::with_window(n, eta, DEFAULT_T0, DEFAULT_T1)
    }

    pub fn with_window(n: u64, eta: f64, t0: f64, t1: f64) -> Result<Self> {
        if n < 16 {
            return invalid(format!("N must be at least 16, got {n}"));
        }
        if !(eta > 0.0 && eta < 0.5) {
            return invalid(format!("eta must lie in (0, 1/2), got {eta}"));
        }
        if !(t0 > 0.0 && t0 < 1.0 && t1 > 1.0) {
            return invalid(format!("need 0 < T0 < 1 < T1, got T0 = {t0}, T1 = {t1}"));
        }
        let nf = n as f64;
        if (0.5 * t0 * nf.powf(0.5 - eta)).floor() < 1.0 {
            return invalid(format!("N = {n} is too small for T0 = {t0}, eta = {eta}: floor(T0 N^(1/2-eta)/2) < 1"));
        }
        let ell = nf.powf(-(0.5 + eta));
        Ok(Self { n, eta, ell_n: ell, r_n: 1.0 - ell, tau_n: ell, t0, t1 })
    }

    /// Verifies the primary condition for the space-time pair.
    pub fn check_primary(&self, p1: &SpaceTimePoint, p2: &SpaceTimePoint) -> Result<()> {
        let half = 0.5 * (self.n as f64).powf(self.eta);
        for (name, v) in [("x1", p1.x[0]), ("x2", p1.x[1]), ("y1", p2.x[0]), ("y2", p2.x[1])] {
            if v.abs() > half {
                return Err(Error::Precondition(format!(
                    "primary condition: {name} = {v} outside [-N^eta/2, N^eta/2] = [-{half}, {half}]"
                )));
            }
        }
        if !(self.t0 <= p1.t && p1.t <= p2.t && p2.t <= self.t1) {
            return Err(Error::Precondition(format!(
                "primary condition: need T0 <= s <= t <= T1, got s = {}, t = {} on [{}, {}]",
                p1.t, p2.t, self.t0, self.t1
            )));
        }
        Ok(())
    }
}

/// Rescaled space point `x` at macroscopic time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub x: [f64; 2],
    pub t: f64,
}

impl SpaceTimePoint {
    pub fn new(x: [f64; 2], t: f64) -> Self {
        Self { x, t }
    }

    /// Lattice indices `(M(x_1, t), M(x_2, t))`.
    pub fn indices(&self, n: u64) -> Result<[u64; 2]> {
        Ok([lattice_index(self.x[0], self.t, n)?, lattice_index(self.x[1], self.t, n)?])
    }
}

/// `⌊Nr + Nr·u/√N⌋`. Values within `1e-12` relative of an integer are snapped to
/// it so that exact products such as `N = 100, u = 1, r = 1` floor correctly.
pub fn lattice_index(u: f64, r: f64, n: u64) -> Result<u64> {
    let nf = n as f64;
    let sn = nf.sqrt();
    if u < -sn {
        return invalid(format!("u = {u} < -sqrt(N) = {}", -sn));
    }
    if !(r > 0.0) {
        return invalid(format!("time must be positive, got {r}"));
    }
    let v = nf * r + nf * r * u / sn;
    let near = v.round();
    let f = if (v - near).abs() <= 1e-12 * near.abs().max(1.0) { near } else { v.floor() };
    Ok(f.max(0.0) as u64)
}

/// Finite-N and limiting means and variances of the rescaled difference
/// `N^{-1/2}(S_{M_j}(r/s) - S'_{M'_j}(r/t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    pub mu_n: [f64; 2],
    pub sigma_n_sq: [f64; 2],
    pub mu: [f64; 2],
    pub sigma_sq: [f64; 2],
}

pub fn profiles(x: [f64; 2], y: [f64; 2], s: f64, t: f64, r: f64, n: u64) -> Result<Profiles> {
    if !(0.0 < r && r <= s && s <= t) {
        return invalid(format!("need 0 < r <= s <= t, got r = {r}, s = {s}, t = {t}"));
    }
    let nf = n as f64;
    let mut out = Profiles { mu_n: [0.0; 2], sigma_n_sq: [0.0; 2], mu: [0.0; 2], sigma_sq: [0.0; 2] };
    for j in 0..2 {
        let m = lattice_index(x[j], s, n)? as f64;
        let mp = lattice_index(y[j], t, n)? as f64;
        let (ps, pt) = (r / s, r / t);
        out.mu_n[j] = (m * ps - mp * pt) / nf.sqrt();
        out.sigma_n_sq[j] = m / nf * ps * (1.0 - ps) + mp / nf * pt * (1.0 - pt);
        out.mu[j] = (x[j] - y[j]) * r;
        out.sigma_sq[j] = r * (2.0 - r / s - r / t);
    }
    Ok(out)
}

fn check_times(s: f64, t: f64) -> Result<()> {
    if !(s > 0.0 && s <= t) {
        return invalid(format!("need 0 < s <= t, got s = {s}, t = {t}"));
    }
    Ok(())
}

/// `Π_j P(S_{m_j}(r/s) = S'_{m'_j}(r/t))`.
pub fn matching_product(m: [u64; 2], mp: [u64; 2], r: f64, s: f64, t: f64) -> f64 {
    let mut v = 1.0;
    for j in 0..2 {
        let a = BinomialSpec::from_ratio(m[j], r.min(s), s).expect("r within [0, s]");
        let b = BinomialSpec::from_ratio(mp[j], r.min(t), t).expect("r within [0, t]");
        v *= match_prob(a, b, 0);
    }
    v
}

fn endpoint_hints(a: f64, b: f64, scale: u64) -> Vec<f64> {
    let levels = ((scale.max(1) as f64).log2().ceil() as usize + 3).min(60);
    let mut h = geometric_hints_left(a, b, levels);
    h.extend(geometric_hints_right(a, b, levels));
    h
}

/// `Cov[ζ_s Σ(m); ζ_t Σ(m')] = ∫_0^s Π_j P(S_{m_j}(r/s) = S'_{m'_j}(r/t)) dr`.
pub fn covariance_exact(m: DeathPair, m_prime: DeathPair, s: f64, t: f64, quad: &QuadratureConfig) -> Result<f64> {
    Ok(covariance_exact_detailed(m, m_prime, s, t, quad)?.value)
}

pub fn covariance_exact_detailed(
    m: DeathPair,
    m_prime: DeathPair,
    s: f64,
    t: f64,
    quad: &QuadratureConfig,
) -> Result<QuadResult> {
    check_times(s, t)?;
    let a = [m.m1, m.m2];
    let b = [m_prime.m1, m_prime.m2];
    let scale = m.max_norm().max(m_prime.max_norm());
    let hints = endpoint_hints(0.0, s, scale);
    integrate(|r| matching_product(a, b, r, s, t), 0.0, s, &hints, quad)
}

/// Result of one rescaled covariance evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub n: u64,
    pub raw_value: f64,
    pub recentered_value: f64,
    pub quadrature_error: f64,
    /// Left Poisson interval, middle normal interval, right Poisson interval
    /// (zero when `t - s > τ_N`).
    pub interval_breakdown: [f64; 3],
    /// `s = t` and `x = y`: the raw value is finite but no limit exists.
    pub no_limit: bool,
}

/// The three integrals forming `∫_0^{Ns} 𝔟^N dr`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledPieces {
    pub left: QuadResult,
    pub middle: QuadResult,
    pub right: Option<QuadResult>,
}

impl RescaledPieces {
    pub fn total(&self) -> f64 {
        self.left.value + self.middle.value + self.right.as_ref().map_or(0.0, |r| r.value)
    }

    pub fn error(&self) -> f64 {
        self.left.error + self.middle.error + self.right.as_ref().map_or(0.0, |r| r.error)
    }
}

/// Integrals of the rescaled kernel over the decomposition of `[0, Ns]`, without
/// checking the primary condition. Poisson intervals use the microscopic time
/// (the right one measured backward from `Ns`); the middle interval uses the
/// macroscopic time.
pub fn rescaled_pieces(
    m: [u64; 2],
    mp: [u64; 2],
    s: f64,
    t: f64,
    scheme: &ScalingScheme,
    quad: &QuadratureConfig,
) -> Result<RescaledPieces> {
    check_times(s, t)?;
    let nf = scheme.n as f64;
    let ns = nf * s;
    let nt = nf * t;
    let ell = scheme.ell_n;
    let three = t - s <= scheme.tau_n;
    let left_end = ns * ell;
    let micro_left = |r: f64| {
        let mut v = 1.0;
        for j in 0..2 {
            let a = BinomialSpec::from_ratio(m[j], r, ns).expect("r in range");
            let b = BinomialSpec::from_ratio(mp[j], r, nt).expect("r in range");
            v *= match_prob(a, b, 0);
        }
        v
    };
    let lh: Vec<f64> = (0..64).map(|k| 2f64.powi(k) * 0.125).take_while(|h| *h < left_end).collect();
    let left = integrate(micro_left, 0.0, left_end, &lh, quad)?;
    let mid_hi = if three { s * scheme.r_n } else { s };
    let mid = |r: f64| nf * matching_product(m, mp, r, s, t);
    let mut mh: Vec<f64> = Vec::new();
    let mut h = 2.0 * s * ell;
    while h < 0.5 * s {
        mh.push(h);
        h *= 2.0;
    }
    mh.push(0.5 * s);
    let mut d = 2.0 * s * ell;
    while d < 0.5 * s {
        mh.push(s - d);
        d *= 2.0;
    }
    let middle = integrate(mid, s * ell, mid_hi, &mh, quad)?;
    let right = if three {
        let u_end = ns * ell;
        let micro_right = |u: f64| {
            let mut v = 1.0;
            for j in 0..2 {
                let a = BinomialSpec::with_complement(m[j], (ns - u) / ns, u / ns).expect("u in range");
                let bp = (ns - u) / nt;
                let b = BinomialSpec::with_complement(mp[j], bp, (nt - ns + u) / nt).expect("u in range");
                v *= match_prob(a, b, 0);
            }
            v
        };
        let rh: Vec<f64> = (0..64).map(|k| 2f64.powi(k) * 0.125).take_while(|h| *h < u_end).collect();
        Some(integrate(micro_right, 0.0, u_end, &rh, quad)?)
    } else {
        None
    };
    Ok(RescaledPieces { left, middle, right })
}

/// `Cov[ζ^N(x,s); ζ^N(y,t)]` and its re-centered value.
pub fn covariance_rescaled(
    p1: SpaceTimePoint,
    p2: SpaceTimePoint,
    scheme: &ScalingScheme,
    quad: &QuadratureConfig,
) -> Result<CovarianceReport> {
    if p1.t > p2.t {
        return invalid(format!("need s <= t, got s = {}, t = {}", p1.t, p2.t));
    }
    scheme.check_primary(&p1, &p2)?;
    let m = p1.indices(scheme.n)?;
    let mp = p2.indices(scheme.n)?;
    let pieces = rescaled_pieces(m, mp, p1.t, p2.t, scheme, quad)?;
    let raw = pieces.total();
    let c_n = recentering_constant(scheme.n, quad)?;
    Ok(CovarianceReport {
        n: scheme.n,
        raw_value: raw,
        recentered_value: raw - c_n,
        quadrature_error: pieces.error(),
        interval_breakdown: [
            pieces.left.value,
            pieces.middle.value,
            pieces.right.as_ref().map_or(0.0, |r| r.value),
        ],
        no_limit: p1.t == p2.t && p1.x == p2.x,
    })
}

/// One cell of a convergence sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub p1: SpaceTimePoint,
    pub p2: SpaceTimePoint,
    pub scheme: ScalingScheme,
}

/// Evaluates every cell in parallel; results keep the input order.
pub fn sweep_rescaled(cells: &[SweepCell], quad: &QuadratureConfig) -> Vec<Result<CovarianceReport>> {
    cells.par_iter().map(|c| covariance_rescaled(c.p1, c.p2, &c.scheme, quad)).collect()
}

/// Left Poisson-interval contribution next to its Skellam surrogate with means
/// `M_j r/(Ns)`, `M'_j r/(Nt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateComparison {
    pub binomial: f64,
    pub poisson: f64,
    pub difference: f64,
    pub quadrature_error: f64,
}

pub fn poisson_surrogate_left(
    p1: SpaceTimePoint,
    p2: SpaceTimePoint,
    scheme: &ScalingScheme,
    quad: &QuadratureConfig,
) -> Result<SurrogateComparison> {
    let m = p1.indices(scheme.n)?;
    let mp = p2.indices(scheme.n)?;
    let pieces = rescaled_pieces(m, mp, p1.t, p2.t, scheme, quad)?;
    let nf = scheme.n as f64;
    let (ns, nt) = (nf * p1.t, nf * p2.t);
    let left_end = ns * scheme.ell_n;
    let f = |r: f64| {
        let mut v = 1.0;
        for j in 0..2 {
            let pair = PoissonPair { lambda: m[j] as f64 * r / ns, lambda_prime: mp[j] as f64 * r / nt };
            v *= skellam_match(pair, 0);
        }
        v
    };
    let lh: Vec<f64> = (0..64).map(|k| 2f64.powi(k) * 0.125).take_while(|h| *h < left_end).collect();
    let sur = integrate(f, 0.0, left_end, &lh, quad)?;
    Ok(SurrogateComparison {
        binomial: pieces.left.value,
        poisson: sur.value,
        difference: (pieces.left.value - sur.value).abs(),
        quadrature_error: pieces.left.error + sur.error,
    })
}

/// The constant `𝔠_1` with its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantReport {
    pub value: f64,
    /// Quadrature error plus the tail certificate.
    pub error: f64,
    pub truncation: f64,
    pub tail: f64,
    pub tail_bound: f64,
    pub segments: Vec<Segment>,
}

pub const DEFAULT_C1_RMAX: f64 = 1e6;

/// Integrand of `𝔠_1`: `P(V(r) = V'(r))² + (e^{-1/(4r)} - 2·1_{r>=1})/(4πr)`.
pub fn c1_integrand(r: f64) -> f64 {
    if r <= 0.0 {
        return 1.0;
    }
    let p = skellam_match(PoissonPair { lambda: r, lambda_prime: r }, 0);
    let ind = if r >= 1.0 { 2.0 } else { 0.0 };
    p * p + ((-0.25 / r).exp() - ind) / (4.0 * PI * r)
}

/// Coefficients `d_k` of `(i0e(x) √(2πx))² = Σ d_k x^{-k}`.
fn squared_hankel_coefficients(n: usize) -> Vec<f64> {
    let mut c = vec![1.0; n + 1];
    for k in 1..=n {
        let kf = k as f64;
        c[k] = c[k - 1] * (2.0 * kf - 1.0).powi(2) / (8.0 * kf);
    }
    (0..=n).map(|k| (0..=k).map(|j| c[j] * c[k - j]).sum()).collect()
}

/// `∫_R^∞ c1_integrand` from the large-`r` expansion, with the first omitted
/// term as the error bound.
pub fn c1_tail(big_r: f64) -> (f64, f64) {
    let n = 12;
    let d = squared_hankel_coefficients(n + 1);
    let mut fact = 1.0;
    let mut sum = 0.0;
    let mut last = 0.0;
    for k in 1..=n + 1 {
        fact *= k as f64;
        let coeff = d[k] * 0.5f64.powi(k as i32) + (-0.25f64).powi(k as i32) / fact;
        let term = coeff * big_r.powi(-(k as i32)) / (4.0 * PI * k as f64);
        if k == n + 1 {
            last = term.abs();
        } else {
            sum += term;
        }
    }
    (sum, last)
}

pub fn c1_constant_with(quad: &QuadratureConfig, r_max: f64) -> Result<ConstantReport> {
    if !(r_max > 10.0) {
        return invalid(format!("R_max must exceed 10, got {r_max}"));
    }
    let mut hints = vec![1.0];
    let mut h = 1.0;
    while h > 1e-3 {
        h *= 0.5;
        hints.push(h);
    }
    let mut h = 2.0;
    while h < r_max {
        hints.push(h);
        h *= 2.0;
    }
    let q = integrate(c1_integrand, 0.0, r_max, &hints, quad)?;
    let (tail, tail_bound) = c1_tail(r_max);
    Ok(ConstantReport {
        value: q.value + tail,
        error: q.error + tail_bound,
        truncation: r_max,
        tail,
        tail_bound,
        segments: q.segments,
    })
}

/// `𝔠_1`, integrated to `R_max = 10^6` with the asymptotic tail added.
pub fn c1_constant(quad: &QuadratureConfig) -> Result<f64> {
    Ok(c1_constant_with(quad, DEFAULT_C1_RMAX)?.value)
}

/// `𝔠_N = 𝔠_1 + ln N/(4π)`.
pub fn recentering_constant(n: u64, quad: &QuadratureConfig) -> Result<f64> {
    if n < 1 {
        return invalid("N must be at least 1");
    }
    Ok(c1_constant(quad)? + (n as f64).ln() / (4.0 * PI))
}

/// Squared increment `E|ζ_s Σ(m) - ζ_t Σ(m)|²` and its ratio to `(‖m‖_∞ ∨ 1)|t-s|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementReport {
    pub value: f64,
    pub ratio: f64,
    pub terms: [f64; 3],
}

/// Assembled as `∫_s^t K(t,t) - [∫_0^s K(s,t) - K(s,s)] - [∫_0^s K(s,t) - K(t,t)]`.
pub fn increment_metric(m: DeathPair, s: f64, t: f64, quad: &QuadratureConfig) -> Result<IncrementReport> {
    if !(0.0 <= s && s <= t) {
        return invalid(format!("need 0 <= s <= t, got s = {s}, t = {t}"));
    }
    let a = [m.m1, m.m2];
    let hints = endpoint_hints(s, t, m.max_norm());
    let first = integrate(|r| matching_product(a, a, r, t, t), s, t, &hints, quad)?.value;
    let (second, third) = if s > 0.0 {
        let h0 = endpoint_hints(0.0, s, m.max_norm());
        let st = integrate(|r| matching_product(a, a, r, s, t), 0.0, s, &h0, quad)?.value;
        let ss = integrate(|r| matching_product(a, a, r, s, s), 0.0, s, &h0, quad)?.value;
        let tt = integrate(|r| matching_product(a, a, r, t, t), 0.0, s, &h0, quad)?.value;
        (st - ss, st - tt)
    } else {
        (0.0, 0.0)
    };
    let value = first - second - third;
    let denom = (m.max_norm().max(1) as f64) * (t - s);
    let ratio = if denom > 0.0 { value / denom } else { 0.0 };
    Ok(IncrementReport { value, ratio, terms: [first, second, third] })
}

/// `e^{-2r} I_0(2r)`, the equal-mean Skellam atom at 0, for callers needing it
/// without a `PoissonPair`.
pub fn poisson_coincidence(r: f64) -> f64 {
    i0e(2.0 * r)
}
