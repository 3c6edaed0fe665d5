//! Limiting covariance kernels: the 2D heat semigroup, the constant `κ_0`, the
//! glue identity for `∫_0^T Q_{2r} dr`, the pointwise and weak-form limits, and
//! the re-centering projection on Gaussian mixtures.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quadrature::{geometric_hints_right, integrate, QuadratureConfig, Segment};
use crate::special::KahanSum;

/// One isotropic bump `weight · g(width; |· - center|)` in two dimensions;
/// `width` is the per-coordinate variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureTerm {
    pub weight: f64,
    pub center: [f64; 2],
    pub width: f64,
}

/// Finite signed combination of Gaussian bumps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub terms: Vec<MixtureTerm>,
}

pub const MASS_ZERO_TOL: f64 = 1e-14;

impl GaussianMixture {
    pub fn new(terms: Vec<MixtureTerm>) -> Result<Self> {
        for t in &terms {
            if !(t.width > 0.0) {
                return invalid(format!("mixture widths must be positive, got {}", t.width));
            }
        }
        Ok(Self { terms })
    }

    pub fn bump(weight: f64, center: [f64; 2], width: f64) -> Result<Self> {
        Self::new(vec![MixtureTerm { weight, center, width }])
    }

    /// `φ(x) = bump(center_a) - bump(center_b)` with unit weights.
    pub fn dipole(center_a: [f64; 2], center_b: [f64; 2], width: f64) -> Result<Self> {
        Self::new(vec![
            MixtureTerm { weight: 1.0, center: center_a, width },
            MixtureTerm { weight: -1.0, center: center_b, width },
        ])
    }

    pub fn total_mass(&self) -> f64 {
        let mut acc = KahanSum::new();
        for t in &self.terms {
            acc.add(t.weight);
        }
        acc.value()
    }

    pub fn is_mass_zero(&self) -> bool {
        self.total_mass().abs() <= MASS_ZERO_TOL
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let d2 = (x[0] - t.center[0]).powi(2) + (x[1] - t.center[1]).powi(2);
                t.weight * (-d2 / (2.0 * t.width)).exp() / (2.0 * PI * t.width)
            })
            .sum()
    }

    /// `Q_u φ`: every width grows by `u`.
    pub fn heat(&self, u: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|t| MixtureTerm { width: t.width + u, ..*t }).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|t| MixtureTerm { weight: t.weight * c, ..*t }).collect(),
        }
    }

    pub fn combined(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().copied());
        Self { terms }
    }
}

/// The default re-centering bump: unit weight and width at the origin.
pub fn default_psi() -> GaussianMixture {
    GaussianMixture { terms: vec![MixtureTerm { weight: 1.0, center: [0.0, 0.0], width: 1.0 }] }
}

/// `Rφ = φ - (∫φ) ψ`. A mixture already of mass zero (within
/// [`MASS_ZERO_TOL`]) is returned unchanged, which makes `R` idempotent termwise.
pub fn recenter(phi: &GaussianMixture, psi: &GaussianMixture) -> Result<GaussianMixture> {
    let pm = psi.total_mass();
    if (pm - 1.0).abs() > 1e-12 {
        return invalid(format!("psi must have total mass 1, got {pm}"));
    }
    let mass = phi.total_mass();
    if mass.abs() <= MASS_ZERO_TOL {
        return Ok(phi.clone());
    }
    Ok(phi.combined(&psi.scaled(-mass)))
}

/// Arguments of `Q_t(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelQuery {
    pub time: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

/// `Q_t(x, y) = (2πt)^{-1} exp(-|x-y|²/(2t))`.
pub fn heat_semigroup(q: HeatKernelQuery) -> Result<f64> {
    if !(q.time > 0.0) {
        return invalid(format!("heat kernel time must be positive, got {}", q.time));
    }
    Ok(heat_density(q.time, dist2(q.x, q.y)))
}

#[inline]
pub(crate) fn heat_density(t: f64, d2: f64) -> f64 {
    (-d2 / (2.0 * t)).exp() / (2.0 * PI * t)
}

#[inline]
fn dist2(x: [f64; 2], y: [f64; 2]) -> f64 {
    (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)
}

/// A constant obtained by quadrature plus an asymptotic tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantAudit {
    pub value: f64,
    pub error: f64,
    pub truncation: f64,
    pub tail: f64,
    pub tail_bound: f64,
    pub segments: Vec<Segment>,
}

/// `∫_R^∞ (e^{-c/ρ} - 1)/(4πρ) dρ = (1/4π) Σ_{n>=1} (-c/R)^n/(n·n!)`, with
/// the first omitted term as error bound (the series alternates once `n > c/R`).
fn log_tail_series(c: f64, big_r: f64) -> (f64, f64) {
    let x = c / big_r;
    let mut term = 1.0;
    let mut sum = 0.0;
    for n in 1..200 {
        term *= -x / n as f64;
        let add = term / n as f64;
        sum += add;
        if add.abs() < 1e-18 * sum.abs().max(1e-300) && n as f64 > x {
            let next = (term * x / (n + 1) as f64 / (n + 1) as f64).abs();
            return (sum / (4.0 * PI), next / (4.0 * PI));
        }
    }
    (sum / (4.0 * PI), (term / 200.0).abs() / (4.0 * PI))
}

fn kappa_integrand(v: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let ind = if v >= 1.0 { 1.0 } else { 0.0 };
    ((-0.25 / v).exp() - ind) / (4.0 * PI * v)
}

/// `∫_a^∞ (e^{-1/(4v)} - 1_{v>=1})/(4πv) dv` for `a > 0`, split at 1 and closed
/// by the tail series beyond `max(a, 1)·1e3`.
fn kappa_integral_from(a: f64, quad: &QuadratureConfig) -> Result<(f64, f64, Vec<Segment>, f64, f64)> {
    let big_r = a.max(1.0) * 1e3;
    let mut hints = vec![1.0];
    let mut h = 1.0;
    while h > a.max(1e-3) {
        h *= 0.5;
        hints.push(h);
    }
    let mut h = 2.0;
    while h < big_r {
        hints.push(h);
        h *= 2.0;
    }
    let q = integrate(kappa_integrand, a, big_r, &hints, quad)?;
    let (tail, tail_bound) = log_tail_series(0.25, big_r);
    Ok((q.value + tail, q.error + tail_bound, q.segments, tail, tail_bound))
}

/// `κ_0 = ∫_0^∞ (e^{-1/(4v)} - 1_{v>=1})/(4πv) dv`.
pub fn kappa0_audit(quad: &QuadratureConfig) -> Result<ConstantAudit> {
    let mut hints = vec![1.0];
    let mut h = 1.0;
    while h > 1e-3 {
        h *= 0.5;
        hints.push(h);
    }
    let head = integrate(kappa_integrand, 0.0, 1.0, &hints, quad)?;
    let (rest, rest_err, mut segs, tail, tail_bound) = kappa_integral_from(1.0, quad)?;
    let mut segments = head.segments;
    segments.append(&mut segs);
    Ok(ConstantAudit {
        value: head.value + rest,
        error: head.error + rest_err,
        truncation: 1e3,
        tail,
        tail_bound,
        segments,
    })
}

pub fn kappa0_constant(quad: &QuadratureConfig) -> Result<f64> {
    Ok(kappa0_audit(quad)?.value)
}

fn kappa0_cached() -> f64 {
    static K: OnceLock<f64> = OnceLock::new();
    *K.get_or_init(|| kappa0_constant(&QuadratureConfig::new(1e-15, 1e-14)).expect("κ_0 quadrature converges"))
}

/// `∫_0^T Q_{2r+a}(d) dr` for `|x - y|² = d2`, with breakpoints where the
/// Gaussian factor switches on.
fn smoothed_log_integral(d2: f64, a: f64, big_t: f64, quad: &QuadratureConfig) -> Result<(f64, f64)> {
    let f = |r: f64| heat_density(2.0 * r + a, d2);
    let mut hints = Vec::new();
    let mut h = (d2.max(a).max(1e-6)) / 64.0;
    while h < big_t {
        hints.push(h);
        h *= 2.0;
    }
    let q = integrate(f, 0.0, big_t, &hints, quad)?;
    Ok((q.value, q.error))
}

/// Sides of the glue identity and its three correction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlueReport {
    pub lhs: f64,
    pub rhs: f64,
    pub eps: [f64; 3],
    pub residual: f64,
}

/// `∫_0^T Q_{2r}(y1,y2) dr = κ_0 - (1/2π) ln|y1-y2| + ln T/(4π) + ε_1 + ε_2 + ε_3`.
pub fn glue_identity_check(y1: [f64; 2], y2: [f64; 2], big_t: f64, quad: &QuadratureConfig) -> Result<GlueReport> {
    let d2 = dist2(y1, y2);
    if d2 == 0.0 {
        return invalid("glue identity needs y1 != y2");
    }
    if !(big_t > 0.0) {
        return invalid(format!("T must be positive, got {big_t}"));
    }
    let (lhs, _) = smoothed_log_integral(d2, 0.0, big_t, quad)?;
    let v = big_t / d2;
    let (tail, _, _, _, _) = kappa_integral_from(v, quad)?;
    let eps1 = -tail;
    let inside = v > 0.0 && v < 1.0;
    let eps2 = if inside { -big_t.ln() / (4.0 * PI) } else { 0.0 };
    let eps3 = if inside { d2.sqrt().ln() / (2.0 * PI) } else { 0.0 };
    let kappa = kappa0_constant(quad)?;
    let rhs = kappa - d2.sqrt().ln() / (2.0 * PI) + big_t.ln() / (4.0 * PI) + eps1 + eps2 + eps3;
    Ok(GlueReport { lhs, rhs, eps: [eps1, eps2, eps3], residual: (lhs - rhs).abs() })
}

/// `κ_0 - (1/2π) ln|x - y| = ∫_0^∞ (Q_{2r}(x,y) - 1_{r>=1}/(4πr)) dr`.
pub fn stationary_kernel(x: [f64; 2], y: [f64; 2]) -> Result<f64> {
    let d2 = dist2(x, y);
    if d2 == 0.0 {
        return invalid("stationary kernel is singular at x = y");
    }
    Ok(kappa0_cached() - d2.ln() / (4.0 * PI))
}

/// `lim_T [∫_0^T Q_{2r+σ²}(d) dr - ln T/(4π) - κ_0]`, i.e. the log kernel
/// `-(1/2π) E ln|Z|` with `Z ~ N(d, σ² I)`.
///
/// A finite `T` is used and the remainder `∫_T^∞ (Q_{2r+σ²} - 1/(4πr)) dr` is
/// added in closed form: shifting `ρ = r + σ²/2` turns it into the exponential
/// tail series at `T' = T + σ²/2` minus `ln(T'/T)/(4π)`.
pub fn smoothed_log_kernel(d2: f64, sigma_sq: f64, quad: &QuadratureConfig) -> Result<(f64, f64)> {
    if !(sigma_sq > 0.0) {
        return invalid(format!("smoothing variance must be positive, got {sigma_sq}"));
    }
    let big_t = 1e3 * (1.0 + d2 + sigma_sq);
    let (head, err) = smoothed_log_integral(d2, sigma_sq, big_t, quad)?;
    let tp = big_t + 0.5 * sigma_sq;
    let (series, series_bound) = log_tail_series(0.25 * d2, tp);
    let remainder = series - (tp / big_t).ln() / (4.0 * PI);
    let kappa = kappa0_constant(quad)?;
    Ok((head - big_t.ln() / (4.0 * PI) - kappa + remainder, err + series_bound))
}

/// `∫_0^{h} Q_{v - 2r}(d) dr` with `v - 2h >= 0`.
fn backward_heat_integral(d2: f64, v: f64, h: f64, quad: &QuadratureConfig) -> Result<(f64, f64)> {
    let f = |r: f64| {
        let w = v - 2.0 * r;
        if w <= 0.0 {
            0.0
        } else {
            heat_density(w, d2)
        }
    };
    let levels = 40;
    let hints = geometric_hints_right(0.0, h, levels);
    let q = integrate(f, 0.0, h, &hints, quad)?;
    Ok((q.value, q.error))
}

/// Two parts of the limit covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub value: f64,
    pub log_part: f64,
    pub heat_part: f64,
    pub error: f64,
}

/// The limit of the re-centered covariance at `((x,s), (y,t))`.
pub fn limit_covariance_point(x: [f64; 2], s: f64, y: [f64; 2], t: f64, quad: &QuadratureConfig) -> Result<f64> {
    Ok(limit_covariance_detailed(x, s, y, t, quad)?.value)
}

pub fn limit_covariance_detailed(x: [f64; 2], s: f64, y: [f64; 2], t: f64, quad: &QuadratureConfig) -> Result<LimitReport> {
    if !(s > 0.0 && s <= t) {
        return invalid(format!("need 0 < s <= t, got s = {s}, t = {t}"));
    }
    let d2 = dist2(x, y);
    if s == t && d2 == 0.0 {
        return invalid("no limit exists for s = t and x = y");
    }
    let a = 1.0 / s + 1.0 / t;
    let (log_part, e1) = smoothed_log_kernel(d2, a, quad)?;
    let (heat_part, e2) = backward_heat_integral(d2, a, 1.0 / t, quad)?;
    Ok(LimitReport { value: log_part + heat_part, log_part, heat_part, error: e1 + e2 })
}

/// Weak limit of the covariance of `ζ_s(φ1)` and `ζ_t(φ2)`, summed over pairs of
/// mixture terms.
pub fn weak_limit_covariance(
    phi1: &GaussianMixture,
    phi2: &GaussianMixture,
    s: f64,
    t: f64,
    quad: &QuadratureConfig,
) -> Result<f64> {
    Ok(weak_limit_detailed(phi1, phi2, s, t, quad)?.value)
}

pub fn weak_limit_detailed(
    phi1: &GaussianMixture,
    phi2: &GaussianMixture,
    s: f64,
    t: f64,
    quad: &QuadratureConfig,
) -> Result<LimitReport> {
    if !(s > 0.0 && s <= t) {
        return invalid(format!("need 0 < s <= t, got s = {s}, t = {t}"));
    }
    let mut log_part = KahanSum::new();
    let mut heat_part = KahanSum::new();
    let mut error = 0.0;
    for a in &phi1.terms {
        for b in &phi2.terms {
            let w = a.weight * b.weight;
            let d2 = dist2(a.center, b.center);
            let v = a.width + b.width + 1.0 / s + 1.0 / t;
            let (l, e1) = smoothed_log_kernel(d2, v, quad)?;
            let (h, e2) = backward_heat_integral(d2, v, 1.0 / t, quad)?;
            log_part.add(w * l);
            heat_part.add(w * h);
            error += w.abs() * (e1 + e2);
        }
    }
    let (l, h) = (log_part.value(), heat_part.value());
    Ok(LimitReport { value: l + h, log_part: l, heat_part: h, error })
}
