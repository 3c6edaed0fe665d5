//! Binomial pmfs, matching probabilities `P(S_m(p) = S'_{m'}(p') + n)` and the
//! exact algebraic identities used as tools for the covariance kernels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::special::{dbinom_raw, KahanSum};

/// Upper bound on the tail mass dropped on each side of a pmf window.
pub const WINDOW_TAIL: f64 = 1e-16;

const REANCHOR: usize = 32;

/// Parameters of `S_m(p)`. The complement `q = 1 - p` is stored so that callers
/// holding `p = r/s` close to 1 can supply `q = (s - r)/s` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialSpec {
    pub m: u64,
    pub p: f64,
    q: f64,
}

impl BinomialSpec {
    pub fn new(m: u64, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("success probability {p} outside [0,1]"));
        }
        Ok(Self { m, p, q: 1.0 - p })
    }

    /// `p = r/a` with the complement computed as `(a - r)/a`.
    pub fn from_ratio(m: u64, r: f64, a: f64) -> Result<Self> {
        if !(a > 0.0) || r < 0.0 || r > a {
            return invalid(format!("ratio {r}/{a} is not a probability"));
        }
        Ok(Self { m, p: r / a, q: (a - r) / a })
    }

    /// Explicit `p` and complement `q`; they must sum to 1 up to rounding.
    pub fn with_complement(m: u64, p: f64, q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) || (p + q - 1.0).abs() > 1e-12 {
            return invalid(format!("p = {p} and q = {q} are not complementary"));
        }
        Ok(Self { m, p, q })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Law of `m - S_m(p)`.
    pub fn complement(&self) -> Self {
        Self { m: self.m, p: self.q, q: self.p }
    }

    pub fn mean(&self) -> f64 {
        self.m as f64 * self.p
    }

    pub fn variance(&self) -> f64 {
        self.m as f64 * self.p * self.q
    }

    /// Index range outside of which each tail carries mass below [`WINDOW_TAIL`].
    ///
    /// The half-width is the larger of 12 standard deviations and the Bernstein
    /// radius `t` solving `2 exp(-t²/(2(v + t/3))) = WINDOW_TAIL`.
    pub fn window(&self) -> (u64, u64) {
        if self.p == 0.0 {
            return (0, 0);
        }
        if self.q == 0.0 {
            return (self.m, self.m);
        }
        let v = self.variance();
        let l = (2.0 / WINDOW_TAIL).ln();
        let bern = l / 3.0 + (l * l / 9.0 + 2.0 * l * v).sqrt();
        let h = (12.0 * v.sqrt()).max(bern) + 1.0;
        let mu = self.mean();
        let lo = (mu - h).ceil().max(0.0) as u64;
        let hi = ((mu + h).floor() as u64).min(self.m);
        (lo, hi)
    }
}

/// `P(S_m(p) = k)`.
pub fn binom_pmf(spec: BinomialSpec, k: i64) -> f64 {
    if k < 0 {
        return 0.0;
    }
    dbinom_raw(k as u64, spec.m, spec.p, spec.q)
}

/// pmf values for `k = lo..=hi`, from ratio recurrences re-anchored on the exact
/// pmf every few steps. Depends only on `(spec, lo, hi)`.
pub fn binom_window_values(spec: BinomialSpec, lo: u64, hi: u64) -> Vec<f64> {
    if hi < lo {
        return Vec::new();
    }
    let len = (hi - lo + 1) as usize;
    let mut out = vec![0.0; len];
    if spec.p == 0.0 || spec.q == 0.0 {
        for (i, v) in out.iter_mut().enumerate() {
            *v = dbinom_raw(lo + i as u64, spec.m, spec.p, spec.q);
        }
        return out;
    }
    let mode = ((spec.m as f64 + 1.0) * spec.p).floor() as u64;
    let anchor = mode.clamp(lo, hi.min(spec.m).max(lo));
    let up = spec.p / spec.q;
    let down = spec.q / spec.p;
    let ai = (anchor - lo) as usize;
    out[ai] = dbinom_raw(anchor, spec.m, spec.p, spec.q);
    let m = spec.m as f64;
    for i in ai + 1..len {
        let k = lo + i as u64;
        if (i - ai) % REANCHOR == 0 || k > spec.m {
            out[i] = dbinom_raw(k, spec.m, spec.p, spec.q);
        } else {
            let km1 = (k - 1) as f64;
            out[i] = out[i - 1] * (m - km1) / (km1 + 1.0) * up;
        }
    }
    for i in (0..ai).rev() {
        let k = lo + i as u64;
        if (ai - i) % REANCHOR == 0 {
            out[i] = dbinom_raw(k, spec.m, spec.p, spec.q);
        } else {
            let kp1 = (k + 1) as f64;
            out[i] = out[i + 1] * kp1 / (m - kp1 + 1.0) * down;
        }
    }
    out
}

/// `P(S_{m1}(p1) = S'_{m2}(p2) + shift)`, summed over the intersection of the
/// two certified windows. The omitted mass is below `2·WINDOW_TAIL`.
///
/// Terms are accumulated in increasing `k` with the factor of `s1` on the left,
/// so `match_prob(a, b, 0)` and `match_prob(b, a, 0)` are bitwise equal.
pub fn match_prob(s1: BinomialSpec, s2: BinomialSpec, shift: i64) -> f64 {
    let (lo1, hi1) = s1.window();
    let (lo2, hi2) = s2.window();
    let klo = (lo2 as i64).max(lo1 as i64 - shift);
    let khi = (hi2 as i64).min(hi1 as i64 - shift);
    if khi < klo {
        return 0.0;
    }
    let v1 = binom_window_values(s1, (klo + shift) as u64, (khi + shift) as u64);
    let v2 = binom_window_values(s2, klo as u64, khi as u64);
    let mut acc = KahanSum::new();
    for (a, b) in v1.iter().zip(v2.iter()) {
        acc.add(a * b);
    }
    acc.value()
}

/// Same probability summed over every admissible `k` with direct pmf calls.
pub fn match_prob_full(s1: BinomialSpec, s2: BinomialSpec, shift: i64) -> f64 {
    let klo = 0i64.max(-shift);
    let khi = (s2.m as i64).min(s1.m as i64 - shift);
    let mut acc = KahanSum::new();
    for k in klo..=khi {
        acc.add(binom_pmf(s1, k + shift) * binom_pmf(s2, k));
    }
    acc.value()
}

/// Two sides of an identity and their residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    pub fn new(lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let residual = (lhs - rhs).abs();
        Self { lhs, rhs, residual, tolerance, passed: residual <= tolerance }
    }
}

pub const COMPLEMENT_TOL: f64 = 1e-14;
pub const SHIFT_TOL: f64 = 1e-13;

/// `P(S_m(p) = S'_{m'}(p') + n) = P(S_m(1-p) = S'_{m'}(1-p') + m - m' - n)`.
pub fn complement_identity_check(s1: BinomialSpec, s2: BinomialSpec, shift: i64) -> IdentityCheck {
    let lhs = match_prob(s1, s2, shift);
    let rhs = match_prob(s1.complement(), s2.complement(), s1.m as i64 - s2.m as i64 - shift);
    IdentityCheck::new(lhs, rhs, COMPLEMENT_TOL)
}

/// Residuals of the three shift identities for one `(F, m, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// `p(E F(S_m) - E F(S_m+1)) = E F(S_m) - E F(S_{m+1})`.
    pub one_step: IdentityCheck,
    /// Two-step expansion of `E F(S_m+2)`, compared after multiplying by `p²`.
    pub two_step: IdentityCheck,
    /// `E[S_m F(S_m)] = m p E[F(S_{m-1}+1)]`.
    pub by_parts: IdentityCheck,
}

impl ShiftReport {
    pub fn passed(&self) -> bool {
        self.one_step.passed && self.two_step.passed && self.by_parts.passed
    }

    pub fn max_residual(&self) -> f64 {
        self.one_step.residual.max(self.two_step.residual).max(self.by_parts.residual)
    }
}

fn expect<F: Fn(i64) -> f64>(f: &F, m: u64, p: f64, offset: i64) -> f64 {
    let spec = BinomialSpec { m, p, q: 1.0 - p };
    let mut acc = KahanSum::new();
    for k in 0..=m as i64 {
        acc.add(binom_pmf(spec, k) * f(k + offset));
    }
    acc.value()
}

pub fn shift_identities_check<F: Fn(i64) -> f64>(f: F, m: u64, p: f64) -> Result<ShiftReport> {
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("the two-step identity divides by p², got p = {p}"));
    }
    let q = 1.0 - p;
    let e_m = expect(&f, m, p, 0);
    let e_m_plus1 = expect(&f, m, p, 1);
    let e_m_plus2 = expect(&f, m, p, 2);
    let e_m1 = expect(&f, m + 1, p, 0);
    let e_m2 = expect(&f, m + 2, p, 0);
    let one_step = IdentityCheck::new(p * (e_m - e_m_plus1), e_m - e_m1, SHIFT_TOL);
    let mut rhs = KahanSum::new();
    rhs.add(e_m2);
    rhs.add(-2.0 * q * e_m1);
    rhs.add(q * q * e_m);
    let two_step = IdentityCheck::new(p * p * e_m_plus2, rhs.value(), SHIFT_TOL);
    let lhs = expect(&|k| k as f64 * f(k), m, p, 0);
    let rhs = if m == 0 { 0.0 } else { m as f64 * p * expect(&f, m - 1, p, 1) };
    let by_parts = IdentityCheck::new(lhs, rhs, SHIFT_TOL);
    Ok(ShiftReport { one_step, two_step, by_parts })
}

/// `∂/∂a P(S_m(r/a) = n) = (1/a)[(n+1) P(S_m(r/a)=n+1) - n P(S_m(r/a)=n)]`.
pub fn pmf_time_derivative(m: u64, r: f64, a: f64, n: u64) -> Result<f64> {
    if !(r > 0.0 && r < a) {
        return invalid(format!("need 0 < r < a, got r = {r}, a = {a}"));
    }
    let spec = BinomialSpec::from_ratio(m, r, a)?;
    let up = binom_pmf(spec, n as i64 + 1);
    let here = binom_pmf(spec, n as i64);
    Ok(((n + 1) as f64 * up - n as f64 * here) / a)
}
