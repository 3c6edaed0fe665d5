//! Special functions: log-factorials, saddle-point pmf kernels, scaled Bessel
//! functions and the exponential integral.
//!
//! The binomial and Poisson pmfs use Loader's deviance form
//! `exp(-stirlerr - bd0)` which keeps full relative accuracy far into the tails.

use std::f64::consts::PI;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Exact factorials up to 22! are representable in f64.
fn small_factorial(n: u64) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// `ln n! - ln(sqrt(2πn) (n/e)^n)` for integer `n >= 1`.
pub fn stirlerr(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    assert!(n >= 1, "stirlerr is defined for n >= 1");
    if n <= 15 {
        let nf = n as f64;
        return small_factorial(n).ln() - (nf + 0.5) * nf.ln() + nf - LN_SQRT_2PI;
    }
    let nf = n as f64;
    let nn = nf * nf;
    if n > 500 {
        (S0 - S1 / nn) / nf
    } else if n > 80 {
        (S0 - (S1 - S2 / nn) / nn) / nf
    } else if n > 35 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / nf
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / nf
    }
}

/// Deviance term `x ln(x/np) + np - x`, evaluated without cancellation near `x = np`.
pub fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        for j in 1..1000 {
            ej *= v2;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / np).ln() + np - x
    }
}

/// `ln n!`.
pub fn ln_factorial(n: u64) -> f64 {
    if n <= 22 {
        small_factorial(n).ln()
    } else {
        let nf = n as f64;
        (nf + 0.5) * nf.ln() - nf + LN_SQRT_2PI + stirlerr(n)
    }
}

/// Binomial pmf `C(n,x) p^x q^(n-x)` with `q = 1 - p` supplied separately so that
/// complements near 1 keep their precision.
pub fn dbinom_raw(x: u64, n: u64, p: f64, q: f64) -> f64 {
    if x > n {
        return 0.0;
    }
    if p == 0.0 {
        return if x == 0 { 1.0 } else { 0.0 };
    }
    if q == 0.0 {
        return if x == n { 1.0 } else { 0.0 };
    }
    let nf = n as f64;
    if x == 0 {
        if n == 0 {
            return 1.0;
        }
        let lc = if p < 0.1 { -bd0(nf, nf * q) - nf * p } else { nf * q.ln() };
        return lc.exp();
    }
    if x == n {
        let lc = if q < 0.1 { -bd0(nf, nf * p) - nf * q } else { nf * p.ln() };
        return lc.exp();
    }
    let xf = x as f64;
    let lc = stirlerr(n) - stirlerr(x) - stirlerr(n - x) - bd0(xf, nf * p) - bd0(nf - xf, nf * q);
    let lf = (2.0 * PI).ln() + xf.ln() + (-xf / nf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// Poisson pmf `e^{-λ} λ^x / x!`.
pub fn dpois_raw(x: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if x == 0 { 1.0 } else { 0.0 };
    }
    if x == 0 {
        return (-lambda).exp();
    }
    let xf = x as f64;
    (-stirlerr(x) - bd0(xf, lambda)).exp() / (2.0 * PI * xf).sqrt()
}

/// `e^{-x} I_0(x)` for `x >= 0`.
pub fn i0e(x: f64) -> f64 {
    assert!(x >= 0.0, "i0e requires x >= 0");
    if x <= 20.0 {
        scaled_series(0, x)
    } else {
        i0e_asymptotic(x)
    }
}

fn i0e_asymptotic(x: f64) -> f64 {
    // Hankel expansion; for order zero every term is positive.
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        let kf = k as f64;
        let next = term * (2.0 * kf - 1.0).powi(2) / (8.0 * kf * x);
        if next > term {
            break;
        }
        term = next;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum / (2.0 * PI * x).sqrt()
}

fn scaled_series(k: u64, x: f64) -> f64 {
    if x == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x;
    let lead = k as f64 * half.ln() - ln_factorial(k) - x;
    let mut term = lead.exp();
    if term == 0.0 {
        return 0.0;
    }
    let q = half * half;
    let mut sum = term;
    let mut j = 1.0f64;
    loop {
        term *= q / (j * (j + k as f64));
        sum += term;
        if term < 1e-17 * sum && j > half {
            break;
        }
        j += 1.0;
    }
    sum
}

/// `e^{-x} I_k(x)` for integer order `k` and `x >= 0`.
pub fn ie(k: i64, x: f64) -> f64 {
    assert!(x >= 0.0, "ie requires x >= 0");
    let k = k.unsigned_abs();
    if k == 0 {
        return i0e(x);
    }
    if x <= 20.0 {
        return scaled_series(k, x);
    }
    // Backward ratio recursion r_n = I_n/I_{n-1} = 1/(2n/x + r_{n+1}),
    // started deep enough that the truncation error has contracted below 1e-16.
    let kf = k as f64;
    let top = (37.0 * x + kf * kf).sqrt().ceil() as u64 + 10;
    let mut r = 0.0;
    let mut prod = 1.0;
    for n in (1..=top).rev() {
        r = 1.0 / (2.0 * n as f64 / x + r);
        if n <= k {
            prod *= r;
        }
    }
    prod * i0e_asymptotic(x)
}

/// Exponential integral `E_1(z)` for `z > 0`.
pub fn exp_int_e1(z: f64) -> f64 {
    assert!(z > 0.0, "E1 requires z > 0");
    if z <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for n in 1..200 {
            term *= -z / n as f64;
            let add = term / n as f64;
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        -EULER_GAMMA - z.ln() - sum
    } else {
        // Modified Lentz on the continued fraction of e^z E_1(z).
        let tiny = 1e-300;
        let mut b = z + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-z).exp()
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    statrs::function::erf::erfc(x)
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stirlerr_matches_lgamma_form_on_the_switch() {
        for n in [14u64, 15, 16, 17, 35, 36, 80, 81, 500, 501] {
            let nf = n as f64;
            let direct = statrs::function::gamma::ln_gamma(nf + 1.0) - (nf + 0.5) * nf.ln() + nf - LN_SQRT_2PI;
            assert!((stirlerr(n) - direct).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn ln_factorial_is_continuous_at_22() {
        let a = ln_factorial(23) - ln_factorial(22);
        assert_relative_eq!(a, 23f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn poisson_pmf_small_cases() {
        assert_relative_eq!(dpois_raw(0, 2.0), (-2.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(dpois_raw(3, 2.0), (-2.0f64).exp() * 8.0 / 6.0, max_relative = 1e-14);
        assert_eq!(dpois_raw(3, 0.0), 0.0);
    }

    #[test]
    fn i0e_matches_series_across_the_switch() {
        let a = scaled_series(0, 20.0);
        let b = i0e_asymptotic(20.0);
        assert_relative_eq!(a, b, max_relative = 1e-14);
        let a = scaled_series(0, 35.0);
        let b = i0e_asymptotic(35.0);
        assert_relative_eq!(a, b, max_relative = 1e-14);
    }

    #[test]
    fn ie_recursion_agrees_with_series_above_20() {
        for k in [1i64, 2, 5, 17, 60] {
            for x in [20.5, 28.0, 40.0] {
                let a = scaled_series(k as u64, x);
                let b = ie(k, x);
                assert_relative_eq!(a, b, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn ie_known_value() {
        // I_1(1) = 0.565159103992485...
        assert_relative_eq!(ie(1, 1.0) * 1f64.exp(), 0.565_159_103_992_485, max_relative = 1e-14);
        assert_eq!(ie(-3, 2.0), ie(3, 2.0));
    }

    #[test]
    fn e1_known_values() {
        assert_relative_eq!(exp_int_e1(1.0), 0.219_383_934_395_520_3, max_relative = 1e-14);
        assert_relative_eq!(exp_int_e1(2.0), 0.048_900_510_708_061_12, max_relative = 1e-13);
        assert_relative_eq!(exp_int_e1(0.1), 1.822_923_958_419_390_7, max_relative = 1e-14);
    }

    #[test]
    fn neumaier_recovers_small_addends() {
        let mut s = KahanSum::new();
        s.add(1.0);
        s.add(1e-17);
        s.add(-1.0);
        assert_relative_eq!(s.value(), 1e-17, max_relative = 1e-12);
    }
}
