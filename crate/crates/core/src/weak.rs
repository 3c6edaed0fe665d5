//! Finite-N covariances of the field tested against Gaussian mixtures, and the
//! decomposition of squared time increments into `ℐ_N - 𝒥_N - 𝒦_N`.
//!
//! For a bump with center `c` and variance `v` the lattice index of `x ~ bump` is
//! `⌊Y⌋` with `Y ~ N(Nu(1 + c/√N), u²Nv)`. Its generating function has the closed
//! form
//!
//! ```text
//! E z^{⌊Y⌋} = Σ_k (1 - e^{-w})/(w + 2πik) · exp((w + 2πik)μ + σ²(w + 2πik)²/2),  z = e^w,
//! ```
//!
//! from the Fourier series of `e^{-w{y}}`. Thinning by the death chain maps
//! `z` to `q + pz`, so every coordinate factor is a trapezoid sum on the unit
//! circle whose aliasing is controlled by the number of nodes.

use std::f64::consts::PI;

use nalgebra::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{recentering_constant, ScalingScheme};
use crate::error::{invalid, Error, Result};
use crate::limit::GaussianMixture;
use crate::quadrature::{integrate, kronrod_combine, kronrod_nodes, QuadratureConfig};

type C64 = Complex<f64>;

/// Law of the continuous lattice coordinate `Y = Nu(1 + X/√N)`, with the
/// index masses `P(⌊Y⌋ = m)` for `m >= lo` kept for the direct fallback.
#[derive(Debug, Clone, PartialEq)]
struct CoordLaw {
    mu: f64,
    sigma: f64,
    lo: u64,
    masses: Vec<f64>,
}

/// `P(a <= Z < b)` for standard normal `Z`, from a composite 15-point rule on
/// the density so the result keeps relative accuracy in the tails.
fn normal_interval(a: f64, b: f64) -> f64 {
    let c = (0.5 / PI).sqrt();
    let panels = ((b - a) * (a.abs().max(b.abs()) + 1.0)).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for i in 0..panels {
        let (lo, hi) = (a + h * i as f64, a + h * (i + 1) as f64);
        let f = kronrod_nodes(lo, hi).map(|z| c * (-0.5 * z * z).exp());
        acc += kronrod_combine(lo, hi, &f).0;
    }
    acc
}

impl CoordLaw {
    fn new(center: f64, width: f64, u: f64, n: f64) -> Result<Self> {
        let mu = n * u * (1.0 + center / n.sqrt());
        let sigma = u * (n * width).sqrt();
        if mu < 8.0 * sigma {
            return invalid(format!(
                "mixture term at {center} (width {width}) reaches below -sqrt(N) for N = {n}"
            ));
        }
        let lo = (mu - 14.0 * sigma).floor().max(0.0) as u64;
        let hi = (mu + 14.0 * sigma).ceil() as u64;
        let masses = (lo..=hi)
            .map(|m| normal_interval((m as f64 - mu) / sigma, (m as f64 + 1.0 - mu) / sigma))
            .collect();
        Ok(Self { mu, sigma, lo, masses })
    }

    /// `E z^{⌊Y⌋; Y >= 0}` at `z = e^w`, `|z| <= 1`.
    ///
    /// The closed form integrates over all of `Y`; it is used while the
    /// exponentially tilted mean `μ + σ² Re w` stays `14σ` above zero, so that
    /// the part from `Y < 0` is negligible. Otherwise the masses are summed.
    fn pgf(&self, w: C64) -> C64 {
        let s2 = self.sigma * self.sigma;
        if self.mu + s2 * w.re < 14.0 * self.sigma {
            return self.pgf_direct(w);
        }
        let mut acc = C64::new(0.0, 0.0);
        for k in [0i32, -1, 1] {
            let shift = 2.0 * PI * k as f64;
            let damp = -0.5 * s2 * ((w.im + shift).powi(2) - w.im * w.im);
            if damp < -46.0 {
                continue;
            }
            let om = C64::new(w.re, w.im + shift);
            let c = if k == 0 && w.norm() < 1e-4 {
                C64::new(1.0, 0.0) - w / 2.0 + w * w / 6.0 - w * w * w / 24.0
            } else {
                (C64::new(1.0, 0.0) - (-w).exp()) / om
            };
            acc += c * (om * self.mu + om * om * (0.5 * s2)).exp();
        }
        acc
    }

    fn pgf_direct(&self, w: C64) -> C64 {
        let mut zm = if self.lo == 0 {
            C64::new(1.0, 0.0)
        } else if w.re * (self.lo as f64) < -745.0 {
            return C64::new(0.0, 0.0);
        } else {
            (w * self.lo as f64).exp()
        };
        let z = w.exp();
        let mut acc = C64::new(0.0, 0.0);
        for m in &self.masses {
            acc += zm * *m;
            zm *= z;
        }
        acc
    }

    fn var(&self) -> f64 {
        self.sigma * self.sigma + 1.0 / 12.0
    }
}

/// `ln(q + p e^{iθ})` with the modulus taken through `ln1p` near `z = 1`.
fn log_thinned(p: f64, q: f64, theta: f64) -> C64 {
    let half = (0.5 * theta).sin();
    let m2m1 = -4.0 * p * q * half * half;
    let re = 0.5 * m2m1.ln_1p();
    let im = (p * theta.sin()).atan2(q + p * theta.cos());
    C64::new(re, im)
}

/// Kernel `r ↦ ∬ φ1(x)φ2(y) Π_j P(S_{M_j(x,u)}(r/(Nu)) = S'_{M_j(y,v)}(r/(Nv))) dx dy`.
#[derive(Debug, Clone)]
pub struct WeakKernel {
    n: f64,
    u: f64,
    v: f64,
    left: Vec<(f64, [CoordLaw; 2])>,
    right: Vec<(f64, [CoordLaw; 2])>,
}

impl WeakKernel {
    pub fn new(phi1: &GaussianMixture, phi2: &GaussianMixture, u: f64, v: f64, n: u64) -> Result<Self> {
        if !(u > 0.0 && u <= v) {
            return invalid(format!("need 0 < s <= t, got s = {u}, t = {v}"));
        }
        let nf = n as f64;
        let laws = |phi: &GaussianMixture, time: f64| -> Result<Vec<(f64, [CoordLaw; 2])>> {
            phi.terms
                .iter()
                .map(|t| {
                    Ok((
                        t.weight,
                        [CoordLaw::new(t.center[0], t.width, time, nf)?, CoordLaw::new(t.center[1], t.width, time, nf)?],
                    ))
                })
                .collect()
        };
        Ok(Self { n: nf, u, v, left: laws(phi1, u)?, right: laws(phi2, v)? })
    }

    /// Upper end `Nu` of the kernel's time range.
    pub fn horizon(&self) -> f64 {
        self.n * self.u
    }

    /// Number of circle nodes making the aliasing negligible at thinning `(p, p')`.
    fn nodes(&self, p: f64, q: f64, pp: f64, qp: f64) -> usize {
        let mut need: f64 = 0.0;
        for (_, la) in &self.left {
            for (_, lb) in &self.right {
                for j in 0..2 {
                    let (a, b) = (&la[j], &lb[j]);
                    let sd_a = (a.mu * p * q + p * p * a.var()).sqrt();
                    let sd_b = (b.mu * pp * qp + pp * pp * b.var()).sqrt();
                    need = need.max((p * a.mu - pp * b.mu).abs() + 10.0 * (sd_a + sd_b));
                }
            }
        }
        need.ceil() as usize + 32
    }

    pub fn eval(&self, r: f64) -> f64 {
        let (nu, nv) = (self.n * self.u, self.n * self.v);
        let r = r.clamp(0.0, nu);
        let (p, q) = (r / nu, (nu - r) / nu);
        let (pp, qp) = (r / nv, (nv - r) / nv);
        let n = self.nodes(p, q, pp, qp);
        let half = n / 2;
        let thetas: Vec<f64> = (0..=half).map(|l| 2.0 * PI * l as f64 / n as f64).collect();
        let w_left: Vec<C64> = thetas.iter().map(|&th| log_thinned(p, q, th)).collect();
        let w_right: Vec<C64> = thetas.iter().map(|&th| log_thinned(pp, qp, th)).collect();
        let table = |laws: &[(f64, [CoordLaw; 2])], ws: &[C64]| -> Vec<[Vec<C64>; 2]> {
            laws.iter()
                .map(|(_, l)| [ws.iter().map(|w| l[0].pgf(*w)).collect(), ws.iter().map(|w| l[1].pgf(*w)).collect()])
                .collect()
        };
        let ga = table(&self.left, &w_left);
        let gb = table(&self.right, &w_right);
        let weight = |l: usize| -> f64 {
            if l == 0 || (n % 2 == 0 && l == half) {
                1.0
            } else {
                2.0
            }
        };
        let mut total = 0.0;
        for (ia, (wa, _)) in self.left.iter().enumerate() {
            for (ib, (wb, _)) in self.right.iter().enumerate() {
                let mut prod = 1.0;
                for j in 0..2 {
                    let mut acc = 0.0;
                    for l in 0..=half {
                        acc += weight(l) * (ga[ia][j][l] * gb[ib][j][l].conj()).re;
                    }
                    prod *= acc / n as f64;
                }
                total += wa * wb * prod;
            }
        }
        total
    }
}

fn micro_hints(a: f64, b: f64) -> Vec<f64> {
    let mut h = Vec::new();
    let mut d = 0.125;
    while d < 0.5 * (b - a) {
        h.push(a + d);
        h.push(b - d);
        d *= 2.0;
    }
    h
}

fn integrate_kernel<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, quad: &QuadratureConfig) -> Result<(f64, f64)> {
    if b <= a {
        return Ok((0.0, 0.0));
    }
    let q = integrate(f, a, b, &micro_hints(a, b), quad)?;
    Ok((q.value, q.error))
}

/// Weak covariance with its re-centered value `raw - 𝔠_N (∫φ1)(∫φ2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakReport {
    pub n: u64,
    pub raw: f64,
    pub recentered: f64,
    pub error: f64,
}

pub fn weak_rescaled_report(
    phi1: &GaussianMixture,
    phi2: &GaussianMixture,
    s: f64,
    t: f64,
    scheme: &ScalingScheme,
    quad: &QuadratureConfig,
) -> Result<WeakReport> {
    let k = WeakKernel::new(phi1, phi2, s, t, scheme.n)?;
    let (raw, error) = integrate_kernel(|r| k.eval(r), 0.0, k.horizon(), quad)?;
    let mass = phi1.total_mass() * phi2.total_mass();
    let recentered = if mass == 0.0 { raw } else { raw - mass * recentering_constant(scheme.n, quad)? };
    Ok(WeakReport { n: scheme.n, raw, recentered, error })
}

/// `Cov[ζ^N_s(φ1); ζ^N_t(φ2)]`.
pub fn weak_rescaled_covariance(
    phi1: &GaussianMixture,
    phi2: &GaussianMixture,
    s: f64,
    t: f64,
    scheme: &ScalingScheme,
    quad: &QuadratureConfig,
) -> Result<f64> {
    Ok(weak_rescaled_report(phi1, phi2, s, t, scheme, quad)?.raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub n: u64,
    pub s: f64,
    pub t: f64,
    pub i_n: f64,
    pub j_n: f64,
    pub k_n: f64,
    pub total: f64,
    pub error: f64,
    /// `|ℐ_N|/(t-s)^{1/2}`
    pub ratio_half: f64,
    /// `|𝒥_N|/(t-s)` and `|𝒦_N|/(t-s)`
    pub ratio_one: [f64; 2],
}

/// `E|ζ^N_s(φ) - ζ^N_t(φ)|² = ℐ_N - 𝒥_N - 𝒦_N` with
/// `ℐ_N = ∫_{Ns}^{Nt} K_{t,t}`, `𝒥_N = ∫_0^{Ns} (K_{s,t} - K_{s,s})`,
/// `𝒦_N = ∫_0^{Ns} (K_{s,t} - K_{t,t})`.
pub fn holder_decomposition(
    phi: &GaussianMixture,
    s: f64,
    t: f64,
    scheme: &ScalingScheme,
    quad: &QuadratureConfig,
) -> Result<HolderReport> {
    if !(scheme.t0 <= s && s < t && t <= scheme.t1) {
        return Err(Error::Precondition(format!(
            "need T0 <= s < t <= T1, got s = {s}, t = {t} on [{}, {}]",
            scheme.t0, scheme.t1
        )));
    }
    if !phi.is_mass_zero() {
        return invalid(format!("phi must have total mass 0, got {}", phi.total_mass()));
    }
    let n = scheme.n;
    let k_tt = WeakKernel::new(phi, phi, t, t, n)?;
    let k_st = WeakKernel::new(phi, phi, s, t, n)?;
    let k_ss = WeakKernel::new(phi, phi, s, s, n)?;
    let ns = n as f64 * s;
    let (i_n, e1) = integrate_kernel(|r| k_tt.eval(r), ns, k_tt.horizon(), quad)?;
    let (j_n, e2) = integrate_kernel(|r| k_st.eval(r) - k_ss.eval(r), 0.0, ns, quad)?;
    let (k_n, e3) = integrate_kernel(|r| k_st.eval(r) - k_tt.eval(r), 0.0, ns, quad)?;
    let d = t - s;
    Ok(HolderReport {
        n,
        s,
        t,
        i_n,
        j_n,
        k_n,
        total: i_n - j_n - k_n,
        error: e1 + e2 + e3,
        ratio_half: i_n.abs() / d.sqrt(),
        ratio_one: [j_n.abs() / d, k_n.abs() / d],
    })
}

/// A scan over `(s, t)` cells and schemes, with per-column bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderTable {
    pub rows: Vec<HolderReport>,
    /// Column maxima of `ratio_half`, `ratio_one[0]`, `ratio_one[1]`.
    pub max: [f64; 3],
    /// Column values at the first row (coarsest cell).
    pub reference: [f64; 3],
}

impl HolderTable {
    /// Each column stays within `factor` times its first-row value.
    pub fn bounded(&self, factor: f64) -> bool {
        (0..3).all(|c| self.max[c] <= factor * self.reference[c])
    }
}

/// Rows are ordered scheme-major, then by grid cell.
pub fn holder_scan(
    phi: &GaussianMixture,
    grid: &[(f64, f64)],
    schemes: &[ScalingScheme],
    quad: &QuadratureConfig,
) -> Result<HolderTable> {
    let cells: Vec<(ScalingScheme, (f64, f64))> =
        schemes.iter().flat_map(|sc| grid.iter().map(move |g| (*sc, *g))).collect();
    let rows = cells
        .par_iter()
        .map(|(sc, (s, t))| holder_decomposition(phi, *s, *t, sc, quad))
        .collect::<Result<Vec<_>>>()?;
    let col = |r: &HolderReport| [r.ratio_half, r.ratio_one[0], r.ratio_one[1]];
    let mut max = [0.0f64; 3];
    for r in &rows {
        let c = col(r);
        for i in 0..3 {
            max[i] = max[i].max(c[i]);
        }
    }
    let reference = rows.first().map(col).unwrap_or([0.0; 3]);
    Ok(HolderTable { rows, max, reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binom::{match_prob, BinomialSpec};
    use crate::limit::MixtureTerm;

    fn quad() -> QuadratureConfig {
        QuadratureConfig::new(1e-11, 1e-10)
    }

    fn index_masses(law: &CoordLaw) -> Vec<(u64, f64)> {
        law.masses.iter().enumerate().map(|(i, w)| (law.lo + i as u64, *w)).collect()
    }

    /// Direct double sum over lattice indices of the matching probability.
    fn coord_factor_direct(a: &CoordLaw, b: &CoordLaw, p: f64, pp: f64) -> f64 {
        let ma = index_masses(a);
        let mb = index_masses(b);
        let mut acc = 0.0;
        for (m, wa) in &ma {
            for (mp, wb) in &mb {
                let x = BinomialSpec::new(*m, p).unwrap();
                let y = BinomialSpec::new(*mp, pp).unwrap();
                acc += wa * wb * match_prob(x, y, 0);
            }
        }
        acc
    }

    fn kernel_direct(k: &WeakKernel, r: f64) -> f64 {
        let (p, pp) = (r / (k.n * k.u), r / (k.n * k.v));
        let mut total = 0.0;
        for (wa, la) in &k.left {
            for (wb, lb) in &k.right {
                total += wa * wb * coord_factor_direct(&la[0], &lb[0], p, pp) * coord_factor_direct(&la[1], &lb[1], p, pp);
            }
        }
        total
    }

    fn phi() -> GaussianMixture {
        GaussianMixture::dipole([0.0, 0.0], [1.0, 0.5], 0.4).unwrap()
    }

    #[test]
    fn pgf_at_one_is_total_mass() {
        let l = CoordLaw::new(0.3, 0.5, 1.0, 256.0).unwrap();
        assert!((l.pgf(C64::new(0.0, 0.0)).re - 1.0).abs() < 1e-15);
        let direct: f64 = index_masses(&l).iter().map(|(m, w)| w * 0.7f64.powi(*m as i32)).sum();
        let w = C64::new(0.7f64.ln(), 0.0);
        assert!((l.pgf(w).re - direct).abs() < 1e-12 * direct.max(1e-300), "{} vs {direct}", l.pgf(w).re);
        let w = C64::new(-0.001, 2.9);
        let direct: C64 = index_masses(&l).iter().map(|(m, wt)| (w * *m as f64).exp() * *wt).sum();
        assert!((l.pgf(w) - direct).norm() < 1e-13);
    }

    #[test]
    fn kernel_matches_direct_index_sums() {
        for (u, v) in [(1.0, 1.0), (0.8, 1.3)] {
            let k = WeakKernel::new(&phi(), &phi(), u, v, 64).unwrap();
            for r in [0.0, 0.3, 2.0, 11.0, 40.0, 63.0 * u, 64.0 * u] {
                let a = k.eval(r);
                let b = kernel_direct(&k, r);
                assert!((a - b).abs() < 1e-12, "u={u} v={v} r={r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn kernel_matches_direct_sums_for_single_bumps() {
        let one = GaussianMixture::new(vec![MixtureTerm { weight: 1.0, center: [0.2, -0.3], width: 0.7 }]).unwrap();
        let k = WeakKernel::new(&one, &one, 1.0, 1.5, 100).unwrap();
        for r in [0.5, 5.0, 50.0, 99.0] {
            let (a, b) = (k.eval(r), kernel_direct(&k, r));
            assert!((a - b).abs() < 1e-12, "r={r}: {a} vs {b}");
        }
    }

    #[test]
    fn rejects_terms_below_the_domain() {
        let far = GaussianMixture::bump(1.0, [-30.0, 0.0], 1.0).unwrap();
        assert!(WeakKernel::new(&far, &far, 1.0, 1.0, 256).is_err());
        assert!(WeakKernel::new(&phi(), &phi(), 1.0, 0.5, 256).is_err());
    }

    #[test]
    fn variance_is_nonnegative_and_recentering_is_inert() {
        let sc = ScalingScheme::new(256, 0.25).unwrap();
        let r = weak_rescaled_report(&phi(), &phi(), 1.0, 1.0, &sc, &quad()).unwrap();
        assert!(r.raw >= -1e-6);
        assert_eq!(r.raw, r.recentered);
    }

    #[test]
    fn decomposition_matches_polarization() {
        let sc = ScalingScheme::new(1 << 10, 0.25).unwrap();
        let q = QuadratureConfig::new(1e-12, 1e-11);
        let (s, t) = (0.9, 1.0);
        let h = holder_decomposition(&phi(), s, t, &sc, &q).unwrap();
        let vs = weak_rescaled_report(&phi(), &phi(), s, s, &sc, &q).unwrap();
        let vt = weak_rescaled_report(&phi(), &phi(), t, t, &sc, &q).unwrap();
        let c = weak_rescaled_report(&phi(), &phi(), s, t, &sc, &q).unwrap();
        let pol = vs.raw + vt.raw - 2.0 * c.raw;
        let tol = 2.0 * (h.error + vs.error + vt.error + 2.0 * c.error);
        assert!(h.total >= -1e-6);
        assert!((h.total - pol).abs() <= tol.max(1e-9), "{} vs {pol} (tol {tol})", h.total);
    }

    #[test]
    fn decomposition_vanishes_as_s_approaches_t() {
        let sc = ScalingScheme::new(256, 0.25).unwrap();
        let a = holder_decomposition(&phi(), 0.9, 1.0, &sc, &quad()).unwrap();
        let b = holder_decomposition(&phi(), 0.999, 1.0, &sc, &quad()).unwrap();
        assert!(b.i_n.abs() < a.i_n.abs() / 10.0);
        assert!(b.j_n.abs() < a.j_n.abs() / 10.0);
        assert!(b.k_n.abs() < a.k_n.abs() / 10.0);
        assert!(holder_decomposition(&phi(), 1.0, 1.0, &sc, &quad()).is_err());
        assert!(holder_decomposition(&default_bump(), 0.9, 1.0, &sc, &quad()).is_err());
    }

    fn default_bump() -> GaussianMixture {
        GaussianMixture::bump(1.0, [0.0, 0.0], 1.0).unwrap()
    }

    #[test]
    fn empty_scan_is_empty() {
        let t = holder_scan(&phi(), &[], &[ScalingScheme::new(256, 0.25).unwrap()], &quad()).unwrap();
        assert!(t.rows.is_empty());
    }
}
