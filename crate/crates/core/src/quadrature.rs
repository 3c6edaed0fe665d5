//! Adaptive Gauss–Kronrod (7/15) quadrature with domain-splitting hints.
//!
//! Every integral in the crate goes through [`integrate`]. The caller passes the
//! points where the integrand changes character; the routine then bisects the
//! segment with the largest error until the global tolerance is met.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances and limits shared by all 1D integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { abs_tol: 1e-12, rel_tol: 1e-10, max_subdivisions: 2000 }
    }
}

impl QuadratureConfig {
    pub fn new(abs_tol: f64, rel_tol: f64) -> Self {
        Self { abs_tol, rel_tol, ..Self::default() }
    }

    pub fn with_abs_tol(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    /// Same limits with both tolerances scaled by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        Self { abs_tol: self.abs_tol * factor, rel_tol: self.rel_tol * factor, ..self }
    }
}

/// One leaf of the final partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: f64,
    pub b: f64,
    pub value: f64,
    pub error: f64,
}

/// Integral estimate together with its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
    pub segments: Vec<Segment>,
}

impl QuadResult {
    /// Contribution of the leaves inside `[a, b]`.
    pub fn partial(&self, a: f64, b: f64) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.a >= a && s.b <= b)
            .map(|s| s.value)
            .sum()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// The 15 abscissae of the Kronrod rule mapped to `[a, b]`.
pub fn kronrod_nodes(a: f64, b: f64) -> [f64; 15] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [0.0; 15];
    for j in 0..7 {
        out[2 * j] = c - h * XGK[j];
        out[2 * j + 1] = c + h * XGK[j];
    }
    out[14] = c;
    out
}

/// Kronrod weights on `[a, b]`, aligned with [`kronrod_nodes`].
pub fn kronrod_weights(a: f64, b: f64) -> [f64; 15] {
    let h = 0.5 * (b - a);
    let mut out = [0.0; 15];
    for j in 0..7 {
        out[2 * j] = h * WGK[j];
        out[2 * j + 1] = h * WGK[j];
    }
    out[14] = h * WGK[7];
    out
}

/// Combine integrand values at [`kronrod_nodes`] into `(value, error)`.
pub fn kronrod_combine(a: f64, b: f64, f: &[f64; 15]) -> (f64, f64) {
    let h = 0.5 * (b - a);
    let fc = f[14];
    let mut resk = WGK[7] * fc;
    let mut resg = WG[3] * fc;
    let mut resabs = resk.abs();
    for j in 0..7 {
        let (f1, f2) = (f[2 * j], f[2 * j + 1]);
        resk += WGK[j] * (f1 + f2);
        resabs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            resg += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * resk;
    let mut resasc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        resasc += WGK[j] * ((f[2 * j] - mean).abs() + (f[2 * j + 1] - mean).abs());
    }
    let value = resk * h;
    let resabs = resabs * h.abs();
    let resasc = resasc * h.abs();
    let mut err = ((resk - resg) * h).abs();
    if resasc != 0.0 && err != 0.0 {
        err = resasc * (200.0 * err / resasc).powf(1.5).min(1.0);
    }
    if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * resabs);
    }
    (value, err)
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let nodes = kronrod_nodes(a, b);
    let mut vals = [0.0; 15];
    for (v, x) in vals.iter_mut().zip(nodes.iter()) {
        *v = f(*x);
    }
    let (value, error) = kronrod_combine(a, b, &vals);
    Segment { a, b, value, error }
}

fn sorted_points(a: f64, b: f64, hints: &[f64]) -> Vec<f64> {
    let mut pts = vec![a];
    let mut inner: Vec<f64> = hints.iter().copied().filter(|h| *h > a && *h < b).collect();
    inner.sort_by(|x, y| x.partial_cmp(y).unwrap());
    inner.dedup();
    pts.extend(inner);
    pts.push(b);
    pts
}

/// Integrate `f` over `[a, b]`, splitting first at every hint strictly inside.
///
/// Returns [`Error::NonConvergence`] with the best estimate when the
/// subdivision budget is exhausted.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, hints: &[f64], cfg: &QuadratureConfig) -> Result<QuadResult> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidInput(format!("integration bounds must be finite: [{a}, {b}]")));
    }
    if a == b {
        return Ok(QuadResult { value: 0.0, error: 0.0, evaluations: 0, segments: vec![] });
    }
    if a > b {
        let mut r = integrate(f, b, a, hints, cfg)?;
        r.value = -r.value;
        for s in &mut r.segments {
            s.value = -s.value;
        }
        return Ok(r);
    }
    let pts = sorted_points(a, b, hints);
    let mut segs: Vec<Segment> = pts.windows(2).map(|w| gk15(&f, w[0], w[1])).collect();
    let mut evaluations = 15 * segs.len();
    loop {
        let value: f64 = segs.iter().map(|s| s.value).sum();
        let error: f64 = segs.iter().map(|s| s.error).sum();
        let target = cfg.abs_tol.max(cfg.rel_tol * value.abs());
        if error <= target {
            return Ok(QuadResult { value, error, evaluations, segments: segs });
        }
        if segs.len() >= cfg.max_subdivisions {
            return Err(Error::NonConvergence { value, error, segments: segs.len() });
        }
        let (idx, worst) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.partial_cmp(&y.1.error).unwrap())
            .map(|(i, s)| (i, *s))
            .unwrap();
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::NonConvergence { value, error, segments: segs.len() });
        }
        let left = gk15(&f, worst.a, mid);
        let right = gk15(&f, mid, worst.b);
        evaluations += 30;
        segs[idx] = left;
        segs.insert(idx + 1, right);
    }
}

/// Geometric breakpoints `a + (b-a)·2^{-k}` for `k = 1..levels`, used near an
/// endpoint where the integrand varies on shrinking scales.
pub fn geometric_hints_left(a: f64, b: f64, levels: usize) -> Vec<f64> {
    (1..=levels).map(|k| a + (b - a) * 0.5f64.powi(k as i32)).collect()
}

/// Mirror of [`geometric_hints_left`] accumulating toward `b`.
pub fn geometric_hints_right(a: f64, b: f64, levels: usize) -> Vec<f64> {
    (1..=levels).map(|k| b - (b - a) * 0.5f64.powi(k as i32)).collect()
}
