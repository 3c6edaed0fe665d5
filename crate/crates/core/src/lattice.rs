//! The triangular lattice, the Σ/Δ coordinate maps and the generator of the
//! pair of pure death chains.
//!
//! Points of the truncated lattice are ordered lexicographically by `(a2, a1)`:
//! `(1,1), (1,2), (2,2), (1,3), ...`. Every matrix and trajectory file uses this
//! order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binom::{binom_pmf, BinomialSpec};
use crate::error::{invalid, Result};

/// A point `(a1, a2)` with `1 <= a1 <= a2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint {
    pub a1: u64,
    pub a2: u64,
}

impl LatticePoint {
    pub fn new(a1: u64, a2: u64) -> Result<Self> {
        if a1 < 1 || a2 < a1 {
            return invalid(format!("({a1},{a2}) is not in the triangular lattice"));
        }
        Ok(Self { a1, a2 })
    }

    /// Position in the `(a2, a1)` lexicographic order, starting at 0.
    pub fn index(&self) -> usize {
        (self.a2 * (self.a2 - 1) / 2 + self.a1 - 1) as usize
    }

    pub fn from_index(idx: usize) -> Self {
        let mut a2 = 1u64;
        while (a2 * (a2 + 1) / 2) as usize <= idx {
            a2 += 1;
        }
        let a1 = idx as u64 - a2 * (a2 - 1) / 2 + 1;
        Self { a1, a2 }
    }

    /// Label used in CSV headers.
    pub fn label(&self) -> String {
        format!("{}_{}", self.a1, self.a2)
    }
}

/// Counts `(m1, m2)` of the two independent death chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeathPair {
    pub m1: u64,
    pub m2: u64,
}

impl DeathPair {
    pub fn new(m1: u64, m2: u64) -> Self {
        Self { m1, m2 }
    }

    pub fn max_norm(&self) -> u64 {
        self.m1.max(self.m2)
    }
}

pub fn sigma_map(m: DeathPair) -> LatticePoint {
    LatticePoint { a1: m.m1 + 1, a2: m.m1 + m.m2 + 1 }
}

pub fn delta_map(a: LatticePoint) -> Result<DeathPair> {
    if a.a1 < 1 || a.a2 < a.a1 {
        return invalid(format!("({},{}) is not in the triangular lattice", a.a1, a.a2));
    }
    Ok(DeathPair { m1: a.a1 - 1, m2: a.a2 - a.a1 })
}

/// All points with `a2 <= big_l`, in lattice order.
pub fn lattice_points(big_l: u64) -> Vec<LatticePoint> {
    let mut out = Vec::with_capacity((big_l * (big_l + 1) / 2) as usize);
    for a2 in 1..=big_l {
        for a1 in 1..=a2 {
            out.push(LatticePoint { a1, a2 });
        }
    }
    out
}

/// Generator `A_L` on the truncated lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    pub big_l: u64,
    pub entries: DMatrix<f64>,
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn points(&self) -> Vec<LatticePoint> {
        lattice_points(self.big_l)
    }
}

pub fn generator(big_l: u64) -> Result<GeneratorMatrix> {
    if big_l < 3 {
        return invalid(format!("L must be at least 3, got {big_l}"));
    }
    let pts = lattice_points(big_l);
    let n = pts.len();
    let mut a = DMatrix::zeros(n, n);
    for p in &pts {
        let i = p.index();
        let down_both = (p.a1 - 1) as f64;
        let down_top = (p.a2 - p.a1) as f64;
        if p.a1 > 1 {
            a[(i, LatticePoint { a1: p.a1 - 1, a2: p.a2 - 1 }.index())] = down_both;
        }
        if p.a2 > p.a1 {
            a[(i, LatticePoint { a1: p.a1, a2: p.a2 - 1 }.index())] = down_top;
        }
        a[(i, i)] = -(down_both + down_top);
    }
    Ok(GeneratorMatrix { big_l, entries: a })
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `e^{M}` by scaling and squaring around a degree-18 Taylor core.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = norm1(m);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = m / 2f64.powi(squarings as i32);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=18 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `e^{tA_L}` computed densely; rounding noise is clipped to `[0, 1]`.
pub fn semigroup_dense(big_l: u64, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) {
        return invalid(format!("time must be nonnegative, got {t}"));
    }
    let g = generator(big_l)?;
    let mut e = expm(&(g.entries * t));
    e.apply(|x| *x = x.clamp(0.0, 1.0));
    Ok(e)
}

/// Entry `(a, b)` of `e^{tA}` from the product of two binomial pmfs.
pub fn semigroup_product(a: LatticePoint, b: LatticePoint, t: f64) -> Result<f64> {
    let da = delta_map(a)?;
    let db = delta_map(b)?;
    let p = (-t).exp();
    let f1 = binom_pmf(BinomialSpec::new(da.m1, p)?, db.m1 as i64);
    let f2 = binom_pmf(BinomialSpec::new(da.m2, p)?, db.m2 as i64);
    Ok(f1 * f2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_map(DeathPair::new(0, 0)), LatticePoint { a1: 1, a2: 1 });
        assert_eq!(sigma_map(DeathPair::new(1, 1)), LatticePoint { a1: 2, a2: 3 });
        assert_eq!(sigma_map(DeathPair::new(3, 0)), LatticePoint { a1: 4, a2: 4 });
        assert_eq!(delta_map(LatticePoint { a1: 2, a2: 3 }).unwrap(), DeathPair::new(1, 1));
        assert!(delta_map(LatticePoint { a1: 3, a2: 2 }).is_err());
        assert!(delta_map(LatticePoint { a1: 0, a2: 2 }).is_err());
    }

    #[test]
    fn ordering_is_by_a2_then_a1() {
        let pts = lattice_points(4);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(p.index(), i);
            assert_eq!(LatticePoint::from_index(i), *p);
        }
        assert_eq!(pts[1], LatticePoint { a1: 1, a2: 2 });
    }

    #[test]
    fn generator_examples() {
        let g = generator(3).unwrap();
        let row = LatticePoint { a1: 2, a2: 3 }.index();
        assert_eq!(g.entries[(row, LatticePoint { a1: 1, a2: 2 }.index())], 1.0);
        assert_eq!(g.entries[(row, LatticePoint { a1: 2, a2: 2 }.index())], 1.0);
        assert_eq!(g.entries[(row, row)], -2.0);
        assert_eq!(g.entries.row(0).iter().filter(|x| **x != 0.0).count(), 0);
        let g5 = generator(5).unwrap();
        assert_eq!(g5.dim(), 15);
        for r in g5.entries.row_iter() {
            assert_eq!(r.sum(), 0.0);
        }
        assert!(generator(2).is_err());
    }

    #[test]
    fn dense_semigroup_basics() {
        let e0 = semigroup_dense(4, 0.0).unwrap();
        assert_eq!(e0, DMatrix::identity(10, 10));
        let e = semigroup_dense(3, 1.0).unwrap();
        assert_eq!(e[(0, 0)], 1.0);
        for r in e.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn product_formula_examples() {
        let a = LatticePoint { a1: 2, a2: 3 };
        let t = 0.8f64;
        assert_relative_eq!(semigroup_product(a, a, t).unwrap(), (-2.0 * t).exp(), max_relative = 1e-14);
        let b = LatticePoint { a1: 1, a2: 1 };
        assert_relative_eq!(semigroup_product(a, b, t).unwrap(), (1.0 - (-t).exp()).powi(2), max_relative = 1e-14);
        let dense = semigroup_dense(5, 0.5).unwrap();
        let a = LatticePoint { a1: 3, a2: 5 };
        let b = LatticePoint { a1: 2, a2: 4 };
        let v = semigroup_product(a, b, 0.5).unwrap();
        assert!((dense[(a.index(), b.index())] - v).abs() < 1e-10);
    }

    #[test]
    fn l4_rows_match_product() {
        let dense = semigroup_dense(4, 0.7).unwrap();
        for a in lattice_points(4) {
            for b in lattice_points(4) {
                let v = semigroup_product(a, b, 0.7).unwrap();
                assert!((dense[(a.index(), b.index())] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        for l in 3..=6 {
            let s = semigroup_dense(l, 0.3).unwrap();
            let t = semigroup_dense(l, 1.1).unwrap();
            let st = semigroup_dense(l, 1.4).unwrap();
            assert!((&s * &t - st).amax() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn sigma_delta_round_trip(m1 in 0u64..100_000, m2 in 0u64..100_000) {
            let m = DeathPair::new(m1, m2);
            prop_assert_eq!(delta_map(sigma_map(m)).unwrap(), m);
        }

        #[test]
        fn delta_sigma_round_trip(a1 in 1u64..10_000, gap in 0u64..10_000) {
            let a = LatticePoint::new(a1, a1 + gap).unwrap();
            prop_assert_eq!(sigma_map(delta_map(a).unwrap()), a);
        }
    }
}
