//! The exact-identity suite behind `whittaker identities`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use whittaker_core::approx::{skellam_match, skellam_series, stein_chen_bound, tv_binom_poisson, PoissonPair};
use whittaker_core::binom::{
    binom_pmf, complement_identity_check, pmf_time_derivative, shift_identities_check, BinomialSpec,
};
use whittaker_core::lattice::{lattice_points, semigroup_dense, semigroup_product};

pub const CHECK_NAMES: [&str; 8] = [
    "semigroup",
    "complement",
    "shift.one_step",
    "shift.two_step",
    "shift.by_parts",
    "derivative",
    "skellam",
    "stein_chen",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Parameters of the worst instance.
    pub worst: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub passed: bool,
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
    pub failing: Vec<String>,
}

/// Running maximum of residuals against a fixed tolerance.
struct Tracker {
    name: &'static str,
    tolerance: f64,
    max: f64,
    count: usize,
    worst: String,
    failed: bool,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self { name, tolerance, max: 0.0, count: 0, worst: String::new(), failed: false }
    }

    fn record(&mut self, lhs: f64, rhs: f64, what: impl FnOnce() -> String) {
        let r = (lhs - rhs).abs();
        self.count += 1;
        if !(r <= self.tolerance) {
            self.failed = true;
        }
        if r > self.max || r.is_nan() {
            self.max = r;
            self.worst = what();
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name.to_string(),
            instances: self.count,
            max_residual: self.max,
            tolerance: self.tolerance,
            passed: !self.failed,
            worst: self.worst,
        }
    }
}

/// Runs the checks whose name contains `filter`; `fault` names a check whose
/// right-hand side is negated, which must make it fail.
pub fn run(instances: usize, seed: u64, filter: Option<&str>, fault: Option<&str>) -> Summary {
    let wanted = |name: &str| filter.map_or(true, |f| name.contains(f));
    let sign = |name: &str| if fault == Some(name) { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    if wanted("semigroup") {
        let s = sign("semigroup");
        let mut t = Tracker::new("semigroup", 1e-10);
        for big_l in 3..=8u64 {
            let pts = lattice_points(big_l);
            for time in [0.1, 1.0, 5.0] {
                let dense = semigroup_dense(big_l, time).expect("valid lattice");
                for a in &pts {
                    for b in &pts {
                        let p = semigroup_product(*a, *b, time).expect("valid points");
                        t.record(dense[(a.index(), b.index())], s * p, || format!("L={big_l} t={time} {a:?} {b:?}"));
                    }
                }
            }
        }
        out.push(t.finish());
    }

    if wanted("complement") {
        let s = sign("complement");
        let mut t = Tracker::new("complement", 1e-13);
        for _ in 0..instances {
            let (m, mp) = (rng.gen_range(0..=30u64), rng.gen_range(0..=30u64));
            let (p, pp) = (rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99));
            let k = rng.gen_range(-(mp as i64)..=m as i64);
            let c = complement_identity_check(BinomialSpec::new(m, p).unwrap(), BinomialSpec::new(mp, pp).unwrap(), k);
            t.record(c.lhs, s * c.rhs, || format!("m={m} m'={mp} p={p} p'={pp} shift={k}"));
        }
        out.push(t.finish());
    }

    let shift_names = ["shift.one_step", "shift.two_step", "shift.by_parts"];
    if shift_names.iter().any(|n| wanted(n)) {
        let mut ts: Vec<Tracker> = shift_names.iter().map(|n| Tracker::new(n, 1e-13)).collect();
        for _ in 0..instances {
            let m = rng.gen_range(0..=30u64);
            let p = rng.gen_range(0.01..1.0);
            let (w, ph) = (rng.gen_range(0.1..2.0), rng.gen_range(0.0..2.0 * PI));
            let r = shift_identities_check(move |k| (w * k as f64 + ph).sin(), m, p).expect("p > 0");
            for (t, c) in ts.iter_mut().zip([r.one_step, r.two_step, r.by_parts]) {
                t.record(c.lhs, sign(t.name) * c.rhs, || format!("m={m} p={p} F=sin({w}k+{ph})"));
            }
        }
        out.extend(ts.into_iter().filter(|t| wanted(t.name)).map(Tracker::finish));
    }

    if wanted("derivative") {
        let s = sign("derivative");
        let mut t = Tracker::new("derivative", 1e-6);
        let h = 1e-6;
        for _ in 0..instances {
            let m = rng.gen_range(1..=30u64);
            let a = rng.gen_range(0.5..5.0);
            let r = a * rng.gen_range(0.05..0.95);
            let k = rng.gen_range(0..=m);
            let pmf = |aa: f64| binom_pmf(BinomialSpec::from_ratio(m, r, aa).unwrap(), k as i64);
            let fd = (pmf(a + h) - pmf(a - h)) / (2.0 * h);
            t.record(pmf_time_derivative(m, r, a, k).unwrap(), s * fd, || format!("m={m} r={r} a={a} n={k}"));
        }
        out.push(t.finish());
    }

    if wanted("skellam") {
        let s = sign("skellam");
        let mut t = Tracker::new("skellam", 1e-12);
        for _ in 0..instances {
            let l = 10f64.powf(rng.gen_range(-0.3..3.0));
            let lp = 10f64.powf(rng.gen_range(-0.3..3.0));
            let k = rng.gen_range(-100i64..=100);
            let pair = PoissonPair::new(l, lp).unwrap();
            t.record(skellam_match(pair, k), s * skellam_series(pair, k), || format!("λ={l} λ'={lp} k={k}"));
        }
        out.push(t.finish());
    }

    if wanted("stein_chen") {
        // recorded as the excess of d_TV over the bound, so the tolerance is 0;
        // at m = 1 the two sides coincide and only rounding separates them
        let s = sign("stein_chen");
        let mut t = Tracker::new("stein_chen", 0.0);
        for _ in 0..instances {
            let m = 10f64.powf(rng.gen_range(0.0..4.0)).round() as u64;
            let p = rng.gen_range(0.001..0.5);
            let tv = tv_binom_poisson(m, p).unwrap();
            let bound = s * stein_chen_bound(m, p).unwrap();
            let slack = if m == 1 { 8.0 * f64::EPSILON * p } else { 0.0 };
            t.record((tv - bound - slack).max(0.0), 0.0, || format!("m={m} p={p} tv={tv} bound={bound}"));
        }
        out.push(t.finish());
    }

    let failing: Vec<String> = out.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    Summary { passed: failing.is_empty(), seed, checks: out, failing }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let s = run(200, 1, None, None);
        assert!(s.passed, "{:?}", s.failing);
        assert_eq!(s.checks.len(), CHECK_NAMES.len());
        for (c, n) in s.checks.iter().zip(CHECK_NAMES) {
            assert_eq!(c.name, n);
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let s = run(50, 1, Some("shift"), None);
        let names: Vec<&str> = s.checks.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["shift.one_step", "shift.two_step", "shift.by_parts"]);
        assert!(run(50, 1, Some("nothing"), None).checks.is_empty());
    }

    #[test]
    fn every_injected_fault_is_caught() {
        for name in CHECK_NAMES {
            let s = run(100, 2, None, Some(name));
            assert_eq!(s.failing, vec![name.to_string()], "{name}");
        }
    }
}
