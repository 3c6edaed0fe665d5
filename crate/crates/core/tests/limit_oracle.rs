//! Brute-force tensor quadratures for the log-kernel double integral, kept
//! independent of the one-dimensional reductions used by the library.

use std::f64::consts::PI;

use whittaker_core::limit::{
    glue_identity_check, limit_covariance_detailed, stationary_kernel, weak_limit_detailed, GaussianMixture,
};
use whittaker_core::quadrature::{integrate, kronrod_combine, kronrod_nodes, QuadratureConfig};

/// Composite 15-point rule on the given breakpoints, as `(node, weight)` pairs.
fn rule(breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for w in breaks.windows(2) {
        let nodes = kronrod_nodes(w[0], w[1]);
        for i in 0..15 {
            let mut e = [0.0; 15];
            e[i] = 1.0;
            out.push((nodes[i], kronrod_combine(w[0], w[1], &e).0));
        }
    }
    out
}

fn uniform(a: f64, b: f64, panels: usize) -> Vec<f64> {
    (0..=panels).map(|i| a + (b - a) * i as f64 / panels as f64).collect()
}

fn q(t: f64, d2: f64) -> f64 {
    (-d2 / (2.0 * t)).exp() / (2.0 * PI * t)
}

/// `(1/2π) ∬ f(y') (-ln|y'-y''|) g(y'') dy' dy''` with `u = y' - y''` in polar
/// coordinates, so the log singularity becomes `ρ ln ρ`.
fn log_double_integral<F: Fn([f64; 2]) -> f64, G: Fn([f64; 2]) -> f64>(f: F, g: G, center: [f64; 2], half: f64, rho_max: f64) -> f64 {
    let ys = rule(&uniform(-half, half, 6));
    let mut rb = vec![0.0];
    let mut h = 1e-4;
    while h < rho_max {
        rb.push(h);
        h *= 4.0;
    }
    rb.push(rho_max);
    let rhos = rule(&rb);
    let nth = 48;
    let mut total = 0.0;
    for &(a, wa) in &ys {
        for &(b, wb) in &ys {
            let yp = [center[0] + a, center[1] + b];
            let fv = f(yp);
            if fv.abs() < 1e-300 {
                continue;
            }
            let mut inner = 0.0;
            for &(rho, wr) in &rhos {
                let mut ring = 0.0;
                for k in 0..nth {
                    let th = 2.0 * PI * k as f64 / nth as f64;
                    ring += g([yp[0] - rho * th.cos(), yp[1] - rho * th.sin()]);
                }
                inner += wr * rho * (-rho.ln()) * ring * 2.0 * PI / nth as f64;
            }
            total += wa * wb * fv * inner;
        }
    }
    total / (2.0 * PI)
}

/// `∫_0^{h} ∫ f_r(z) g_r(z) dz dr` by tensor quadrature.
fn heat_triple_integral<F: Fn(f64, [f64; 2]) -> f64>(fg: F, h: f64, center: [f64; 2], half: f64) -> f64 {
    let zs = rule(&uniform(-half, half, 6));
    let mut rb: Vec<f64> = (0..=30).map(|k| h - h * 0.5f64.powi(k)).collect();
    rb.push(h);
    let rs = rule(&rb);
    let mut total = 0.0;
    for &(r, wr) in &rs {
        for &(a, wa) in &zs {
            for &(b, wb) in &zs {
                total += wr * wa * wb * fg(r, [center[0] + a, center[1] + b]);
            }
        }
    }
    total
}

fn cfg() -> QuadratureConfig {
    QuadratureConfig::new(1e-13, 1e-11)
}

#[test]
fn limit_point_matches_brute_force() {
    let (s, t) = (1.0, 1.0);
    let x = [0.0, 0.0];
    let y = [1.0, 0.0];
    let rep = limit_covariance_detailed(x, s, y, t, &cfg()).unwrap();
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let log4d = log_double_integral(|p| q(1.0 / s, d2(p, x)), |p| q(1.0 / t, d2(p, y)), x, 9.0, 14.0);
    let heat3d = heat_triple_integral(|r, z| q(1.0 / s - r, d2(z, x)) * q(1.0 / t - r, d2(z, y)), 1.0 / t, [0.5, 0.0], 8.0);
    assert!((rep.log_part - log4d).abs() < 1e-4, "{} vs {}", rep.log_part, log4d);
    assert!((rep.heat_part - heat3d).abs() < 1e-4, "{} vs {}", rep.heat_part, heat3d);
    assert!((rep.value - (log4d + heat3d)).abs() < 1e-4);
}

#[test]
fn weak_limit_matches_brute_force() {
    let (s, t) = (1.0, 2.0);
    let phi1 = GaussianMixture::dipole([0.0, 0.0], [1.0, 0.0], 0.3).unwrap();
    let phi2 = GaussianMixture::dipole([0.5, 0.5], [0.0, -0.5], 0.5).unwrap();
    let rep = weak_limit_detailed(&phi1, &phi2, s, t, &cfg()).unwrap();
    let (f1, f2) = (phi1.heat(1.0 / s), phi2.heat(1.0 / t));
    let log4d = log_double_integral(|p| f1.eval(p), |p| f2.eval(p), [0.5, 0.0], 9.0, 14.0);
    let heat3d = heat_triple_integral(|r, z| phi1.heat(1.0 / s - r).eval(z) * phi2.heat(1.0 / t - r).eval(z), 1.0 / t, [0.4, 0.0], 8.0);
    assert!((rep.log_part - log4d).abs() < 1e-4, "{} vs {}", rep.log_part, log4d);
    assert!((rep.heat_part - heat3d).abs() < 1e-4, "{} vs {}", rep.heat_part, heat3d);
}

#[test]
fn stationary_kernel_matches_direct_quadrature() {
    let c = cfg();
    for d in [0.1f64, 1.0, 10.0] {
        let d2 = d * d;
        let f = |r: f64| q(2.0 * r, d2) - if r >= 1.0 { 1.0 / (4.0 * PI * r) } else { 0.0 };
        let mut hints: Vec<f64> = (0..60).map(|k| d2 / 64.0 * 2f64.powi(k)).filter(|h| *h < 1e8).collect();
        hints.push(1.0);
        let body = integrate(f, 0.0, 1e8, &hints, &c).unwrap().value;
        // beyond 1e8 the integrand is -d²/(16π r²) to leading order
        let tail = -d2 / (16.0 * PI * 1e8);
        let v = stationary_kernel([0.0, 0.0], [d, 0.0]).unwrap();
        assert!((v - (body + tail)).abs() < 1e-8, "{d}: {v} vs {}", body + tail);
    }
}

#[test]
fn glue_residual_on_grid() {
    let c = cfg();
    let mut count = 0;
    for d in [0.3, 1.0, 2.0, 5.0] {
        for big_t in [0.05, 1.0, 7.0, 100.0, 1e4] {
            let r = glue_identity_check([0.2, -0.4], [0.2 + d * 0.6, -0.4 + d * 0.8], big_t, &c).unwrap();
            assert!(r.residual <= 1e-8, "d={d} T={big_t}: {}", r.residual);
            count += 1;
        }
    }
    assert_eq!(count, 20);
}
