//! Monte Carlo engines: pure death chains, exact Gaussian sampling of `ζ`,
//! exact log-time stepping of the Whittaker SDE, and the q-Whittaker particle
//! system.

use std::collections::HashMap;
use std::io::{self, BufRead, Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::covariance_exact;
use crate::error::{invalid, Error, Result};
use crate::lattice::{delta_map, expm, generator, lattice_points, sigma_map, DeathPair, LatticePoint};
use crate::quadrature::{kronrod_nodes, kronrod_weights, QuadratureConfig};

/// Words of the ChaCha keystream reserved for each path.
const PATH_WORDS: u128 = 1 << 48;

/// A `(seed, stream)` pair naming a reproducible ChaCha8 keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        self.path_rng(0)
    }

    /// Generator for path `i`: the same keystream started at word `i·2^48`, so
    /// results do not depend on how paths are scheduled.
    pub fn path_rng(&self, i: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream_id);
        r.set_word_pos(i as u128 * PATH_WORDS);
        r
    }
}

/// Piecewise-constant path of a death chain started from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeathTrajectory {
    pub start: u64,
    pub horizon: f64,
    pub jump_times: Vec<f64>,
}

impl DeathTrajectory {
    pub fn value_at(&self, t: f64) -> u64 {
        let jumps = self.jump_times.partition_point(|&s| s <= t);
        self.start - jumps as u64
    }
}

/// Linear pure death chain `k → k-1` at rate `k`, on `[0, horizon]`.
pub fn death_chain_with<R: Rng>(m0: u64, horizon: f64, rng: &mut R) -> DeathTrajectory {
    let mut t = 0.0;
    let mut k = m0;
    let mut jumps = Vec::new();
    while k > 0 {
        let e: f64 = rng.sample(Exp1);
        t += e / k as f64;
        if t > horizon {
            break;
        }
        jumps.push(t);
        k -= 1;
    }
    DeathTrajectory { start: m0, horizon, jump_times: jumps }
}

pub fn simulate_death_chain(m0: u64, horizon: f64, stream: &RngStream) -> DeathTrajectory {
    death_chain_with(m0, horizon, &mut stream.rng())
}

/// Transitions `(time, new point)` of `Σ(D^(1), D^(2))` started at `a`.
pub fn pair_chain_with<R: Rng>(a: LatticePoint, horizon: f64, rng: &mut R) -> Result<Vec<(f64, LatticePoint)>> {
    let m = delta_map(a)?;
    let d1 = death_chain_with(m.m1, horizon, rng);
    let d2 = death_chain_with(m.m2, horizon, rng);
    let mut times: Vec<f64> = d1.jump_times.iter().chain(d2.jump_times.iter()).copied().collect();
    times.sort_by(f64::total_cmp);
    Ok(times
        .into_iter()
        .map(|t| (t, sigma_map(DeathPair::new(d1.value_at(t), d2.value_at(t)))))
        .collect())
}

/// Covariance matrix, symmetric square root and the jointly sampled points.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    pub points: Vec<(LatticePoint, f64)>,
    pub covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

pub const CLIP_RELATIVE: f64 = 1e-10;

/// `V diag(√λ) Vᵀ`; eigenvalues down to `-1e-10·trace` are clipped to zero.
pub fn psd_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let trace = c.trace().abs().max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(c.clone());
    let mut d = eig.eigenvalues.clone();
    for l in d.iter_mut() {
        if *l < -CLIP_RELATIVE * trace {
            return Err(Error::Factorization(format!("eigenvalue {l} below -{CLIP_RELATIVE}·trace")));
        }
        *l = l.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&d) * v.transpose())
}

impl GaussianSampler {
    pub fn new(points: &[(LatticePoint, f64)], quad: &QuadratureConfig) -> Result<Self> {
        let n = points.len();
        for (_, t) in points {
            if !(*t > 0.0) {
                return invalid(format!("sampling times must be positive, got {t}"));
            }
        }
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let (mut a, mut s) = points[i];
                let (mut b, mut t) = points[j];
                if s > t {
                    std::mem::swap(&mut a, &mut b);
                    std::mem::swap(&mut s, &mut t);
                }
                let v = covariance_exact(delta_map(a)?, delta_map(b)?, s, t, quad)?;
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        let factor = psd_sqrt(&c)?;
        Ok(Self { points: points.to_vec(), covariance: c, factor })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.points.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }

    /// `n` samples as rows, sample `i` drawn from path stream `i`.
    pub fn sample_many(&self, n: usize, stream: &RngStream) -> DMatrix<f64> {
        let rows: Vec<DVector<f64>> = (0..n).into_par_iter().map(|i| self.sample(&mut stream.path_rng(i as u64))).collect();
        let d = self.points.len();
        DMatrix::from_fn(n, d, |i, j| rows[i][j])
    }
}

pub fn simulate_whittaker_gaussian(
    points: &[(LatticePoint, f64)],
    n_samples: usize,
    stream: &RngStream,
    quad: &QuadratureConfig,
) -> Result<DMatrix<f64>> {
    Ok(GaussianSampler::new(points, quad)?.sample_many(n_samples, stream))
}

/// Values at an increasing list of times, one column per lattice point.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub big_l: u64,
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl PathSample {
    pub fn new(big_l: u64, times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return invalid("path times must be strictly increasing");
        }
        let dim = (big_l * (big_l + 1) / 2) as usize;
        if values.nrows() != times.len() || values.ncols() != dim {
            return invalid(format!(
                "values are {}x{}, expected {}x{dim}",
                values.nrows(),
                values.ncols(),
                times.len()
            ));
        }
        Ok(Self { big_l, times, values })
    }

    pub fn header(&self) -> String {
        let mut h = String::from("t");
        for p in lattice_points(self.big_l) {
            h.push(',');
            h.push_str(&p.label());
        }
        h
    }
}

/// `∫_a^b f` for matrix-valued `f` by a composite 15-point rule.
fn matrix_rule<F: Fn(f64) -> DMatrix<f64>>(f: F, a: f64, b: f64, panels: usize, dim: usize) -> DMatrix<f64> {
    let h = (b - a) / panels as f64;
    let mut acc = DMatrix::zeros(dim, dim);
    for k in 0..panels {
        let (lo, hi) = (a + h * k as f64, a + h * (k + 1) as f64);
        for (x, w) in kronrod_nodes(lo, hi).iter().zip(kronrod_weights(lo, hi).iter()) {
            acc += f(*x) * *w;
        }
    }
    acc
}

fn opnorm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Precomputed transitions and noise factors for exact stepping on a time grid.
#[derive(Debug, Clone)]
pub struct EulerPlan {
    pub big_l: u64,
    pub times: Vec<f64>,
    init_mean: DVector<f64>,
    init_cov: DMatrix<f64>,
    init_factor: DMatrix<f64>,
    transitions: Vec<DMatrix<f64>>,
    noise_cov: Vec<DMatrix<f64>>,
    noise_factor: Vec<DMatrix<f64>>,
}

/// Step covariance `C(δ) = ∫_0^δ e^{rA} e^{rAᵀ} e^{δ-r} dr`.
fn step_covariance(a: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let dim = a.nrows();
    let panels = ((4.0 * delta * (1.0 + opnorm1(a))).ceil() as usize).max(1);
    matrix_rule(
        |r| {
            let e = expm(&(a * r));
            &e * e.transpose() * (delta - r).exp()
        },
        0.0,
        delta,
        panels,
        dim,
    )
}

/// `∫_0^∞ e^{vA} e^{vAᵀ} e^{-v} dv`, the covariance of `ζ_1`.
fn unit_time_covariance(a: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = a.nrows();
    let width = 0.25 / (1.0 + opnorm1(a));
    let end = 45.0;
    let panels = (end / width).ceil() as usize;
    let h = end / panels as f64;
    let offsets = kronrod_nodes(0.0, h);
    let weights = kronrod_weights(0.0, h);
    let local: Vec<DMatrix<f64>> = offsets.iter().map(|x| expm(&(a * *x))).collect();
    let step = expm(&(a * h));
    let mut base = DMatrix::<f64>::identity(dim, dim);
    let mut acc = DMatrix::zeros(dim, dim);
    for k in 0..panels {
        let v0 = h * k as f64;
        for i in 0..15 {
            let e = &base * &local[i];
            acc += &e * e.transpose() * (weights[i] * (-(v0 + offsets[i])).exp());
        }
        base = &base * &step;
    }
    acc
}

impl EulerPlan {
    pub fn new(big_l: u64, xi0: &DVector<f64>, times: &[f64]) -> Result<Self> {
        let g = generator(big_l)?;
        let dim = g.dim();
        if xi0.len() != dim {
            return invalid(format!("xi0 has length {}, expected {dim}", xi0.len()));
        }
        if times.is_empty() || !(times[0] > 0.0) || times.windows(2).any(|w| !(w[0] < w[1])) {
            return invalid("time grid must be positive and strictly increasing");
        }
        let a = &g.entries;
        let t0 = times[0];
        let init_mean = expm(&(a * t0.ln())) * xi0;
        let init_cov = unit_time_covariance(a) * t0;
        let init_factor = psd_sqrt(&init_cov)?;
        let mut cache: HashMap<i64, (DMatrix<f64>, DMatrix<f64>)> = HashMap::new();
        let mut transitions = Vec::new();
        let mut noise_cov = Vec::new();
        let mut noise_factor = Vec::new();
        for w in times.windows(2) {
            let delta = w[1].ln() - w[0].ln();
            let key = (delta * 1e12).round() as i64;
            let (tr, c) = cache
                .entry(key)
                .or_insert_with(|| (expm(&(a * delta)), step_covariance(a, delta)))
                .clone();
            let q = c * w[0];
            noise_factor.push(psd_sqrt(&q)?);
            noise_cov.push(q);
            transitions.push(tr);
        }
        Ok(Self { big_l, times: times.to_vec(), init_mean, init_cov, init_factor, transitions, noise_cov, noise_factor })
    }

    pub fn dim(&self) -> usize {
        self.init_mean.len()
    }

    /// Exact marginal covariances `Cov[ξ_{t_k}]` propagated through the plan.
    pub fn marginal_covariances(&self) -> Vec<DMatrix<f64>> {
        let mut out = vec![self.init_cov.clone()];
        for k in 0..self.transitions.len() {
            let t = &self.transitions[k];
            let next = t * &out[k] * t.transpose() + &self.noise_cov[k];
            out.push(next);
        }
        out
    }

    /// `Cov[ξ_{t_i}, ξ_{t_j}]` for `i <= j`: `Σ_i · (e^{(u_j - u_i)A})ᵀ`.
    pub fn cross_covariance(&self, i: usize, j: usize) -> DMatrix<f64> {
        let marg = self.marginal_covariances();
        let mut c = marg[i].clone();
        for k in i..j {
            c = &c * self.transitions[k].transpose();
        }
        c
    }

    pub fn sample_path<R: Rng>(&self, rng: &mut R) -> DMatrix<f64> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(self.times.len(), dim);
        let normal = |rng: &mut R| DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut y = &self.init_mean + &self.init_factor * normal(rng);
        out.row_mut(0).copy_from(&y.transpose());
        for k in 0..self.transitions.len() {
            y = &self.transitions[k] * &y + &self.noise_factor[k] * normal(rng);
            out.row_mut(k + 1).copy_from(&y.transpose());
        }
        out
    }
}

/// One path of `ξ` on the grid, drawn from path stream `path`.
pub fn simulate_whittaker_euler(
    big_l: u64,
    xi0: &DVector<f64>,
    times: &[f64],
    stream: &RngStream,
    path: u64,
) -> Result<PathSample> {
    let plan = EulerPlan::new(big_l, xi0, times)?;
    PathSample::new(big_l, times.to_vec(), plan.sample_path(&mut stream.path_rng(path)))
}

/// Many paths in parallel; entry `i` comes from path stream `i`.
pub fn simulate_euler_paths(plan: &EulerPlan, n_paths: usize, stream: &RngStream) -> Vec<DMatrix<f64>> {
    (0..n_paths).into_par_iter().map(|i| plan.sample_path(&mut stream.path_rng(i as u64))).collect()
}

/// Covariance estimate with its jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Unbiased covariances of sample columns (rows are samples) with leave-one-out
/// jackknife standard errors, infinite below three samples.
pub fn empirical_covariance(samples: &DMatrix<f64>, pairs: &[(usize, usize)]) -> Result<Vec<CovEstimate>> {
    let n = samples.nrows();
    if n < 2 {
        return invalid(format!("need at least 2 samples, got {n}"));
    }
    let nf = n as f64;
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= samples.ncols() || j >= samples.ncols() {
            return invalid(format!("pair ({i}, {j}) out of range"));
        }
        let mx = samples.column(i).mean();
        let my = samples.column(j).mean();
        let x: Vec<f64> = samples.column(i).iter().map(|v| v - mx).collect();
        let y: Vec<f64> = samples.column(j).iter().map(|v| v - my).collect();
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let value = (sxy - sx * sy / nf) / (nf - 1.0);
        let stderr = if n < 3 {
            f64::INFINITY
        } else {
            let loo: Vec<f64> = (0..n)
                .map(|k| {
                    let (a, b) = (sx - x[k], sy - y[k]);
                    (sxy - x[k] * y[k] - a * b / (nf - 1.0)) / (nf - 2.0)
                })
                .collect();
            let mean = loo.iter().sum::<f64>() / nf;
            ((nf - 1.0) / nf * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt()
        };
        out.push(CovEstimate { i, j, value, stderr });
    }
    Ok(out)
}

/// Positions of the q-Whittaker particles in lattice order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleConfig {
    pub big_l: u64,
    pub positions: Vec<i64>,
}

impl ParticleConfig {
    pub fn new(big_l: u64, positions: Vec<i64>) -> Result<Self> {
        if big_l < 3 {
            return invalid(format!("L must be at least 3, got {big_l}"));
        }
        let dim = (big_l * (big_l + 1) / 2) as usize;
        if positions.len() != dim {
            return invalid(format!("expected {dim} positions, got {}", positions.len()));
        }
        let c = Self { big_l, positions };
        c.check_interlacing()?;
        Ok(c)
    }

    pub fn zero(big_l: u64) -> Result<Self> {
        Self::new(big_l, vec![0; (big_l * (big_l + 1) / 2) as usize])
    }

    fn contains(&self, a1: u64, a2: u64) -> bool {
        a1 >= 1 && a1 <= a2 && a2 <= self.big_l
    }

    pub fn get(&self, a1: u64, a2: u64) -> i64 {
        self.positions[LatticePoint { a1, a2 }.index()]
    }

    /// `λ(a1+1, a2) <= λ(a1, a2-1) <= λ(a1, a2)` wherever both sides exist.
    pub fn check_interlacing(&self) -> Result<()> {
        for a2 in 2..=self.big_l {
            for a1 in 1..a2 {
                let (lo, mid, hi) = (self.get(a1 + 1, a2), self.get(a1, a2 - 1), self.get(a1, a2));
                if !(lo <= mid && mid <= hi) {
                    return Err(Error::Interlacing(format!(
                        "λ({},{a2}) = {lo}, λ({a1},{}) = {mid}, λ({a1},{a2}) = {hi}",
                        a1 + 1,
                        a2 - 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Jump rate `c_q(a, λ)`; factors whose neighbour lies outside the lattice are 1.
    pub fn rate(&self, a: LatticePoint, q: f64) -> f64 {
        let (a1, a2) = (a.a1, a.a2);
        let x = self.get(a1, a2);
        let pw = |e: i64| q.powi(e as i32);
        let block = if a1 >= 2 {
            1.0 - pw(self.get(a1 - 1, a2 - 1) - x)
        } else {
            1.0
        };
        let right = if self.contains(a1 + 1, a2) { 1.0 - pw(x - self.get(a1 + 1, a2) + 1) } else { 1.0 };
        let below = if a2 >= 2 && self.contains(a1, a2 - 1) { 1.0 - pw(x - self.get(a1, a2 - 1) + 1) } else { 1.0 };
        block * right / below
    }

    /// Moves `a` right by one and pushes the maximal vertical string above it
    /// that shared its old position. Returns the string length `ℓ - 1`.
    pub fn jump(&mut self, a: LatticePoint) -> u32 {
        let old = self.get(a.a1, a.a2);
        self.positions[a.index()] += 1;
        let mut pushed = 0;
        let mut a2 = a.a2 + 1;
        while a2 <= self.big_l && self.get(a.a1, a2) == old {
            self.positions[LatticePoint { a1: a.a1, a2 }.index()] += 1;
            pushed += 1;
            a2 += 1;
        }
        pushed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleEvent {
    pub time: f64,
    pub particle: LatticePoint,
    pub pushed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTrajectory {
    pub initial: ParticleConfig,
    pub events: Vec<ParticleEvent>,
    pub final_config: ParticleConfig,
    pub final_time: f64,
}

/// Gillespie simulation up to `horizon` or `max_events`, whichever comes first.
/// Interlacing is re-checked after every event.
pub fn simulate_qwhittaker(
    q: f64,
    config0: &ParticleConfig,
    horizon: f64,
    max_events: u64,
    stream: &RngStream,
) -> Result<QTrajectory> {
    if !(0.0..1.0).contains(&q) {
        return invalid(format!("q must lie in [0, 1), got {q}"));
    }
    config0.check_interlacing()?;
    let pts = lattice_points(config0.big_l);
    let mut rng = stream.rng();
    let mut cfg = config0.clone();
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut rates = vec![0.0; pts.len()];
    while (events.len() as u64) < max_events {
        let mut total = 0.0;
        for (k, p) in pts.iter().enumerate() {
            rates[k] = cfg.rate(*p, q);
            total += rates[k];
        }
        if total <= 0.0 {
            break;
        }
        let e: f64 = rng.sample(Exp1);
        if t + e / total > horizon {
            t = horizon;
            break;
        }
        t += e / total;
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = pts.len() - 1;
        for (k, r) in rates.iter().enumerate() {
            acc += r;
            if target < acc && *r > 0.0 {
                pick = k;
                break;
            }
        }
        let pushed = cfg.jump(pts[pick]);
        events.push(ParticleEvent { time: t, particle: pts[pick], pushed });
        if let Err(Error::Interlacing(msg)) = cfg.check_interlacing() {
            let log: Vec<String> =
                events.iter().map(|e| format!("{:.6} ({},{}) +{}", e.time, e.particle.a1, e.particle.a2, e.pushed)).collect();
            return Err(Error::Interlacing(format!("{msg} after {} events: [{}]", events.len(), log.join("; "))));
        }
    }
    Ok(QTrajectory { initial: config0.clone(), events, final_config: cfg, final_time: t })
}

/// Trajectory CSV: a header `t,1_1,1_2,2_2,...` then one row per time.
pub fn write_trajectory_csv<W: Write>(path: &PathSample, mut w: W) -> io::Result<()> {
    writeln!(w, "{}", path.header())?;
    for (k, t) in path.times.iter().enumerate() {
        let mut line = format!("{t:e}");
        for v in path.values.row(k).iter() {
            line.push_str(&format!(",{v:e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<PathSample> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidInput("empty trajectory file".into()))?.map_err(io_err)?;
    let cols = header.split(',').count() - 1;
    let big_l = ((((8 * cols + 1) as f64).sqrt() - 1.0) / 2.0).round() as u64;
    let mut times = Vec::new();
    let mut vals = Vec::new();
    for line in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if nums.len() != cols + 1 {
            return invalid(format!("row has {} fields, expected {}", nums.len(), cols + 1));
        }
        times.push(nums[0]);
        vals.extend_from_slice(&nums[1..]);
    }
    let rows = times.len();
    PathSample::new(big_l, times, DMatrix::from_row_slice(rows, cols, &vals))
}

fn io_err(e: io::Error) -> Error {
    Error::InvalidInput(format!("io: {e}"))
}

/// Binary trajectory layout, all little-endian: magic `WSDE`, `u32` version 1,
/// `u64` L, `u64` number of times, the times as `f64`, then values row by row.
pub fn write_trajectory_binary<W: Write>(path: &PathSample, mut w: W) -> io::Result<()> {
    w.write_all(b"WSDE")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&path.big_l.to_le_bytes())?;
    w.write_all(&(path.times.len() as u64).to_le_bytes())?;
    for t in &path.times {
        w.write_all(&t.to_le_bytes())?;
    }
    for k in 0..path.values.nrows() {
        for v in path.values.row(k).iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_trajectory_binary<R: Read>(mut r: R) -> Result<PathSample> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != b"WSDE" {
        return invalid("not a WSDE trajectory file");
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io_err)?;
    if u32::from_le_bytes(b4) != 1 {
        return invalid("unsupported WSDE version");
    }
    r.read_exact(&mut b8).map_err(io_err)?;
    let big_l = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(io_err)?;
    let n = u64::from_le_bytes(b8) as usize;
    let dim = (big_l * (big_l + 1) / 2) as usize;
    let mut read_f = |r: &mut R| -> Result<f64> {
        r.read_exact(&mut b8).map_err(io_err)?;
        Ok(f64::from_le_bytes(b8))
    };
    let times = (0..n).map(|_| read_f(&mut r)).collect::<Result<Vec<_>>>()?;
    let vals = (0..n * dim).map(|_| read_f(&mut r)).collect::<Result<Vec<_>>>()?;
    PathSample::new(big_l, times, DMatrix::from_row_slice(n, dim, &vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binom::{binom_pmf, BinomialSpec};

    fn quad() -> QuadratureConfig {
        QuadratureConfig::new(1e-13, 1e-11)
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = RngStream::new(7, 3);
        let a: Vec<u64> = (0..5).map(|_| s.rng().gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = s.path_rng(1).gen();
        let y: u64 = RngStream::new(7, 4).path_rng(1).gen();
        assert_ne!(x, y);
        assert_ne!(x, s.path_rng(2).gen::<u64>());
    }

    #[test]
    fn death_chain_basics() {
        let s = RngStream::new(1, 0);
        let z = simulate_death_chain(0, 5.0, &s);
        assert!(z.jump_times.is_empty());
        assert_eq!(z.value_at(3.0), 0);
        let d = simulate_death_chain(20, 100.0, &s);
        assert_eq!(d.jump_times.len(), 20);
        assert_eq!(d.value_at(0.0), 20);
        assert_eq!(d.value_at(100.0), 0);
    }

    #[test]
    fn death_chain_marginal_is_binomial() {
        let (m0, t, n) = (50u64, 0.5, 100_000usize);
        let s = RngStream::new(11, 2);
        let counts: Vec<u64> = (0..n)
            .into_par_iter()
            .map(|i| death_chain_with(m0, t, &mut s.path_rng(i as u64)).value_at(t))
            .collect();
        let mean = counts.iter().sum::<u64>() as f64 / n as f64;
        let p = (-t).exp();
        let sd = (m0 as f64 * p * (1.0 - p) / n as f64).sqrt();
        assert!((mean - m0 as f64 * p).abs() < 3.0 * sd);
        // chi-square over cells with expected count >= 5, tails pooled
        let mut hist = vec![0f64; m0 as usize + 1];
        for c in &counts {
            hist[*c as usize] += 1.0;
        }
        let spec = BinomialSpec::new(m0, p).unwrap();
        let (mut chi, mut df, mut pool_o, mut pool_e) = (0.0, 0i32, 0.0, 0.0);
        for k in 0..=m0 as usize {
            let e = n as f64 * binom_pmf(spec, k as i64);
            if e < 5.0 {
                pool_o += hist[k];
                pool_e += e;
            } else {
                chi += (hist[k] - e).powi(2) / e;
                df += 1;
            }
        }
        if pool_e > 0.0 {
            chi += (pool_o - pool_e).powi(2) / pool_e;
            df += 1;
        }
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let pval = 1.0 - ChiSquared::new((df - 1) as f64).unwrap().cdf(chi);
        assert!(pval > 0.001, "chi2 = {chi}, df = {df}, p = {pval}");
    }

    #[test]
    fn pair_chain_rates_match_generator() {
        let a = LatticePoint::new(3, 5).unwrap();
        let n = 200_000;
        let s = RngStream::new(5, 9);
        let h = 0.02;
        let firsts: Vec<Option<(f64, LatticePoint)>> = (0..n)
            .into_par_iter()
            .map(|i| pair_chain_with(a, h, &mut s.path_rng(i as u64)).unwrap().first().copied())
            .collect();
        let mut both = 0.0;
        let mut top = 0.0;
        let mut exposure = 0.0;
        for f in &firsts {
            match f {
                Some((t, b)) => {
                    exposure += t;
                    if *b == LatticePoint::new(2, 4).unwrap() {
                        both += 1.0;
                    } else if *b == LatticePoint::new(3, 4).unwrap() {
                        top += 1.0;
                    } else {
                        panic!("unexpected transition to {b:?}");
                    }
                }
                None => exposure += h,
            }
        }
        // Poisson counts: rate estimate count/exposure, stderr sqrt(count)/exposure
        for (count, rate) in [(both, 2.0), (top, 2.0)] {
            let est = count / exposure;
            assert!((est - rate).abs() < 3.0 * count.sqrt() / exposure, "{est} vs {rate}");
        }
    }

    #[test]
    fn gaussian_single_point_variance() {
        let a = LatticePoint::new(2, 3).unwrap();
        let g = GaussianSampler::new(&[(a, 1.5)], &quad()).unwrap();
        let v = covariance_exact(delta_map(a).unwrap(), delta_map(a).unwrap(), 1.5, 1.5, &quad()).unwrap();
        assert_eq!(g.covariance[(0, 0)], v);
        assert!(GaussianSampler::new(&[(a, 0.0)], &quad()).is_err());
    }

    #[test]
    fn gaussian_samples_reproduce_exact_covariance() {
        let pts = [
            (LatticePoint::new(1, 1).unwrap(), 1.0),
            (LatticePoint::new(1, 2).unwrap(), 1.0),
            (LatticePoint::new(2, 3).unwrap(), 0.7),
            (LatticePoint::new(2, 3).unwrap(), 1.6),
        ];
        let g = GaussianSampler::new(&pts, &quad()).unwrap();
        let x = g.sample_many(100_000, &RngStream::new(3, 1));
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|i| (i..4).map(move |j| (i, j))).collect();
        for e in empirical_covariance(&x, &pairs).unwrap() {
            assert!((e.value - g.covariance[(e.i, e.j)]).abs() < 3.0 * e.stderr + 1e-12);
        }
        for j in 0..4 {
            let col = x.column(j);
            let sd = (g.covariance[(j, j)] / 100_000.0).sqrt();
            assert!(col.mean().abs() < 3.0 * sd);
        }
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(psd_sqrt(&m), Err(Error::Factorization(_))));
        let near = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let r = psd_sqrt(&near).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn euler_plan_matches_exact_covariance() {
        let times = [0.5, 0.8, 1.3, 2.0];
        let plan = EulerPlan::new(3, &DVector::zeros(6), &times).unwrap();
        let pts = lattice_points(3);
        for i in 0..times.len() {
            for j in i..times.len() {
                let c = plan.cross_covariance(i, j);
                for a in &pts {
                    for b in &pts {
                        let want = covariance_exact(delta_map(*a).unwrap(), delta_map(*b).unwrap(), times[i], times[j], &quad()).unwrap();
                        assert!((c[(a.index(), b.index())] - want).abs() < 1e-9, "{a:?} {b:?} {i} {j}");
                    }
                }
            }
        }
        // (1,1) does not move: plain Brownian motion
        for (k, m) in plan.marginal_covariances().iter().enumerate() {
            assert!((m[(0, 0)] - times[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_step_refinement_is_exact() {
        let coarse = EulerPlan::new(4, &DVector::zeros(10), &[0.5, 2.0]).unwrap();
        let grid: Vec<f64> = (0..=8).map(|k| 0.5 * 4f64.powf(k as f64 / 8.0)).collect();
        let fine = EulerPlan::new(4, &DVector::zeros(10), &grid).unwrap();
        let a = coarse.marginal_covariances().pop().unwrap();
        let b = fine.marginal_covariances().pop().unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn euler_mean_follows_semigroup() {
        let mut xi0 = DVector::zeros(6);
        xi0[LatticePoint::new(2, 3).unwrap().index()] = 1.0;
        let plan = EulerPlan::new(3, &xi0, &[1.0, 2.0]).unwrap();
        let paths = simulate_euler_paths(&plan, 20_000, &RngStream::new(2, 2));
        let g = generator(3).unwrap();
        let mean = expm(&(&g.entries * 2f64.ln())) * &xi0;
        let v = plan.marginal_covariances()[1].clone();
        for k in 0..6 {
            let m = paths.iter().map(|p| p[(1, k)]).sum::<f64>() / paths.len() as f64;
            assert!((m - mean[k]).abs() < 4.0 * (v[(k, k)] / paths.len() as f64).sqrt() + 1e-12);
        }
        let p = simulate_whittaker_euler(3, &xi0, &[1.0, 2.0], &RngStream::new(2, 2), 0).unwrap();
        assert_eq!(p.values, paths[0]);
    }

    #[test]
    fn empirical_covariance_examples() {
        let c = DMatrix::from_element(10, 2, 3.0);
        let e = empirical_covariance(&c, &[(0, 1)]).unwrap();
        assert_eq!(e[0].value, 0.0);
        let s = RngStream::new(4, 4);
        let mut rng = s.rng();
        let x = DMatrix::from_fn(20_000, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = empirical_covariance(&x, &[(0, 1), (0, 0)]).unwrap();
        assert!(e[0].value.abs() < 3.0 * e[0].stderr);
        assert!((e[1].value - 1.0).abs() < 3.0 * e[1].stderr);
        assert!(empirical_covariance(&DMatrix::zeros(1, 2), &[(0, 1)]).is_err());
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.1, -2.0, 1.5, 0.7, 0.7]);
        let e = empirical_covariance(&x, &[(0, 1)]).unwrap()[0];
        let cov = |rows: &[usize]| {
            let n = rows.len() as f64;
            let mx = rows.iter().map(|r| x[(*r, 0)]).sum::<f64>() / n;
            let my = rows.iter().map(|r| x[(*r, 1)]).sum::<f64>() / n;
            rows.iter().map(|r| (x[(*r, 0)] - mx) * (x[(*r, 1)] - my)).sum::<f64>() / (n - 1.0)
        };
        assert!((e.value - cov(&[0, 1, 2, 3, 4])).abs() < 1e-14);
        let loo: Vec<f64> = (0..5).map(|k| cov(&(0..5).filter(|r| *r != k).collect::<Vec<_>>())).collect();
        let m = loo.iter().sum::<f64>() / 5.0;
        let se = (0.8 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt();
        assert!((e.stderr - se).abs() < 1e-13);
    }

    #[test]
    fn rate_conventions() {
        let c = ParticleConfig::zero(3).unwrap();
        let p11 = LatticePoint::new(1, 1).unwrap();
        assert_eq!(c.rate(p11, 0.5), 1.0);
        // λ ≡ 0: every particle with a1 >= 2 is blocked
        assert_eq!(c.rate(LatticePoint::new(2, 2).unwrap(), 0.5), 0.0);
        let q: f64 = 0.3;
        let c = ParticleConfig::new(3, vec![2, 3, 1, 4, 2, 0]).unwrap();
        let want = (1.0 - q) * (1.0 - q.powi(3)) / (1.0 - q.powi(2));
        assert!((c.rate(LatticePoint::new(2, 3).unwrap(), q) - want).abs() < 1e-15);
        let want = (1.0 - q.powi(3)) / (1.0 - q.powi(2));
        assert!((c.rate(LatticePoint::new(1, 2).unwrap(), q) - want).abs() < 1e-15);
        let near = ParticleConfig::new(3, vec![5, 7, 2, 9, 4, 1]).unwrap();
        for p in lattice_points(3) {
            let r = near.rate(p, 1e-6);
            assert!((r - 1.0).abs() < 1e-5, "{p:?}: {r}");
        }
    }

    #[test]
    fn pushing_moves_the_vertical_string() {
        let mut c = ParticleConfig::new(3, vec![1, 1, 0, 1, 0, 0]).unwrap();
        let pushed = c.jump(LatticePoint::new(1, 1).unwrap());
        assert_eq!(pushed, 2);
        assert_eq!(c.positions, vec![2, 2, 0, 2, 0, 0]);
        c.check_interlacing().unwrap();
        assert!(ParticleConfig::new(3, vec![0, 0, 1, 0, 0, 0]).is_err());
    }

    #[test]
    fn qwhittaker_preserves_interlacing_and_reproduces() {
        let c0 = ParticleConfig::zero(5).unwrap();
        let s = RngStream::new(8, 1);
        let a = simulate_qwhittaker(0.5, &c0, f64::INFINITY, 20_000, &s).unwrap();
        assert_eq!(a.events.len(), 20_000);
        a.final_config.check_interlacing().unwrap();
        let b = simulate_qwhittaker(0.5, &c0, f64::INFINITY, 20_000, &s).unwrap();
        assert_eq!(a, b);
        assert!(simulate_qwhittaker(1.0, &c0, 1.0, 10, &s).is_err());
    }

    #[test]
    fn trajectory_round_trips() {
        let plan = EulerPlan::new(3, &DVector::zeros(6), &[0.5, 1.0, 1.5]).unwrap();
        let vals = plan.sample_path(&mut RngStream::new(1, 1).rng());
        let p = PathSample::new(3, vec![0.5, 1.0, 1.5], vals).unwrap();
        assert_eq!(p.header(), "t,1_1,1_2,2_2,1_3,2_3,3_3");
        let mut buf = Vec::new();
        write_trajectory_csv(&p, &mut buf).unwrap();
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back, p);
        let mut bin = Vec::new();
        write_trajectory_binary(&p, &mut bin).unwrap();
        assert_eq!(&bin[..4], b"WSDE");
        assert_eq!(read_trajectory_binary(&bin[..]).unwrap(), p);
        assert!(PathSample::new(3, vec![1.0, 1.0, 1.5], p.values.clone()).is_err());
    }
}
