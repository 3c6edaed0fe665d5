use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use whittaker_core::covariance::{c1_constant_with, sweep_rescaled, SpaceTimePoint, SweepCell};
use whittaker_core::lattice::lattice_points;
use whittaker_core::limit::{kappa0_audit, limit_covariance_detailed, recenter, weak_limit_detailed, GaussianMixture};
use whittaker_core::quadrature::Segment;
use whittaker_core::sim::{
    simulate_euler_paths, simulate_qwhittaker, write_trajectory_binary, write_trajectory_csv, EulerPlan, ParticleConfig,
    PathSample, RngStream,
};
use whittaker_core::weak::{holder_scan, weak_rescaled_report};
use whittaker_core::Error;

use crate::checks;
use crate::config::{mixture, ConfigError, ExperimentConfig};
use crate::output::{num, write_json, CsvOut};

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_CONFIG, e.0)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::new(EXIT_CONFIG, format!("output: {e}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) | Error::Precondition(_) => EXIT_CONFIG,
            Error::NonConvergence { .. } | Error::Factorization(_) => EXIT_NUMERIC,
            Error::Interlacing(_) => EXIT_CHECK,
        };
        Self::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

pub fn identities(cfg: &ExperimentConfig, filter: Option<&str>, fault: Option<&str>) -> Outcome {
    if let Some(f) = fault {
        if !checks::CHECK_NAMES.contains(&f) {
            return Err(Failure::new(EXIT_CONFIG, format!("unknown check `{f}`; known: {}", checks::CHECK_NAMES.join(", "))));
        }
    }
    let summary = checks::run(cfg.identities.instances, cfg.seed, filter, fault);
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if summary.checks.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, format!("filter `{}` matches no check", filter.unwrap_or(""))));
    }
    if !summary.passed {
        return Err(Failure::new(EXIT_CHECK, format!("failing checks: {}", summary.failing.join(", "))));
    }
    Ok(())
}

pub fn converge(cfg: &ExperimentConfig) -> Outcome {
    if cfg.converge.weak {
        converge_weak(cfg)
    } else {
        converge_point(cfg)
    }
}

fn converge_point(cfg: &ExperimentConfig) -> Outcome {
    let c = &cfg.converge;
    if c.s == c.t && c.x == c.y {
        return Err(Failure::new(
            EXIT_CONFIG,
            "pointwise convergence needs s < t or x != y: at s = t, x = y the re-centered covariance still diverges",
        ));
    }
    let mut notes = Vec::new();
    let (mut p1, mut p2) = (SpaceTimePoint::new(c.x, c.s), SpaceTimePoint::new(c.y, c.t));
    if p1.t > p2.t {
        std::mem::swap(&mut p1, &mut p2);
        notes.push("points swapped so that s <= t; the covariance is symmetric".to_string());
    }
    let quad = cfg.quad();
    let schemes = cfg.schemes(&cfg.scheme.ns)?;
    let lim = limit_covariance_detailed(p1.x, p1.t, p2.x, p2.t, &quad)?;
    let cells: Vec<SweepCell> = schemes.iter().map(|sc| SweepCell { p1, p2, scheme: *sc }).collect();
    let reports = sweep_rescaled(&cells, &quad).into_iter().collect::<Result<Vec<_>, _>>()?;
    let dir = cfg.resolve_out_dir();
    let mut out = CsvOut::create(
        &dir,
        "converge.csv",
        &cfg.hash("converge"),
        &notes,
        "N,x1,x2,y1,y2,s,t,raw,recentered,limit,abs_err,quad_err",
    )?;
    for r in &reports {
        let err = (r.recentered_value - lim.value).abs();
        out.row(&[
            r.n.to_string(),
            num(p1.x[0]),
            num(p1.x[1]),
            num(p2.x[0]),
            num(p2.x[1]),
            num(p1.t),
            num(p2.t),
            num(r.raw_value),
            num(r.recentered_value),
            num(lim.value),
            num(err),
            num(r.quadrature_error + lim.error),
        ])?;
        println!("N={:<8} recentered {:+.10} limit {:+.10} |error| {:.3e}", r.n, r.recentered_value, lim.value, err);
    }
    for n in &notes {
        println!("note: {n}");
    }
    println!("wrote {}", out.finish()?.display());
    Ok(())
}

fn converge_weak(cfg: &ExperimentConfig) -> Outcome {
    let c = &cfg.converge;
    let psi = mixture(&c.psi)?;
    let mut notes = Vec::new();
    let mut prepare = |name: &str, bumps| -> Result<GaussianMixture, Failure> {
        let phi = mixture(bumps)?;
        if phi.is_mass_zero() {
            return Ok(phi);
        }
        notes.push(format!("{name} has mass {}; re-centered against psi", phi.total_mass()));
        Ok(recenter(&phi, &psi)?)
    };
    let mut phi1 = prepare("phi1", &c.phi1)?;
    let mut phi2 = prepare("phi2", &c.phi2)?;
    let (mut s, mut t) = (c.s, c.t);
    if s > t {
        std::mem::swap(&mut s, &mut t);
        std::mem::swap(&mut phi1, &mut phi2);
        notes.push("test functions swapped so that s <= t".to_string());
    }
    let quad = cfg.quad();
    let schemes = cfg.schemes(&cfg.scheme.ns)?;
    let lim = weak_limit_detailed(&phi1, &phi2, s, t, &quad)?;
    let reports = schemes
        .par_iter()
        .map(|sc| weak_rescaled_report(&phi1, &phi2, s, t, sc, &quad))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = cfg.resolve_out_dir();
    let mut out =
        CsvOut::create(&dir, "converge_weak.csv", &cfg.hash("converge"), &notes, "N,s,t,raw,recentered,limit,abs_err,quad_err")?;
    for r in &reports {
        let err = (r.recentered - lim.value).abs();
        out.row(&[
            r.n.to_string(),
            num(s),
            num(t),
            num(r.raw),
            num(r.recentered),
            num(lim.value),
            num(err),
            num(r.error + lim.error),
        ])?;
        println!("N={:<8} recentered {:+.10e} limit {:+.10e} |error| {:.3e}", r.n, r.recentered, lim.value, err);
    }
    for n in &notes {
        println!("note: {n}");
    }
    println!("wrote {}", out.finish()?.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Serialize)]
struct ConstantFile<'a> {
    constant: &'a str,
    config_hash: String,
    value: f64,
    error: f64,
    truncation: f64,
    tail: f64,
    tail_bound: f64,
    segments: &'a [Segment],
}

fn write_constant(cfg: &ExperimentConfig, file: ConstantFile, format: Format) -> Outcome {
    let dir = cfg.resolve_out_dir();
    println!("{} = {:.15} ± {:.2e} ({} segments)", file.constant, file.value, file.error, file.segments.len());
    let path = match format {
        Format::Json => write_json(&dir, &format!("{}.json", file.constant), &file)?,
        Format::Csv => {
            let notes = vec![
                format!("{} = {}", file.constant, num(file.value)),
                format!("error = {}", num(file.error)),
                format!("truncation = {}", num(file.truncation)),
                format!("tail = {}", num(file.tail)),
                format!("tail_bound = {}", num(file.tail_bound)),
            ];
            let mut out = CsvOut::create(&dir, &format!("{}.csv", file.constant), &file.config_hash, &notes, "a,b,value,error")?;
            for s in file.segments {
                out.row(&[num(s.a), num(s.b), num(s.value), num(s.error)])?;
            }
            out.finish()?
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}

pub fn c1(cfg: &ExperimentConfig, format: Format) -> Outcome {
    let r = c1_constant_with(&cfg.quad(), cfg.constants.c1_r_max)?;
    write_constant(
        cfg,
        ConstantFile {
            constant: "c1",
            config_hash: cfg.hash("c1"),
            value: r.value,
            error: r.error,
            truncation: r.truncation,
            tail: r.tail,
            tail_bound: r.tail_bound,
            segments: &r.segments,
        },
        format,
    )
}

pub fn kappa0(cfg: &ExperimentConfig, format: Format) -> Outcome {
    let r = kappa0_audit(&cfg.quad())?;
    write_constant(
        cfg,
        ConstantFile {
            constant: "kappa0",
            config_hash: cfg.hash("kappa0"),
            value: r.value,
            error: r.error,
            truncation: r.truncation,
            tail: r.tail,
            tail_bound: r.tail_bound,
            segments: &r.segments,
        },
        format,
    )
}

pub fn simulate(cfg: &ExperimentConfig) -> Outcome {
    let c = &cfg.simulate;
    let dim = (c.lattice * (c.lattice + 1) / 2) as usize;
    let xi0 = if c.xi0.is_empty() { DVector::zeros(dim) } else { DVector::from_vec(c.xi0.clone()) };
    let plan = EulerPlan::new(c.lattice, &xi0, &c.times)?;
    let paths = simulate_euler_paths(&plan, c.paths, &RngStream::new(cfg.seed, 1));
    let dir = cfg.resolve_out_dir();
    let hash = cfg.hash("simulate");
    let mut written: Vec<PathBuf> = Vec::new();
    for (i, values) in paths.into_iter().enumerate() {
        let sample = PathSample::new(c.lattice, c.times.clone(), values)?;
        std::fs::create_dir_all(&dir)?;
        let csv = dir.join(format!("trajectory_{i}.csv"));
        let mut w = BufWriter::new(File::create(&csv)?);
        writeln!(w, "# config-hash: {hash}")?;
        writeln!(w, "# path {i}")?;
        write_trajectory_csv(&sample, &mut w)?;
        w.flush()?;
        written.push(csv);
        if c.binary {
            let bin = dir.join(format!("trajectory_{i}.wsde"));
            let mut w = BufWriter::new(File::create(&bin)?);
            write_trajectory_binary(&sample, &mut w)?;
            w.flush()?;
            written.push(bin);
        }
    }
    println!("{} paths of L = {} on {} times", c.paths, c.lattice, c.times.len());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn qgrowth(cfg: &ExperimentConfig) -> Outcome {
    let c = &cfg.qgrowth;
    let start = ParticleConfig::zero(c.lattice)?;
    let traj = simulate_qwhittaker(c.q, &start, c.horizon, c.max_events, &RngStream::new(cfg.seed, 2))?;
    let dir = cfg.resolve_out_dir();
    let hash = cfg.hash("qgrowth");
    let mut notes = Vec::new();
    if traj.final_time < c.horizon {
        notes.push(format!("stopped after {} events at t = {} before the horizon", traj.events.len(), traj.final_time));
    }

    let mut ev = CsvOut::create(&dir, "qgrowth_events.csv", &hash, &notes, "time,a1,a2,pushed")?;
    for e in &traj.events {
        ev.row(&[num(e.time), e.particle.a1.to_string(), e.particle.a2.to_string(), e.pushed.to_string()])?;
    }
    let ev_path = ev.finish()?;

    let levels: Vec<u64> = (1..=c.lattice).collect();
    let mut header = String::from("t,events");
    for k in &levels {
        header.push_str(&format!(",sum_{k}"));
    }
    for k in &levels {
        header.push_str(&format!(",lead_{k}"));
    }
    let mut hs = CsvOut::create(&dir, "qgrowth_heights.csv", &hash, &notes, &header)?;
    let mut state = start.clone();
    let mut next = 0;
    let last = c.samples - 1;
    for j in 0..c.samples {
        let tj = c.horizon * j as f64 / last as f64;
        while next < traj.events.len() && traj.events[next].time <= tj {
            state.jump(traj.events[next].particle);
            next += 1;
        }
        state.check_interlacing()?;
        let mut row = vec![num(tj), next.to_string()];
        for k in &levels {
            row.push((1..=*k).map(|a1| state.get(a1, *k)).sum::<i64>().to_string());
        }
        for k in &levels {
            row.push(state.get(1, *k).to_string());
        }
        hs.row(&row)?;
    }
    let hs_path = hs.finish()?;
    let top: Vec<String> = lattice_points(c.lattice)
        .iter()
        .filter(|p| p.a2 == c.lattice)
        .map(|p| traj.final_config.get(p.a1, p.a2).to_string())
        .collect();
    println!(
        "{} events up to t = {}, interlacing held at every event; top level [{}]",
        traj.events.len(),
        traj.final_time,
        top.join(" ")
    );
    for n in &notes {
        println!("note: {n}");
    }
    println!("wrote {}", ev_path.display());
    println!("wrote {}", hs_path.display());
    Ok(())
}

pub fn holder(cfg: &ExperimentConfig) -> Outcome {
    let h = &cfg.holder;
    let phi = mixture(&h.phi)?;
    if !phi.is_mass_zero() {
        return Err(Failure::new(EXIT_CONFIG, format!("holder.phi must have total mass 0, got {}", phi.total_mass())));
    }
    let grid: Vec<(f64, f64)> = h.deltas.iter().map(|d| (h.t - d, h.t)).collect();
    let schemes = cfg.schemes(&h.ns)?;
    let table = holder_scan(&phi, &grid, &schemes, &cfg.quad())?;
    let dir = cfg.resolve_out_dir();
    let mut out = CsvOut::create(
        &dir,
        "holder.csv",
        &cfg.hash("holder"),
        &[],
        "N,s,t,I,J,K,total,ratio_I,ratio_J,ratio_K,quad_err",
    )?;
    for r in &table.rows {
        out.row(&[
            r.n.to_string(),
            num(r.s),
            num(r.t),
            num(r.i_n),
            num(r.j_n),
            num(r.k_n),
            num(r.total),
            num(r.ratio_half),
            num(r.ratio_one[0]),
            num(r.ratio_one[1]),
            num(r.error),
        ])?;
    }
    let path = out.finish()?;
    let ok = table.bounded(h.factor);
    println!(
        "column max / coarsest cell: I {:.3}, J {:.3}, K {:.3} (limit {})",
        table.max[0] / table.reference[0],
        table.max[1] / table.reference[1],
        table.max[2] / table.reference[2],
        h.factor
    );
    println!("wrote {}", path.display());
    if ok {
        Ok(())
    } else {
        Err(Failure::new(EXIT_CHECK, format!("ratio columns exceed {} times their coarsest cell", h.factor)))
    }
}
