//! Declarative experiment configuration. A TOML file fills these sections,
//! command-line flags are applied on top, then everything is validated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use whittaker_core::covariance::{ScalingScheme, DEFAULT_C1_RMAX, DEFAULT_ETA, DEFAULT_T0, DEFAULT_T1};
use whittaker_core::limit::{GaussianMixture, MixtureTerm};
use whittaker_core::quadrature::QuadratureConfig;

pub const OUT_DIR_ENV: &str = "WHITTAKER_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "whittaker-out";

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Quadrature {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        let q = QuadratureConfig::default();
        Self { abs_tol: q.abs_tol, rel_tol: q.rel_tol, max_subdivisions: q.max_subdivisions }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Scheme {
    pub eta: f64,
    pub t0: f64,
    pub t1: f64,
    pub ns: Vec<u64>,
}

impl Default for Scheme {
    fn default() -> Self {
        Self { eta: DEFAULT_ETA, t0: DEFAULT_T0, t1: DEFAULT_T1, ns: vec![1 << 10, 1 << 12, 1 << 14, 1 << 16] }
    }
}

/// One Gaussian bump `weight · N(center, width² I)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub weight: f64,
    pub center: [f64; 2],
    pub width: f64,
}

pub fn mixture(bumps: &[Bump]) -> Result<GaussianMixture, ConfigError> {
    GaussianMixture::new(bumps.iter().map(|b| MixtureTerm { weight: b.weight, center: b.center, width: b.width }).collect())
        .map_err(|e| ConfigError(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Converge {
    pub weak: bool,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub s: f64,
    pub t: f64,
    pub phi1: Vec<Bump>,
    pub phi2: Vec<Bump>,
    /// Unit-mass reference bump used by the re-centering projection.
    pub psi: Vec<Bump>,
}

impl Default for Converge {
    fn default() -> Self {
        Self {
            weak: false,
            x: [0.0, 0.0],
            y: [1.0, 1.0],
            s: 1.0,
            t: 2.0,
            phi1: vec![Bump { weight: 1.0, center: [0.5, 0.0], width: 0.5 }],
            phi2: vec![Bump { weight: 1.0, center: [0.0, 0.5], width: 0.5 }],
            psi: vec![Bump { weight: 1.0, center: [0.0, 0.0], width: 1.0 }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Simulate {
    pub lattice: u64,
    pub times: Vec<f64>,
    pub paths: usize,
    /// Starting values at the first time; zero means the stationary start.
    pub xi0: Vec<f64>,
    pub binary: bool,
}

impl Default for Simulate {
    fn default() -> Self {
        let times = (0..=40).map(|k| 0.5 * 4f64.powf(k as f64 / 40.0)).collect();
        Self { lattice: 3, times, paths: 4, xi0: Vec::new(), binary: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct QGrowth {
    pub lattice: u64,
    pub q: f64,
    pub horizon: f64,
    pub max_events: u64,
    /// Number of equally spaced times at which height statistics are recorded.
    pub samples: usize,
}

impl Default for QGrowth {
    fn default() -> Self {
        Self { lattice: 5, q: 0.5, horizon: 10.0, max_events: 10_000_000, samples: 101 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Holder {
    pub phi: Vec<Bump>,
    pub t: f64,
    pub deltas: Vec<f64>,
    pub ns: Vec<u64>,
    /// Every ratio column must stay within this factor of its coarsest cell.
    pub factor: f64,
}

impl Default for Holder {
    fn default() -> Self {
        Self {
            phi: vec![
                Bump { weight: 1.0, center: [0.0, 0.0], width: 0.4 },
                Bump { weight: -1.0, center: [1.0, 0.5], width: 0.4 },
            ],
            t: 1.0,
            deltas: vec![0.2, 0.05, 0.0125],
            ns: vec![1 << 10, 1 << 12, 1 << 14],
            factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Constants {
    /// Truncation point of the 𝔠_1 integral before the asymptotic tail.
    pub c1_r_max: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { c1_r_max: DEFAULT_C1_RMAX }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Identities {
    pub instances: usize,
}

impl Default for Identities {
    fn default() -> Self {
        Self { instances: 1000 }
    }
}

/// Everything a run depends on. `threads` and `out_dir` do not change results
/// and are left out of the config hash.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub threads: usize,
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub quadrature: Quadrature,
    pub scheme: Scheme,
    pub converge: Converge,
    pub simulate: Simulate,
    pub qgrowth: QGrowth,
    pub holder: Holder,
    pub constants: Constants,
    pub identities: Identities,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            threads: 0,
            out_dir: None,
            quadrature: Quadrature::default(),
            scheme: Scheme::default(),
            converge: Converge::default(),
            simulate: Simulate::default(),
            qgrowth: QGrowth::default(),
            holder: Holder::default(),
            constants: Constants::default(),
            identities: Identities::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn quad(&self) -> QuadratureConfig {
        QuadratureConfig {
            abs_tol: self.quadrature.abs_tol,
            rel_tol: self.quadrature.rel_tol,
            max_subdivisions: self.quadrature.max_subdivisions,
        }
    }

    pub fn schemes(&self, ns: &[u64]) -> Result<Vec<ScalingScheme>, ConfigError> {
        ns.iter()
            .map(|n| {
                ScalingScheme::with_window(*n, self.scheme.eta, self.scheme.t0, self.scheme.t1)
                    .map_err(|e| ConfigError(e.to_string()))
            })
            .collect()
    }

    /// Flag or config value first, then the environment, then the built-in default.
    pub fn resolve_out_dir(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => PathBuf::from(DEFAULT_OUT_DIR),
        }
    }

    /// SHA-256 of the canonical JSON form, tagged with the command name.
    pub fn hash(&self, command: &str) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let q = &self.quadrature;
        if !(q.abs_tol > 0.0 && q.rel_tol > 0.0 && q.max_subdivisions > 0) {
            return bad("quadrature tolerances and max_subdivisions must be positive");
        }
        if self.scheme.ns.is_empty() || self.holder.ns.is_empty() {
            return bad("N lists must not be empty");
        }
        if self.simulate.paths == 0 {
            return bad("simulate.paths must be at least 1");
        }
        if self.qgrowth.samples < 2 {
            return bad("qgrowth.samples must be at least 2");
        }
        if !(self.qgrowth.horizon > 0.0 && self.qgrowth.horizon.is_finite()) {
            return bad("qgrowth.horizon must be positive and finite");
        }
        if !(self.holder.factor >= 1.0) {
            return bad("holder.factor must be at least 1");
        }
        if self.identities.instances == 0 {
            return bad("identities.instances must be at least 1");
        }
        Ok(())
    }
}
