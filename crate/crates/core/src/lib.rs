//! Numerical laboratory for the Whittaker SDEs and their Edwards–Wilkinson
//! limit.

pub mod approx;
pub mod binom;
pub mod covariance;
pub mod error;
pub mod lattice;
pub mod limit;
pub mod quadrature;
pub mod sim;
pub mod special;
pub mod weak;

pub use binom::{binom_pmf, match_prob, BinomialSpec};
pub use error::{Error, Result};
pub use lattice::{delta_map, sigma_map, DeathPair, GeneratorMatrix, LatticePoint};
pub use quadrature::{integrate, QuadResult, QuadratureConfig};
