//! Whitened-score diffusion with anisotropic (circulant) Gaussian noise.

pub mod cli;
pub mod container;
pub mod covariance;
pub mod error;
pub mod fft;
pub mod oracle;
pub mod inverse;
pub mod samplers;
pub mod sde;
pub mod testbeds;
pub mod training;

pub use covariance::{CirculantOperator, Grid, NoiseSpec};
pub use error::{Error, Result};
pub use oracle::{GaussianMixture, Oracle};
pub use sde::{BetaSchedule, VpSde};
