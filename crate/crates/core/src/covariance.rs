//! Circulant (periodic convolution) covariance operators.
//!
//! An operator `K` is stored through its real, nonnegative DFT eigenvalues on
//! a `height x width` grid. Multi-channel fields are stored channel-major,
//! each channel a row-major grid, and `K` acts on every channel separately.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::container::{Record, OPERATOR_MAGIC};
use crate::error::{check_len, Error, Result};
use crate::fft::{signed_index, Fft2};

/// Kernel widths at or below this value are the delta kernel.
pub const DELTA_STD: f64 = 0.5;

/// Relative floor applied to `KK^T` eigenvalues whenever an inverse is formed.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(Self { height, width })
    }

    /// A 1D signal of length `n`, stored as a `1 x n` grid.
    pub fn line(n: usize) -> Result<Self> {
        Self::new(1, n)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of channels in a field of `n` values, if it tiles the grid.
    pub fn channels_of(&self, n: usize) -> Result<usize> {
        if n == 0 || n % self.len() != 0 {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: n,
            });
        }
        Ok(n / self.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kernel_std: f64,
    /// One noise realization shared by every channel.
    pub grayscale: bool,
    /// Weight of the isotropic floor `gamma * z2`.
    pub gamma: f64,
}

impl NoiseSpec {
    pub fn white() -> Self {
        Self {
            kernel_std: 0.0,
            grayscale: false,
            gamma: 0.0,
        }
    }

    pub fn correlated(kernel_std: f64, grayscale: bool) -> Self {
        Self {
            kernel_std,
            grayscale,
            gamma: 0.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_std.is_finite() && self.kernel_std >= 0.0) {
            return Err(Error::invalid("kernel_std", format!("{}", self.kernel_std)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid("gamma", format!("{}", self.gamma)));
        }
        Ok(())
    }

    /// The Gaussian operator this spec describes on `grid`.
    pub fn operator(&self, grid: Grid) -> Result<CirculantOperator> {
        CirculantOperator::gaussian(self.kernel_std, grid)
    }
}

#[derive(Debug, Clone)]
pub struct CirculantOperator {
    grid: Grid,
    eigenvalues: Vec<f64>,
    kernel_std: f64,
    fft: Fft2,
}

impl CirculantOperator {
    /// Periodically wrapped, unit-sum isotropic Gaussian blur of width `std` pixels.
    ///
    /// Eigenvalues are evaluated through the Poisson-summed Gaussian spectrum,
    /// a sum of positive terms, so they stay strictly positive and accurate
    /// far below the round-off level of a transformed spatial kernel.
    pub fn gaussian(std: f64, grid: Grid) -> Result<Self> {
        if !std.is_finite() || std < 0.0 {
            return Err(Error::invalid("std", format!("{std}")));
        }
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if std <= DELTA_STD {
            let mut op = Self::identity(grid);
            op.kernel_std = std;
            return Ok(op);
        }
        let rows: Vec<f64> = (0..grid.height)
            .map(|k| gaussian_axis_eigenvalue(std, k, grid.height))
            .collect();
        let cols: Vec<f64> = (0..grid.width)
            .map(|k| gaussian_axis_eigenvalue(std, k, grid.width))
            .collect();
        let eigenvalues = rows
            .iter()
            .flat_map(|r| cols.iter().map(move |c| r * c))
            .collect();
        Ok(Self {
            grid,
            eigenvalues,
            kernel_std: std,
            fft: Fft2::new(grid.height, grid.width),
        })
    }

    pub fn identity(grid: Grid) -> Self {
        Self {
            grid,
            eigenvalues: vec![1.0; grid.len()],
            kernel_std: 0.0,
            fft: Fft2::new(grid.height, grid.width),
        }
    }

    /// Builds an operator directly from its spectrum.
    ///
    /// The spectrum must be finite, nonnegative and symmetric under
    /// `k -> -k` so that the spatial kernel is real and symmetric.
    pub fn from_eigenvalues(grid: Grid, eigenvalues: Vec<f64>) -> Result<Self> {
        check_len(grid.len(), eigenvalues.len())?;
        if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("eigenvalues", "must be finite and nonnegative"));
        }
        for r in 0..grid.height {
            for c in 0..grid.width {
                let rr = (grid.height - r) % grid.height;
                let cc = (grid.width - c) % grid.width;
                let a = eigenvalues[r * grid.width + c];
                let b = eigenvalues[rr * grid.width + cc];
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::invalid("eigenvalues", "spectrum is not symmetric"));
                }
            }
        }
        Ok(Self {
            grid,
            eigenvalues,
            kernel_std: 0.0,
            fft: Fft2::new(grid.height, grid.width),
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn kernel_std(&self) -> f64 {
        self.kernel_std
    }

    pub fn is_delta(&self) -> bool {
        self.eigenvalues.iter().all(|&v| v == 1.0)
    }

    /// Eigenvalues of `KK^T`.
    pub fn kkt_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|v| v * v).collect()
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    /// Multiplies every channel of `x` by a real spectral multiplier.
    pub fn apply_multiplier(&self, x: &[f64], multiplier: &[f64]) -> Result<Vec<f64>> {
        check_len(self.grid.len(), multiplier.len())?;
        self.grid.channels_of(x.len())?;
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(self.grid.len()) {
            let mut spec = self.fft.forward_real(chunk);
            for (s, m) in spec.iter_mut().zip(multiplier) {
                *s *= *m;
            }
            out.extend(self.fft.inverse_real(spec));
        }
        Ok(out)
    }

    /// Like [`apply_multiplier`](Self::apply_multiplier) with a complex multiplier.
    pub fn apply_complex_multiplier(&self, x: &[f64], multiplier: &[Complex64]) -> Result<Vec<f64>> {
        check_len(self.grid.len(), multiplier.len())?;
        self.grid.channels_of(x.len())?;
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(self.grid.len()) {
            let mut spec = self.fft.forward_real(chunk);
            for (s, m) in spec.iter_mut().zip(multiplier) {
                *s *= *m;
            }
            out.extend(self.fft.inverse_real(spec));
        }
        Ok(out)
    }

    pub fn apply_k(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_multiplier(x, &self.eigenvalues)
    }

    /// `K^T x`; equal to `K x` because the spectrum is real.
    pub fn apply_k_adjoint(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_k(x)
    }

    pub fn apply_kkt(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_multiplier(x, &self.kkt_eigenvalues())
    }

    /// `(KK^T + gamma^2 I) x`.
    pub fn apply_covariance(&self, x: &[f64], gamma: f64) -> Result<Vec<f64>> {
        self.apply_multiplier(x, &self.covariance_spectrum(gamma))
    }

    /// Spectrum of `KK^T + gamma^2 I`.
    pub fn covariance_spectrum(&self, gamma: f64) -> Vec<f64> {
        let g2 = gamma * gamma;
        self.eigenvalues.iter().map(|v| v * v + g2).collect()
    }

    /// `(KK^T + gamma^2 I)^{-1} x` with eigenvalues clamped at `EIGEN_FLOOR * max`.
    pub fn apply_clamped_inverse(&self, x: &[f64], gamma: f64) -> Result<Vec<f64>> {
        let spec = self.covariance_spectrum(gamma);
        let floor = EIGEN_FLOOR * spec.iter().cloned().fold(0.0, f64::max);
        let inv: Vec<f64> = spec.iter().map(|&v| 1.0 / v.max(floor)).collect();
        self.apply_multiplier(x, &inv)
    }

    /// `max / min` eigenvalue of `KK^T`; `+inf` when the operator is singular.
    pub fn condition_number(&self) -> f64 {
        condition_of(&self.kkt_eigenvalues())
    }

    /// Zero-centred spatial kernel (index 0 is the centre tap).
    pub fn spatial_kernel(&self) -> Vec<f64> {
        let spec = self
            .eigenvalues
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        self.fft.inverse_real(spec)
    }

    /// Dense `KK^T + gamma^2 I` for a single channel; meant for small grids.
    pub fn dense_covariance(&self, gamma: f64) -> DMatrix<f64> {
        let n = self.grid.len();
        let spec = self.covariance_spectrum(gamma);
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply_multiplier(&e, &spec).expect("grid-sized input");
            for i in 0..n {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }

    /// Draws `K z1 + gamma z2` over `channels` channels.
    pub fn sample_noise_with<R: Rng + ?Sized>(
        &self,
        spec: &NoiseSpec,
        channels: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        spec.validate()?;
        if channels == 0 {
            return Err(Error::invalid("channels", "must be positive"));
        }
        let n = self.grid.len();
        let draws = if spec.grayscale { 1 } else { channels };
        let mut out = Vec::with_capacity(n * channels);
        for _ in 0..draws {
            let z1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mut field = self.apply_k(&z1)?;
            if spec.gamma > 0.0 {
                for v in field.iter_mut() {
                    let z2: f64 = rng.sample(StandardNormal);
                    *v += spec.gamma * z2;
                }
            }
            out.extend(field);
        }
        if spec.grayscale {
            let first = out.clone();
            for _ in 1..channels {
                out.extend_from_slice(&first);
            }
        }
        Ok(out)
    }

    pub fn sample_noise(&self, spec: &NoiseSpec, channels: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_noise_with(spec, channels, &mut rng)
    }

    pub fn to_record(&self) -> Record {
        Record {
            magic: OPERATOR_MAGIC,
            dims: vec![self.grid.height as u64, self.grid.width as u64],
            header: vec![self.kernel_std],
            data: self.eigenvalues.clone(),
        }
    }

    pub fn from_record(rec: &Record) -> Result<Self> {
        if rec.dims.len() != 2 {
            return Err(Error::Container(format!("operator rank {}", rec.dims.len())));
        }
        let grid = Grid::new(rec.dims[0] as usize, rec.dims[1] as usize)?;
        let mut op = Self::from_eigenvalues(grid, rec.data.clone())?;
        op.kernel_std = rec.header[0];
        Ok(op)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_record().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_record(&Record::read(path, OPERATOR_MAGIC, 1, None)?)
    }
}

pub(crate) fn condition_of(spectrum: &[f64]) -> f64 {
    let max = spectrum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = spectrum.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// DFT at bin `k` of the unit-sum Gaussian sampled on the integers and wrapped
/// onto an axis of length `n`, via `sum_j exp(-s^2 (w + 2 pi j)^2 / 2)`.
fn gaussian_axis_eigenvalue(std: f64, k: usize, n: usize) -> f64 {
    if n == 1 {
        return 1.0;
    }
    let omega = 2.0 * PI * signed_index(k, n) as f64 / n as f64;
    let reach = (10.0 / std).ceil() as i64 + 2;
    let spectrum = |w: f64| -> f64 {
        (-reach..=reach)
            .map(|j| {
                let u = std * (w + 2.0 * PI * j as f64);
                (-0.5 * u * u).exp()
            })
            .sum()
    };
    spectrum(omega) / spectrum(0.0)
}
