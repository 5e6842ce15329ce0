//! Anisotropic variance-preserving SDE `dx = -beta_t/2 x dt + sqrt(beta_t) K dw`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::covariance::{condition_of, CirculantOperator, NoiseSpec, EIGEN_FLOOR};
use crate::error::{check_len, Error, Result};

/// Linear schedule `beta(t) = beta_min + t (beta_max - beta_min)` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.01,
            beta_max: 20.0,
        }
    }
}

impl BetaSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_min > 0.0) {
            return Err(Error::invalid("beta_min", format!("{beta_min}")));
        }
        if !(beta_max.is_finite() && beta_max >= beta_min) {
            return Err(Error::invalid("beta_max", format!("{beta_max}")));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `int_0^t beta(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// `exp(-1/2 int_0^t beta)`; no range check.
    pub fn alpha(&self, t: f64) -> f64 {
        (-0.5 * self.integral(t)).exp()
    }

    /// `1 - alpha_t^2`, computed without cancellation for small `t`.
    pub fn noise_variance(&self, t: f64) -> f64 {
        -(-self.integral(t)).exp_m1()
    }

    /// Whitened conditional target `beta_t (alpha_t x0 - x_t) / (1 - alpha_t^2)`.
    ///
    /// Lives on the schedule so that it cannot depend on the noise operator.
    pub fn ws_target(&self, x0: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(x0.len(), x_t.len())?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::TimeOutOfRange(t));
        }
        let a = self.alpha(t);
        let c = self.beta(t) / self.noise_variance(t);
        Ok(x0.iter().zip(x_t).map(|(u, v)| c * (a * u - v)).collect())
    }
}

/// Result of the plain (inverted-covariance) conditional score.
#[derive(Debug, Clone)]
pub struct ConditionalScore {
    pub value: Vec<f64>,
    /// Condition number of the transition covariance.
    pub condition_number: f64,
    /// Set when the eigenvalue floor was engaged during the inverse.
    pub near_singular: bool,
}

#[derive(Debug, Clone)]
pub struct VpSde {
    pub schedule: BetaSchedule,
    pub kernel: CirculantOperator,
    /// Isotropic floor: `G_t G_t^T = beta_t (KK^T + gamma^2 I)`.
    pub gamma: f64,
}

impl VpSde {
    pub fn new(schedule: BetaSchedule, kernel: CirculantOperator) -> Self {
        Self {
            schedule,
            kernel,
            gamma: 0.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// Noise spec consistent with this SDE's kernel and floor.
    pub fn noise_spec(&self, grayscale: bool) -> NoiseSpec {
        NoiseSpec {
            kernel_std: self.kernel.kernel_std(),
            grayscale,
            gamma: self.gamma,
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.schedule.beta(t)
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(self.schedule.alpha(t))
    }

    /// `alpha_t / sqrt(1 - alpha_t^2)`; `+inf` at `t = 0`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let a = self.alpha(t)?;
        if t == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(a / self.schedule.noise_variance(t).sqrt())
    }

    /// Scalar drift coefficient `F_t = -beta_t / 2`.
    pub fn drift(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// Spectrum of `KK^T + gamma^2 I`, the shape shared by `G G^T` and `Sigma_t`.
    pub fn covariance_spectrum(&self) -> Vec<f64> {
        self.kernel.covariance_spectrum(self.gamma)
    }

    /// `G_t G_t^T x`.
    pub fn apply_ggt(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let b = self.beta(t);
        let spec: Vec<f64> = self.covariance_spectrum().iter().map(|v| b * v).collect();
        self.kernel.apply_multiplier(x, &spec)
    }

    /// Draws `x_t = alpha_t x0 + sqrt(1 - alpha_t^2) (K z1 + gamma z2)`.
    ///
    /// `spec` supplies `gamma` and the grayscale switch; the kernel is this
    /// SDE's. Returns `(x_t, K z1 + gamma z2)`.
    pub fn forward_sample_with<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        t: f64,
        spec: &NoiseSpec,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let channels = self.kernel.grid().channels_of(x0.len())?;
        let a = self.alpha(t)?;
        let s = self.schedule.noise_variance(t).sqrt();
        let noise = self.kernel.sample_noise_with(spec, channels, rng)?;
        let x_t = x0.iter().zip(&noise).map(|(u, z)| a * u + s * z).collect();
        Ok((x_t, noise))
    }

    pub fn forward_sample(
        &self,
        x0: &[f64],
        t: f64,
        spec: &NoiseSpec,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.forward_sample_with(x0, t, spec, &mut rng)
    }

    /// `G_t G_t^T grad log p(x_t | x0)`; never touches the kernel.
    pub fn ws_conditional_target(&self, x0: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.schedule.ws_target(x0, x_t, t)
    }

    /// `Sigma_t^{-1} (alpha_t x0 - x_t)` with a clamped spectral inverse.
    ///
    /// Diagnostic only: this is the quantity whose conditioning the whitened
    /// target avoids.
    pub fn conditional_score(&self, x0: &[f64], x_t: &[f64], t: f64) -> Result<ConditionalScore> {
        check_len(x0.len(), x_t.len())?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::TimeOutOfRange(t));
        }
        let a = self.schedule.alpha(t);
        let var = self.schedule.noise_variance(t);
        let spec = self.covariance_spectrum();
        let kappa = condition_of(&spec);
        let max = spec.iter().cloned().fold(0.0, f64::max);
        let floor = EIGEN_FLOOR * max;
        let near_singular = spec.iter().any(|&v| v < floor);
        let inv: Vec<f64> = spec.iter().map(|&v| 1.0 / (var * v.max(floor))).collect();
        let resid: Vec<f64> = x0.iter().zip(x_t).map(|(u, v)| a * u - v).collect();
        Ok(ConditionalScore {
            value: self.kernel.apply_multiplier(&resid, &inv)?,
            condition_number: kappa,
            near_singular,
        })
    }
}
