//! Closed-form scores, whitened scores, posterior means and flow-matching
//! velocities for Gaussian-mixture priors pushed through the anisotropic
//! transition kernel `N(alpha_t x0, (1 - alpha_t^2)(KK^T + gamma^2 I))`.
//!
//! Two evaluation paths exist. Full component covariances use dense Cholesky
//! factors and are limited to `MAX_DENSE_DIM` values. Components with scalar
//! covariance `s^2 I` share the eigenbasis of the circulant noise operator, so
//! their marginals are diagonal in the Fourier domain and are solved exactly on
//! grids of any size.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::condition_of;
use crate::error::{check_len, Error, Result};
use crate::sde::VpSde;

pub const MAX_DENSE_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum ComponentCov {
    Full(DMatrix<f64>),
    /// Variance `s^2` of an isotropic component `s^2 I`.
    Scalar(f64),
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<ComponentCov>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<ComponentCov>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::invalid("mixture", "component lists differ in length"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights", "must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("weights", format!("sum to {total}")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("means", "empty"));
        }
        for (m, c) in means.iter().zip(&covs) {
            check_len(dim, m.len())?;
            match c {
                ComponentCov::Scalar(v) => {
                    if !(v.is_finite() && *v >= 0.0) {
                        return Err(Error::invalid("covariance", format!("variance {v}")));
                    }
                }
                ComponentCov::Full(m) => {
                    if dim > MAX_DENSE_DIM {
                        return Err(Error::invalid(
                            "covariance",
                            format!("full covariances are limited to dimension {MAX_DENSE_DIM}"),
                        ));
                    }
                    if m.nrows() != dim || m.ncols() != dim {
                        return Err(Error::ShapeMismatch {
                            expected: dim * dim,
                            actual: m.len(),
                        });
                    }
                    let scale = m.amax().max(1.0);
                    if (m - m.transpose()).amax() > 1e-12 * scale {
                        return Err(Error::invalid("covariance", "not symmetric"));
                    }
                    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
                    if min_eig < -1e-12 * scale {
                        return Err(Error::invalid("covariance", "not positive semidefinite"));
                    }
                }
            }
        }
        Ok(Self {
            weights,
            means,
            covs,
        })
    }

    pub fn single(mean: Vec<f64>, cov: ComponentCov) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Point mass at `mean`.
    pub fn delta(mean: Vec<f64>) -> Result<Self> {
        Self::single(mean, ComponentCov::Scalar(0.0))
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[ComponentCov] {
        &self.covs
    }

    pub fn is_spectral(&self) -> bool {
        self.covs.iter().all(|c| matches!(c, ComponentCov::Scalar(_)))
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Mixture covariance; dense, so meant for small dimensions.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mean = DVector::from_vec(self.mean());
        let mut c = DMatrix::zeros(d, d);
        for ((w, mu), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let diff = DVector::from_column_slice(mu) - &mean;
            c += (dense_cov(cov, d) + &diff * diff.transpose()) * *w;
        }
        c
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        match &self.covs[k] {
            ComponentCov::Scalar(v) => {
                let s = v.sqrt();
                self.means[k].iter().zip(&z).map(|(m, z)| m + s * z).collect()
            }
            ComponentCov::Full(c) => {
                let eig = c.clone().symmetric_eigen();
                let scaled = DVector::from_iterator(
                    d,
                    eig.eigenvalues
                        .iter()
                        .zip(&z)
                        .map(|(l, z)| l.max(0.0).sqrt() * z),
                );
                let x = &eig.eigenvectors * scaled;
                self.means[k].iter().zip(x.iter()).map(|(m, v)| m + v).collect()
            }
        }
    }
}

fn dense_cov(c: &ComponentCov, d: usize) -> DMatrix<f64> {
    match c {
        ComponentCov::Full(m) => m.clone(),
        ComponentCov::Scalar(v) => DMatrix::identity(d, d) * *v,
    }
}

enum Factor {
    Dense {
        chol: Cholesky<f64, Dyn>,
    },
    /// Per-frequency marginal variances `alpha^2 s^2 + (1 - alpha^2) c(w)`.
    Spectral {
        variances: Vec<f64>,
        mean_hat: Vec<Complex64>,
    },
}

struct Component {
    log_weight: f64,
    /// `alpha_t mu_i`.
    mean_t: Vec<f64>,
    log_norm: f64,
    factor: Factor,
}

/// Exact parameters (and factorizations) of `p_t` at a fixed time.
pub struct MarginalAtT<'a> {
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
    gm: &'a GaussianMixture,
    sde: &'a VpSde,
    components: Vec<Component>,
    /// Dense `KK^T + gamma^2 I` (block diagonal over channels) on the dense path.
    dense_shape: Option<DMatrix<f64>>,
}

impl<'a> MarginalAtT<'a> {
    /// Component weights of the marginal (those of the prior).
    pub fn weights(&self) -> &[f64] {
        self.gm.weights()
    }

    /// Component means `alpha_t mu_i`.
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean_t.clone()).collect()
    }

    /// Dense component covariances `alpha_t^2 Sigma_i + (1 - alpha_t^2)(KK^T + gamma^2 I)`.
    ///
    /// Builds dense matrices even on the spectral path; use on small grids.
    pub fn covariances(&self) -> Vec<DMatrix<f64>> {
        let d = self.gm.dim();
        let shape = self
            .dense_shape
            .clone()
            .unwrap_or_else(|| block_dense_covariance(self.sde, d));
        let var = self.sde.schedule.noise_variance(self.t);
        self.gm
            .covs
            .iter()
            .map(|c| dense_cov(c, d) * (self.alpha * self.alpha) + &shape * var)
            .collect()
    }

    fn evaluate(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_len(self.gm.dim(), x.len())?;
        let fft = self.sde.kernel.fft();
        let n = self.sde.kernel.grid().len();
        let x_hat: Option<Vec<Complex64>> = match self.components.first().map(|c| &c.factor) {
            Some(Factor::Spectral { .. }) => Some(
                x.chunks(n).flat_map(|ch| fft.forward_real(ch)).collect(),
            ),
            _ => None,
        };
        let mut logits = Vec::with_capacity(self.components.len());
        let mut solves = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            match &comp.factor {
                Factor::Dense { chol } => {
                    let diff = DVector::from_iterator(
                        x.len(),
                        comp.mean_t.iter().zip(x).map(|(m, v)| m - v),
                    );
                    let sol = chol.solve(&diff);
                    logits.push(comp.log_weight + comp.log_norm - 0.5 * diff.dot(&sol));
                    solves.push(sol.iter().cloned().collect());
                }
                Factor::Spectral {
                    variances,
                    mean_hat,
                } => {
                    let x_hat = x_hat.as_ref().expect("spectral path");
                    let mut maha = 0.0;
                    let mut sol_hat = Vec::with_capacity(x.len());
                    for (k, (m, v)) in mean_hat.iter().zip(x_hat).enumerate() {
                        let d = m - v;
                        let c = variances[k % n];
                        maha += d.norm_sqr() / c;
                        sol_hat.push(d / c);
                    }
                    maha /= n as f64;
                    logits.push(comp.log_weight + comp.log_norm - 0.5 * maha);
                    let sol: Vec<f64> = sol_hat
                        .chunks(n)
                        .flat_map(|ch| fft.inverse_real(ch.to_vec()))
                        .collect();
                    solves.push(sol);
                }
            }
        }
        Ok((softmax(&logits), solves))
    }

    /// `log p_t(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len(self.gm.dim(), x.len())?;
        let fft = self.sde.kernel.fft();
        let n = self.sde.kernel.grid().len();
        let mut logits = Vec::new();
        for comp in &self.components {
            let maha = match &comp.factor {
                Factor::Dense { chol } => {
                    let diff = DVector::from_iterator(
                        x.len(),
                        comp.mean_t.iter().zip(x).map(|(m, v)| m - v),
                    );
                    diff.dot(&chol.solve(&diff))
                }
                Factor::Spectral { variances, .. } => {
                    let diff: Vec<f64> = comp.mean_t.iter().zip(x).map(|(m, v)| m - v).collect();
                    let mut acc = 0.0;
                    for ch in diff.chunks(n) {
                        for (k, d) in fft.forward_real(ch).iter().enumerate() {
                            acc += d.norm_sqr() / variances[k];
                        }
                    }
                    acc / n as f64
                }
            };
            logits.push(comp.log_weight + comp.log_norm - 0.5 * maha);
        }
        Ok(log_sum_exp(&logits))
    }

    /// `grad log p_t(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (resp, solves) = self.evaluate(x)?;
        Ok(weighted_sum(&resp, &solves))
    }

    /// `G_t G_t^T grad log p_t(x)`.
    pub fn ws(&self, x: &[f64]) -> Result<Vec<f64>> {
        let score = self.score(x)?;
        self.apply_ggt(&score)
    }

    fn apply_ggt(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.dense_shape {
            Some(shape) => {
                let out = shape * DVector::from_column_slice(v) * self.beta;
                Ok(out.iter().cloned().collect())
            }
            None => self.sde.apply_ggt(v, self.t),
        }
    }

    /// `E[x0 | x_t = x]`, from each component's Gaussian conditional
    /// `mu_i + alpha Sigma_i C_i^{-1}(x - alpha mu_i)`.
    pub fn posterior_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (resp, solves) = self.evaluate(x)?;
        let d = x.len();
        let mut out = vec![0.0; d];
        for (i, (r, sol)) in resp.iter().zip(&solves).enumerate() {
            if *r == 0.0 {
                continue;
            }
            let mu = &self.gm.means[i];
            // sol = C^{-1}(alpha mu - x)
            let cross: Vec<f64> = match &self.gm.covs[i] {
                ComponentCov::Scalar(v) => sol.iter().map(|s| v * s).collect(),
                ComponentCov::Full(m) => (m * DVector::from_column_slice(sol)).iter().cloned().collect(),
            };
            for k in 0..d {
                out[k] += r * (mu[k] - self.alpha * cross[k]);
            }
        }
        Ok(out)
    }

    /// Marginal flow-matching velocity from the Gaussian-path form with `x0`
    /// replaced by its posterior mean:
    /// `1/2 Sigma'_t Sigma_t^{-1} (x - alpha E[x0|x]) + F_t alpha E[x0|x]`.
    ///
    /// `Sigma'_t Sigma_t^{-1}` is the scalar `beta alpha^2 / (1 - alpha^2)`.
    pub fn fm_velocity(&self, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.posterior_mean(x)?;
        let var = self.sde.schedule.noise_variance(self.t);
        let rate = 0.5 * self.beta * self.alpha * self.alpha / var;
        let f = -0.5 * self.beta;
        Ok(x.iter()
            .zip(&e)
            .map(|(xv, ev)| rate * (xv - self.alpha * ev) + f * self.alpha * ev)
            .collect())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn weighted_sum(resp: &[f64], vecs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vecs[0].len()];
    for (r, v) in resp.iter().zip(vecs) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += r * x;
        }
    }
    out
}

fn block_dense_covariance(sde: &VpSde, dim: usize) -> DMatrix<f64> {
    let n = sde.kernel.grid().len();
    let block = sde.kernel.dense_covariance(sde.gamma);
    let mut m = DMatrix::zeros(dim, dim);
    for c in 0..dim / n {
        m.view_mut((c * n, c * n), (n, n)).copy_from(&block);
    }
    m
}

/// Exact oracle for a mixture prior under a given SDE.
pub struct Oracle {
    gm: GaussianMixture,
    sde: VpSde,
    channels: usize,
    dense_shape: Option<DMatrix<f64>>,
    mean_hats: Vec<Vec<Complex64>>,
}

impl Oracle {
    pub fn new(gm: GaussianMixture, sde: VpSde) -> Result<Self> {
        let grid = sde.kernel.grid();
        let channels = grid.channels_of(gm.dim())?;
        let (dense_shape, mean_hats) = if gm.is_spectral() {
            let fft = sde.kernel.fft();
            let hats = gm
                .means
                .iter()
                .map(|m| m.chunks(grid.len()).flat_map(|c| fft.forward_real(c)).collect())
                .collect();
            (None, hats)
        } else {
            if gm.dim() > MAX_DENSE_DIM {
                return Err(Error::invalid(
                    "mixture",
                    format!("dense path limited to dimension {MAX_DENSE_DIM}"),
                ));
            }
            (Some(block_dense_covariance(&sde, gm.dim())), Vec::new())
        };
        Ok(Self {
            gm,
            sde,
            channels,
            dense_shape,
            mean_hats,
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.gm
    }

    pub fn sde(&self) -> &VpSde {
        &self.sde
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Parameters and factorizations of `p_t`; `t` may be 0 when the prior is nondegenerate.
    pub fn marginal(&self, t: f64) -> Result<MarginalAtT<'_>> {
        let alpha = self.sde.alpha(t)?;
        let var = self.sde.schedule.noise_variance(t);
        let beta = self.sde.beta(t);
        let d = self.gm.dim();
        let n = self.sde.kernel.grid().len();
        let spectrum = self.sde.covariance_spectrum();
        let mut components = Vec::with_capacity(self.gm.weights.len());
        for (i, (w, mu)) in self.gm.weights.iter().zip(&self.gm.means).enumerate() {
            let mean_t: Vec<f64> = mu.iter().map(|m| alpha * m).collect();
            let (factor, log_det) = match (&self.gm.covs[i], &self.dense_shape) {
                (ComponentCov::Scalar(s2), None) => {
                    let variances: Vec<f64> = spectrum
                        .iter()
                        .map(|c| alpha * alpha * s2 + var * c)
                        .collect();
                    if variances.iter().any(|v| *v <= 0.0) {
                        return Err(Error::Singular {
                            kappa: condition_of(&variances),
                        });
                    }
                    let log_det = self.channels as f64 * variances.iter().map(|v| v.ln()).sum::<f64>();
                    let mean_hat = self.mean_hats[i].iter().map(|c| c * alpha).collect();
                    (
                        Factor::Spectral {
                            variances,
                            mean_hat,
                        },
                        log_det,
                    )
                }
                (cov, Some(shape)) => {
                    let c = dense_cov(cov, d) * (alpha * alpha) + shape * var;
                    let chol = Cholesky::new(c.clone()).ok_or_else(|| Error::Singular {
                        kappa: condition_of(c.symmetric_eigen().eigenvalues.as_slice()),
                    })?;
                    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    (Factor::Dense { chol }, log_det)
                }
                (ComponentCov::Full(_), None) => unreachable!("full covariances force the dense path"),
            };
            let _ = n;
            components.push(Component {
                log_weight: if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY },
                mean_t,
                log_norm: -0.5 * log_det - 0.5 * d as f64 * (2.0 * PI).ln(),
                factor,
            });
        }
        Ok(MarginalAtT {
            t,
            alpha,
            beta,
            gm: &self.gm,
            sde: &self.sde,
            components,
            dense_shape: self.dense_shape.clone(),
        })
    }

    fn require_positive_time(t: f64) -> Result<()> {
        if t > 0.0 && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange(t))
        }
    }

    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Self::require_positive_time(t)?;
        self.marginal(t)?.score(x)
    }

    pub fn ws(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Self::require_positive_time(t)?;
        self.marginal(t)?.ws(x)
    }

    pub fn posterior_mean(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Self::require_positive_time(t)?;
        self.marginal(t)?.posterior_mean(x)
    }

    pub fn fm_velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Self::require_positive_time(t)?;
        self.marginal(t)?.fm_velocity(x)
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.marginal(t)?.log_density(x)
    }
}

pub fn marginal_params(gm: &GaussianMixture, sde: &VpSde, t: f64) -> Result<MarginalParams> {
    let oracle = Oracle::new(gm.clone(), sde.clone())?;
    let m = oracle.marginal(t)?;
    Ok(MarginalParams {
        weights: m.weights().to_vec(),
        means: m.means(),
        covariances: m.covariances(),
    })
}

/// Owned, dense snapshot of the marginal mixture at one time.
#[derive(Debug, Clone)]
pub struct MarginalParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

pub fn exact_score(gm: &GaussianMixture, sde: &VpSde, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    Oracle::new(gm.clone(), sde.clone())?.score(x_t, t)
}

pub fn exact_ws(gm: &GaussianMixture, sde: &VpSde, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    Oracle::new(gm.clone(), sde.clone())?.ws(x_t, t)
}

pub fn posterior_mean(gm: &GaussianMixture, sde: &VpSde, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    Oracle::new(gm.clone(), sde.clone())?.posterior_mean(x_t, t)
}

pub fn fm_velocity(gm: &GaussianMixture, sde: &VpSde, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    Oracle::new(gm.clone(), sde.clone())?.fm_velocity(x_t, t)
}

/// Conditional flow-matching velocity written with the whitened target:
/// `u(x_t | x0) = F_t x_t - 1/2 G_t G_t^T grad log p(x_t | x0)`.
pub fn fm_conditional_velocity(sde: &VpSde, x0: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    let ws = sde.ws_conditional_target(x0, x_t, t)?;
    let f = sde.drift(t);
    Ok(x_t.iter().zip(&ws).map(|(x, w)| f * x - 0.5 * w).collect())
}

/// Conditional flow-matching velocity of the Gaussian path
/// `N(mu_t, Sigma_t)`: `1/2 Sigma'_t Sigma_t^{-1} (x_t - mu_t) + mu'_t`, with
/// `Sigma'_t = 2 F_t Sigma_t + G_t G_t^T` and `mu'_t = F_t mu_t`, evaluated with
/// dense matrices and a linear solve. Single-channel grids of at most
/// `MAX_DENSE_DIM` values.
pub fn fm_conditional_velocity_gaussian_path(
    sde: &VpSde,
    x0: &[f64],
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_len(x0.len(), x_t.len())?;
    check_len(sde.kernel.grid().len(), x0.len())?;
    if x0.len() > MAX_DENSE_DIM {
        return Err(Error::invalid("dimension", "dense path only"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::TimeOutOfRange(t));
    }
    let alpha = sde.schedule.alpha(t);
    let f = sde.drift(t);
    let shape = sde.kernel.dense_covariance(sde.gamma);
    let sigma = &shape * sde.schedule.noise_variance(t);
    let ggt = &shape * sde.beta(t);
    let sigma_dot = &sigma * (2.0 * f) + ggt;
    let mu = DVector::from_column_slice(x0) * alpha;
    let resid = DVector::from_column_slice(x_t) - &mu;
    let solved = sigma
        .clone()
        .lu()
        .solve(&resid)
        .ok_or(Error::Singular { kappa: f64::INFINITY })?;
    let u = sigma_dot * solved * 0.5 + mu * f;
    Ok(u.iter().cloned().collect())
}

/// Regular 2D evaluation grid over `[-extent, extent]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldGridSpec {
    pub extent: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldRow {
    pub x: [f64; 2],
    pub score: [f64; 2],
    pub ws: [f64; 2],
}

pub const FIELD_CSV_HEADER: &str = "x1,x2,s1,s2,w1,w2";

pub fn vector_field_grid(
    gm: &GaussianMixture,
    sde: &VpSde,
    spec: FieldGridSpec,
    t: f64,
) -> Result<Vec<FieldRow>> {
    if gm.dim() != 2 {
        return Err(Error::invalid("mixture", format!("dimension {} is not 2", gm.dim())));
    }
    if spec.points < 2 {
        return Err(Error::invalid("points", "need at least 2 per axis"));
    }
    Oracle::require_positive_time(t)?;
    let oracle = Oracle::new(gm.clone(), sde.clone())?;
    let marginal = oracle.marginal(t)?;
    let step = 2.0 * spec.extent / (spec.points - 1) as f64;
    let mut rows = Vec::with_capacity(spec.points * spec.points);
    for i in 0..spec.points {
        for j in 0..spec.points {
            let x = [-spec.extent + j as f64 * step, -spec.extent + i as f64 * step];
            let s = marginal.score(&x)?;
            let w = marginal.ws(&x)?;
            rows.push(FieldRow {
                x,
                score: [s[0], s[1]],
                ws: [w[0], w[1]],
            });
        }
    }
    Ok(rows)
}

pub fn write_field_csv(rows: &[FieldRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{FIELD_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.x[0], r.x[1], r.score[0], r.score[1], r.ws[0], r.ws[1]
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Two-dimensional single-Gaussian setup whose prior covariance is
/// proportional to `KK^T`, with `kappa(KK^T) = kappa`.
///
/// `K` is the 2-point circulant with spectrum `[1, kappa^{-1/2}]`, so the
/// principal axes are the diagonals.
pub fn whitening_testbed(kappa: f64, prior_scale: f64) -> Result<(GaussianMixture, VpSde)> {
    use crate::covariance::{CirculantOperator, Grid};
    use crate::sde::BetaSchedule;
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(Error::invalid("kappa", format!("{kappa}")));
    }
    let op = CirculantOperator::from_eigenvalues(Grid::line(2)?, vec![1.0, kappa.powf(-0.5)])?;
    let sde = VpSde::new(BetaSchedule::default(), op);
    let cov = sde.kernel.dense_covariance(0.0) * prior_scale;
    let gm = GaussianMixture::single(vec![0.6, -0.4], ComponentCov::Full(cov))?;
    Ok((gm, sde))
}

/// Angle in radians between two 2-vectors; 0 when either is zero.
pub fn angle_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let cross = a[0] * b[1] - a[1] * b[0];
    let dot = a[0] * b[0] + a[1] * b[1];
    cross.abs().atan2(dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{CirculantOperator, Grid};
    use crate::sde::BetaSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sde_line(n: usize, std: f64) -> VpSde {
        VpSde::new(
            BetaSchedule::default(),
            CirculantOperator::gaussian(std, Grid::line(n).unwrap()).unwrap(),
        )
    }

    fn two_component_2d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.35, 0.65],
            vec![vec![1.0, 0.5], vec![-0.8, -0.2]],
            vec![
                ComponentCov::Full(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2])),
                ComponentCov::Full(DMatrix::from_row_slice(2, 2, &[0.15, -0.05, -0.05, 0.25])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![ComponentCov::Scalar(1.0); 2]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianMixture::single(vec![0.0, 0.0], ComponentCov::Full(asym)).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianMixture::single(vec![0.0, 0.0], ComponentCov::Full(indef)).is_err());
        let big = DMatrix::identity(17, 17);
        assert!(GaussianMixture::single(vec![0.0; 17], ComponentCov::Full(big)).is_err());
    }

    #[test]
    fn marginal_at_zero_is_prior() {
        let gm = two_component_2d();
        let p = marginal_params(&gm, &sde_line(2, 1.0), 0.0).unwrap();
        assert_eq!(p.weights, gm.weights());
        for (m, mu) in p.means.iter().zip(gm.means()) {
            assert_eq!(m, mu);
        }
        for (c, cov) in p.covariances.iter().zip(gm.covariances()) {
            assert!((c - dense_cov(cov, 2)).amax() < 1e-15);
        }
    }

    #[test]
    fn delta_prior_marginal_is_transition_kernel() {
        let sde = sde_line(4, 1.0);
        let gm = GaussianMixture::delta(vec![0.0; 4]).unwrap();
        let t = 0.4;
        let p = marginal_params(&gm, &sde, t).unwrap();
        let want = sde.kernel.dense_covariance(0.0) * sde.schedule.noise_variance(t);
        assert!((&p.covariances[0] - want).amax() < 1e-14);
        assert!(p.means[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn marginal_covariance_matches_forward_samples() {
        let gm = two_component_2d();
        let sde = sde_line(2, 1.0).with_gamma(0.2);
        let t = 0.5;
        let p = marginal_params(&gm, &sde, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = sde.noise_spec(false);
        // per-component sample covariance from forward draws
        let n = 200_000;
        for (i, cov) in p.covariances.iter().enumerate() {
            let single = GaussianMixture::single(gm.means()[i].clone(), gm.covariances()[i].clone()).unwrap();
            let mut s = DMatrix::<f64>::zeros(2, 2);
            let mut m = DVector::<f64>::zeros(2);
            for _ in 0..n {
                let x0 = single.sample(&mut rng);
                let (xt, _) = sde.forward_sample_with(&x0, t, &spec, &mut rng).unwrap();
                let v = DVector::from_vec(xt);
                m += &v;
                s += &v * v.transpose();
            }
            let m = m / n as f64;
            let emp = s / n as f64 - &m * m.transpose();
            for a in 0..2 {
                for b in 0..2 {
                    let se = ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / n as f64).sqrt();
                    assert!((emp[(a, b)] - cov[(a, b)]).abs() < 4.0 * se, "{emp} vs {cov}");
                }
                let se_m = (cov[(a, a)] / n as f64).sqrt();
                assert!((m[a] - p.means[i][a]).abs() < 4.0 * se_m);
            }
        }
    }

    #[test]
    fn isotropic_single_gaussian_score() {
        let sde = sde_line(3, 0.0);
        let s2 = 0.7;
        let t = 0.3;
        let gm = GaussianMixture::single(vec![0.0; 3], ComponentCov::Scalar(s2)).unwrap();
        let a = sde.schedule.alpha(t);
        let total = a * a * s2 + sde.schedule.noise_variance(t);
        let x = [0.4, -1.2, 2.0];
        let s = exact_score(&gm, &sde, &x, t).unwrap();
        for (sv, xv) in s.iter().zip(&x) {
            assert!((sv + xv / total).abs() < 1e-13);
        }
        // the same prior on the dense path
        let dense = GaussianMixture::single(vec![0.0; 3], ComponentCov::Full(DMatrix::identity(3, 3) * s2)).unwrap();
        let sd = exact_score(&dense, &sde, &x, t).unwrap();
        for (a, b) in s.iter().zip(&sd) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn symmetric_mixture_midpoint_has_zero_score() {
        let sde = sde_line(2, 1.0);
        let gm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 1.0], vec![-1.0, -1.0]],
            vec![ComponentCov::Scalar(0.2); 2],
        )
        .unwrap();
        let s = exact_score(&gm, &sde, &[0.0, 0.0], 0.4).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn score_matches_finite_differences() {
        let gm = two_component_2d();
        let (aniso, sde_a) = whitening_testbed(30.0, 0.5).unwrap();
        let h = 1e-4;
        for (gm, sde) in [(gm, sde_line(2, 1.2)), (aniso, sde_a)] {
            let oracle = Oracle::new(gm, sde).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for &t in &[0.05, 0.3, 0.7] {
                let m = oracle.marginal(t).unwrap();
                for _ in 0..20 {
                    let x: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let s = m.score(&x).unwrap();
                    let mut fd = vec![0.0; 2];
                    for k in 0..2 {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[k] += h;
                        xm[k] -= h;
                        fd[k] = (m.log_density(&xp).unwrap() - m.log_density(&xm).unwrap()) / (2.0 * h);
                    }
                    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let err = s.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(err <= 1e-5 * norm.max(1.0), "t={t} err={err} norm={norm}");
                }
            }
        }
    }

    #[test]
    fn delta_kernel_ws_is_beta_score() {
        let sde = sde_line(2, 0.0);
        let gm = two_component_2d();
        let x = [0.3, -0.7];
        let t = 0.45;
        let s = exact_score(&gm, &sde, &x, t).unwrap();
        let w = exact_ws(&gm, &sde, &x, t).unwrap();
        for (a, b) in s.iter().zip(&w) {
            assert!((a * sde.beta(t) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_prior_posterior_mean_is_the_point() {
        let sde = sde_line(4, 1.0);
        let mu = vec![0.2, -0.5, 1.5, 0.0];
        let gm = GaussianMixture::delta(mu.clone()).unwrap();
        for x in [[0.0; 4], [3.0, -1.0, 2.0, 5.0]] {
            let e = posterior_mean(&gm, &sde, &x, 0.6).unwrap();
            for (a, b) in e.iter().zip(&mu) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_approaches_observation_at_small_t() {
        let sde = sde_line(2, 1.0);
        let gm = two_component_2d();
        let x = [0.4, 0.9];
        let e = posterior_mean(&gm, &sde, &x, 1e-7).unwrap();
        for (a, b) in e.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn tweedie_identity_single_gaussian() {
        let sde = sde_line(4, 1.0).with_gamma(0.1);
        let cov = DMatrix::from_fn(4, 4, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()) * 0.4);
        let gm = GaussianMixture::single(vec![0.3, -0.2, 0.8, 0.1], ComponentCov::Full(cov)).unwrap();
        let oracle = Oracle::new(gm, sde.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &t in &[0.1, 0.5, 0.9] {
            let m = oracle.marginal(t).unwrap();
            let var = sde.schedule.noise_variance(t);
            for _ in 0..50 {
                let x: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let e = m.posterior_mean(&x).unwrap();
                let s = m.score(&x).unwrap();
                let sigma_s = sde.kernel.apply_covariance(&s, sde.gamma).unwrap();
                for k in 0..4 {
                    let resid = m.alpha * e[k] - x[k] - var * sigma_s[k];
                    assert!(resid.abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn whitened_field_points_at_the_mean() {
        let (gm, sde) = whitening_testbed(64.0, 0.5).unwrap();
        let t = 0.3;
        let oracle = Oracle::new(gm.clone(), sde).unwrap();
        let m = oracle.marginal(t).unwrap();
        let mean_t = &m.means()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let w = m.ws(&x).unwrap();
            let dir = [mean_t[0] - x[0], mean_t[1] - x[1]];
            assert!(angle_between([w[0], w[1]], dir) < 1e-8);
        }
    }

    #[test]
    fn vector_field_grid_shape_and_csv() {
        let (gm, sde) = whitening_testbed(10.0, 0.5).unwrap();
        let rows = vector_field_grid(&gm, &sde, FieldGridSpec { extent: 3.0, points: 21 }, 0.5).unwrap();
        assert_eq!(rows.len(), 441);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_field_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(FIELD_CSV_HEADER));
        assert_eq!(lines.count(), 441);
        let gm3 = GaussianMixture::single(vec![0.0; 3], ComponentCov::Scalar(1.0)).unwrap();
        assert!(vector_field_grid(&gm3, &sde_line(3, 0.0), FieldGridSpec { extent: 1.0, points: 3 }, 0.5).is_err());
    }

    #[test]
    fn isotropic_fields_are_parallel() {
        let sde = sde_line(2, 0.0);
        let gm = GaussianMixture::single(vec![0.5, 0.5], ComponentCov::Scalar(0.3)).unwrap();
        let rows = vector_field_grid(&gm, &sde, FieldGridSpec { extent: 2.0, points: 9 }, 0.4).unwrap();
        let b = sde.beta(0.4);
        for r in rows {
            assert!((r.ws[0] - b * r.score[0]).abs() < 1e-12);
            assert!((r.ws[1] - b * r.score[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn anisotropic_score_is_rotated_but_ws_is_not() {
        let (gm, sde) = whitening_testbed(10.0, 0.5).unwrap();
        let t = 0.5;
        let mean_t: Vec<f64> = gm.means()[0].iter().map(|v| v * sde.schedule.alpha(t)).collect();
        let rows = vector_field_grid(&gm, &sde, FieldGridSpec { extent: 3.0, points: 21 }, t).unwrap();
        let mut max_score = 0.0f64;
        let mut max_ws = 0.0f64;
        for r in rows {
            let dir = [mean_t[0] - r.x[0], mean_t[1] - r.x[1]];
            max_score = max_score.max(angle_between(r.score, dir));
            max_ws = max_ws.max(angle_between(r.ws, dir));
        }
        assert!(max_score > 10f64.to_radians());
        assert!(max_ws <= 1e-6);
    }

    #[test]
    fn spectral_path_handles_image_grids() {
        let grid = Grid::new(8, 8).unwrap();
        let sde = VpSde::new(BetaSchedule::default(), CirculantOperator::gaussian(1.0, grid).unwrap());
        let mu: Vec<f64> = (0..128).map(|i| (i as f64 * 0.1).sin()).collect();
        let gm = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![mu.clone(), mu.iter().map(|v| -v).collect()],
            vec![ComponentCov::Scalar(0.2), ComponentCov::Scalar(0.05)],
        )
        .unwrap();
        let oracle = Oracle::new(gm, sde.clone()).unwrap();
        let t = 0.35;
        let m = oracle.marginal(t).unwrap();
        let x: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).cos()).collect();
        let s = m.score(&x).unwrap();
        let e = m.posterior_mean(&x).unwrap();
        let var = sde.schedule.noise_variance(t);
        let cs = sde.kernel.apply_kkt(&s).unwrap();
        for k in 0..128 {
            assert!((m.alpha * e[k] - x[k] - var * cs[k]).abs() < 1e-9);
        }
        // finite differences of the spectral log-density
        let h = 1e-5;
        for k in [0usize, 17, 100] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (m.log_density(&xp).unwrap() - m.log_density(&xm).unwrap()) / (2.0 * h);
            assert!((fd - s[k]).abs() < 1e-5 * s[k].abs().max(1.0), "{fd} vs {}", s[k]);
        }
    }
}
