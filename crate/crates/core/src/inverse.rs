//! Linear imaging forward models on periodic grids, structured-noise
//! measurements, likelihood gradients, PSNR and baselines.
//!
//! Every operator is a Fourier multiplier `a(w)`: `A x = F^{-1}(a . F x)` and
//! `A^H y = F^{-1}(conj(a) . F y)`, applied channel by channel.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::covariance::{CirculantOperator, Grid, NoiseSpec};
use crate::error::{check_len, Error, Result};
use crate::fft::{signed_index, Fft2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdtMode {
    Transmission,
    Reflection,
}

impl std::str::FromStr for IdtMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transmission" => Ok(Self::Transmission),
            "reflection" => Ok(Self::Reflection),
            other => Err(Error::invalid("idt mode", format!("`{other}`"))),
        }
    }
}

/// Fourier support of the IDT masks, in cycles per pixel.
///
/// Transmission keeps two discs of radius `radius` centred at
/// `(k_lat, k_ax) = (+-offset, 0)`; with `radius == offset` their boundaries
/// pass through the origin and the low axial band around `k_lat = 0` (the
/// missing cone) is empty. Reflection adds two discs at `(0, +-reflect_offset)`
/// of radius `reflect_radius`, restoring the high axial end of the cone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdtParams {
    pub offset: f64,
    pub radius: f64,
    pub reflect_offset: f64,
    pub reflect_radius: f64,
    /// Width of the raised-cosine edge.
    pub rolloff: f64,
}

impl Default for IdtParams {
    fn default() -> Self {
        Self {
            offset: 0.35,
            radius: 0.35,
            reflect_offset: 0.5,
            reflect_radius: 0.2,
            rolloff: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatorKind {
    Identity,
    /// Centred horizontal box of `length` pixels, each weighted `1/length`.
    MotionBlur { length: usize },
    LensBlur { std: f64 },
    IdtMask { mode: IdtMode, params: IdtParams },
    /// Periodic 5-point Laplacian stencil.
    Laplacian,
}

#[derive(Debug, Clone)]
pub struct ForwardOperator {
    kind: OperatorKind,
    grid: Grid,
    multiplier: Vec<Complex64>,
    fft: Fft2,
}

impl ForwardOperator {
    pub fn new(kind: OperatorKind, grid: Grid) -> Result<Self> {
        let fft = Fft2::new(grid.height, grid.width);
        let multiplier = match kind {
            OperatorKind::Identity => vec![Complex64::new(1.0, 0.0); grid.len()],
            OperatorKind::MotionBlur { length } => {
                if length == 0 || length > grid.width {
                    return Err(Error::invalid("length", format!("{length} on width {}", grid.width)));
                }
                let mut k = vec![0.0; grid.len()];
                let start = -((length as i64 - 1) / 2);
                for d in start..start + length as i64 {
                    k[d.rem_euclid(grid.width as i64) as usize] += 1.0 / length as f64;
                }
                fft.forward_real(&k)
            }
            OperatorKind::LensBlur { std } => CirculantOperator::gaussian(std, grid)?
                .eigenvalues()
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect(),
            OperatorKind::IdtMask { mode, params } => idt_mask(mode, &params, grid)?
                .into_iter()
                .map(|v| Complex64::new(v, 0.0))
                .collect(),
            OperatorKind::Laplacian => {
                let mut m = Vec::with_capacity(grid.len());
                for i in 0..grid.height {
                    let cy = (2.0 * PI * i as f64 / grid.height as f64).cos();
                    for j in 0..grid.width {
                        let cx = (2.0 * PI * j as f64 / grid.width as f64).cos();
                        m.push(Complex64::new(2.0 * cy + 2.0 * cx - 4.0, 0.0));
                    }
                }
                m
            }
        };
        Ok(Self {
            kind,
            grid,
            multiplier,
            fft,
        })
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn multiplier(&self) -> &[Complex64] {
        &self.multiplier
    }

    fn apply_with(&self, x: &[f64], f: impl Fn(Complex64) -> Complex64) -> Result<Vec<f64>> {
        let n = self.grid.len();
        self.grid.channels_of(x.len())?;
        if matches!(self.kind, OperatorKind::Identity) {
            let c = f(Complex64::new(1.0, 0.0));
            if c.im == 0.0 {
                return Ok(x.iter().map(|v| v * c.re).collect());
            }
        }
        let mut out = Vec::with_capacity(x.len());
        for ch in x.chunks(n) {
            let mut buf = self.fft.forward_real(ch);
            for (b, m) in buf.iter_mut().zip(&self.multiplier) {
                *b *= f(*m);
            }
            out.extend(self.fft.inverse_real(buf));
        }
        Ok(out)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(x, |m| m)
    }

    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(y, |m| m.conj())
    }

    /// Frequencies where `|a| > threshold`.
    pub fn support(&self, threshold: f64) -> Vec<bool> {
        self.multiplier.iter().map(|m| m.norm() > threshold).collect()
    }

    /// `A^+ y`: divides by `a` on the support, zero elsewhere.
    pub fn pseudo_inverse(&self, y: &[f64], threshold: f64) -> Result<Vec<f64>> {
        self.apply_with(y, |m| {
            if m.norm() > threshold {
                m.inv()
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }
}

fn rolloff(d: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return if d >= 0.0 { 1.0 } else { 0.0 };
    }
    if d >= 0.5 * width {
        1.0
    } else if d <= -0.5 * width {
        0.0
    } else {
        0.5 * (1.0 + (PI * d / width).sin())
    }
}

fn idt_mask(mode: IdtMode, p: &IdtParams, grid: Grid) -> Result<Vec<f64>> {
    let finite = [p.offset, p.radius, p.reflect_offset, p.reflect_radius, p.rolloff];
    if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || p.radius == 0.0 {
        return Err(Error::invalid("idt params", format!("{p:?}")));
    }
    let mut discs = vec![(p.offset, 0.0, p.radius), (-p.offset, 0.0, p.radius)];
    if mode == IdtMode::Reflection {
        if p.reflect_radius == 0.0 {
            return Err(Error::invalid("reflect_radius", "must be positive"));
        }
        discs.push((0.0, p.reflect_offset, p.reflect_radius));
        discs.push((0.0, -p.reflect_offset, p.reflect_radius));
    }
    let mut m = Vec::with_capacity(grid.len());
    for i in 0..grid.height {
        let k_ax = signed_index(i, grid.height) as f64 / grid.height as f64;
        for j in 0..grid.width {
            let k_lat = signed_index(j, grid.width) as f64 / grid.width as f64;
            let v = discs
                .iter()
                .map(|&(cx, cy, r)| rolloff(r - (k_lat - cx).hypot(k_ax - cy), p.rolloff))
                .fold(0.0, f64::max);
            m.push(v);
        }
    }
    Ok(m)
}

pub fn build_idt_mask(mode: IdtMode, grid: Grid, params: IdtParams) -> Result<ForwardOperator> {
    ForwardOperator::new(OperatorKind::IdtMask { mode, params }, grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Sigma(f64),
    /// Target `||A x|| / sqrt(E ||noise||^2)`.
    Snr(f64),
}

#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub operator: ForwardOperator,
    pub y: Vec<f64>,
    pub noise_spec: NoiseSpec,
    /// Noise scale; `Sigma_y = sigma^2 (KK^T + gamma^2 I)`.
    pub sigma: f64,
    pub x_true: Option<Vec<f64>>,
}

impl InverseProblem {
    pub fn channels(&self) -> usize {
        self.y.len() / self.operator.grid().len()
    }

    /// `y - A x`.
    pub fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.y.len(), x.len())?;
        let ax = self.operator.apply(x)?;
        Ok(self.y.iter().zip(&ax).map(|(a, b)| a - b).collect())
    }

    fn noise_operator(&self) -> Result<CirculantOperator> {
        self.noise_spec.operator(self.operator.grid())
    }
}

/// Simulates `y = A x_true + sigma (K z1 + gamma z2)`.
pub fn make_measurement(
    x_true: &[f64],
    operator: ForwardOperator,
    noise_spec: NoiseSpec,
    level: NoiseLevel,
    seed: u64,
) -> Result<InverseProblem> {
    let grid = operator.grid();
    let channels = grid.channels_of(x_true.len())?;
    let noise_op = noise_spec.operator(grid)?;
    let ax = operator.apply(x_true)?;
    let sigma = match level {
        NoiseLevel::Sigma(s) if s >= 0.0 && s.is_finite() => s,
        NoiseLevel::Snr(snr) if snr > 0.0 && snr.is_finite() => {
            let trace: f64 = noise_op.covariance_spectrum(noise_spec.gamma).iter().sum();
            norm(&ax) / (snr * (channels as f64 * trace).sqrt())
        }
        other => return Err(Error::invalid("noise level", format!("{other:?}"))),
    };
    let noise = noise_op.sample_noise(&noise_spec, channels, seed)?;
    let y = ax.iter().zip(&noise).map(|(a, n)| a + sigma * n).collect();
    Ok(InverseProblem {
        operator,
        y,
        noise_spec,
        sigma,
        x_true: Some(x_true.to_vec()),
    })
}

/// `A^H (y - A x)`.
pub fn likelihood_gradient(prob: &InverseProblem, x: &[f64]) -> Result<Vec<f64>> {
    let r = prob.residual(x)?;
    prob.operator.adjoint(&r)
}

/// `Sigma_y^{-1} A^H (y - A x)` with eigenvalues of `Sigma_y` clamped at
/// `EIGEN_FLOOR` times the largest. Diagnostic.
pub fn whitened_likelihood_gradient(prob: &InverseProblem, x: &[f64]) -> Result<Vec<f64>> {
    let g = likelihood_gradient(prob, x)?;
    if prob.sigma <= 0.0 {
        return Err(Error::invalid("sigma", "noiseless problem has no finite precision"));
    }
    let op = prob.noise_operator()?;
    let inv = op.apply_clamped_inverse(&g, prob.noise_spec.gamma)?;
    let s2 = prob.sigma * prob.sigma;
    Ok(inv.into_iter().map(|v| v / s2).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    /// `20 log10(1 / MSE)`.
    pub paper: f64,
    /// `10 log10(1 / MSE)`.
    pub standard: f64,
}

pub fn psnr(x_hat: &[f64], x_true: &[f64]) -> Result<Psnr> {
    check_len(x_true.len(), x_hat.len())?;
    if x_true.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mse = x_hat
        .iter()
        .zip(x_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x_true.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            paper: f64::INFINITY,
            standard: f64::INFINITY,
        });
    }
    Ok(Psnr {
        paper: -20.0 * mse.log10(),
        standard: -10.0 * mse.log10(),
    })
}

/// `argmin ||y - A x||^2 + weight ||x||^2`, per frequency
/// `conj(a) y_hat / (|a|^2 + weight)`.
pub fn tikhonov_baseline(prob: &InverseProblem, weight: f64) -> Result<Vec<f64>> {
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::invalid("weight", format!("{weight}")));
    }
    prob.operator
        .apply_with(&prob.y, |m| m.conj() / (m.norm_sqr() + weight))
}

/// Tikhonov over a weight grid, keeping the best PSNR against `x_true`.
pub fn tikhonov_tuned(prob: &InverseProblem, weights: &[f64]) -> Result<(f64, Psnr, Vec<f64>)> {
    let truth = prob
        .x_true
        .as_ref()
        .ok_or_else(|| Error::invalid("x_true", "needed for tuning"))?;
    let mut best: Option<(f64, Psnr, Vec<f64>)> = None;
    for &w in weights {
        let x = tikhonov_baseline(prob, w)?;
        let p = psnr(&x, truth)?;
        if best.as_ref().is_none_or(|b| p.standard > b.1.standard) {
            best = Some((w, p, x));
        }
    }
    best.ok_or_else(|| Error::invalid("weights", "empty grid"))
}

/// Logarithmically spaced grid with `n` points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One row of a lambda sweep. `psnr` is `None` when the run failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub psnr: Option<Psnr>,
    pub error: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str = "lambda,psnr_paper,psnr_std,best,error";

#[derive(Debug, Clone)]
pub struct LineSearch {
    pub best_lambda: f64,
    pub best_psnr: Psnr,
    pub best_reconstruction: Vec<f64>,
    /// Sorted by lambda.
    pub table: Vec<SweepRow>,
}

impl LineSearch {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{SWEEP_CSV_HEADER}")?;
        for row in &self.table {
            let (p, s) = row
                .psnr
                .map(|p| (p.paper.to_string(), p.standard.to_string()))
                .unwrap_or_default();
            let best = u8::from(row.lambda == self.best_lambda && row.psnr.is_some());
            let err = row.error.as_deref().unwrap_or("").replace(',', ";");
            writeln!(f, "{},{p},{s},{best},{err}", row.lambda)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Picks the best row: highest PSNR, ties toward the smaller lambda.
pub(crate) fn select_best(rows: &[(f64, Result<(Psnr, Vec<f64>)>)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (lambda, r)) in rows.iter().enumerate() {
        let Ok((p, _)) = r else { continue };
        match best {
            None => best = Some(i),
            Some(b) => {
                let (bl, br) = &rows[b];
                let bp = br.as_ref().map(|(p, _)| p.standard).unwrap_or(f64::NEG_INFINITY);
                if p.standard > bp || (p.standard == bp && lambda < bl) {
                    best = Some(i);
                }
            }
        }
    }
    best
}
