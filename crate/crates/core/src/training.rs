//! A small fully connected network `n(x_t, t)` trained on the whitened-score
//! target, with hand-written reverse-mode gradients and Adam.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::container::{Record, MODEL_MAGIC, OPTIMIZER_MAGIC};
use crate::covariance::{CirculantOperator, Grid, NoiseSpec};
use crate::error::{check_len, Error, Result};
use crate::oracle::{GaussianMixture, Oracle};
use crate::samplers::{FieldKind, WsField};
use crate::sde::{BetaSchedule, VpSde};

pub const EMBED_FREQUENCIES: usize = 8;
pub const EMBED_DIM: usize = 2 * EMBED_FREQUENCIES;
/// Smallest training time.
pub const T_MIN: f64 = 1e-5;
/// Times above this are left out of the consistency term.
pub const CONSISTENCY_T_MAX: f64 = 1.0 - 1e-6;

/// `(sin(f_k t), cos(f_k t))` with `f_k = 100^(k/7)`.
pub fn time_embedding(t: f64) -> [f64; EMBED_DIM] {
    let mut e = [0.0; EMBED_DIM];
    for k in 0..EMBED_FREQUENCIES {
        let f = 100f64.powf(k as f64 / (EMBED_FREQUENCIES - 1) as f64);
        let (s, c) = (f * t).sin_cos();
        e[2 * k] = s;
        e[2 * k + 1] = c;
    }
    e
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// MLP on `[x, embed(t)]` with SiLU hidden layers and a linear head scaled
/// by `c_out(t) = beta_t / sqrt(1 - alpha_t^2)`, the size of the
/// whitened-score target per unit of noise.
///
/// Parameters are stored flat: for each layer, the weight matrix row-major
/// (`out x in`) and then the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    widths: Vec<usize>,
    params: Vec<f64>,
    schedule: BetaSchedule,
}

struct Cache {
    /// Input to every layer, starting with `[x, embed(t)]`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    scale: f64,
}

impl MlpModel {
    /// `hidden` lists hidden widths; input and output sizes follow from `dim`.
    pub fn new(dim: usize, hidden: &[usize], schedule: BetaSchedule, seed: u64) -> Result<Self> {
        if dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("widths", "must be positive"));
        }
        let mut widths = vec![dim + EMBED_DIM];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let layers = widths.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let std = (1.0 / fan_in as f64).sqrt() * if l + 1 == layers { 0.1 } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                params.push(std * rng.sample::<f64, _>(StandardNormal));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            widths,
            params,
            schedule,
        })
    }

    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>, schedule: BetaSchedule) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("widths", format!("{widths:?}")));
        }
        if widths[0] != widths[widths.len() - 1] + EMBED_DIM {
            return Err(Error::invalid("widths", "input must be output plus the time embedding"));
        }
        check_len(param_count(&widths), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("params", "non-finite"));
        }
        Ok(Self {
            widths,
            params,
            schedule,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn schedule(&self) -> BetaSchedule {
        self.schedule
    }

    pub fn output_scale(&self, t: f64) -> f64 {
        self.schedule.beta(t) / self.schedule.noise_variance(t).sqrt()
    }

    fn forward_cached(&self, x: &[f64], t: f64) -> (Vec<f64>, Cache) {
        let mut h: Vec<f64> = x.to_vec();
        h.extend_from_slice(&time_embedding(t));
        let layers = self.widths.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let z: Vec<f64> = (0..n_out)
                .map(|i| {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    b[i] + row.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            inputs.push(h);
            if l + 1 < layers {
                h = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
            } else {
                h = z;
            }
        }
        let scale = self.output_scale(t);
        let out = h.iter().map(|v| scale * v).collect();
        (out, Cache { inputs, pre, scale })
    }

    /// `n(x, t)`.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(self.forward_cached(x, t).0)
    }

    /// Adds `d(grad_out . n) / d params` into `grads`.
    fn backward(&self, cache: &Cache, grad_out: &[f64], grads: &mut [f64]) {
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut delta: Vec<f64> = grad_out.iter().map(|g| g * cache.scale).collect();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &cache.inputs[l];
            for i in 0..n_out {
                let d = delta[i];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grads[off + i * n_in..off + (i + 1) * n_in];
                for (gv, xv) in g.iter_mut().zip(input) {
                    *gv += d * xv;
                }
                grads[off + n_in * n_out + i] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for i in 0..n_out {
                let d = delta[i];
                for (p, wv) in prev.iter_mut().zip(&w[i * n_in..(i + 1) * n_in]) {
                    *p += d * wv;
                }
            }
            for (p, z) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                *p *= silu_grad(*z);
            }
            delta = prev;
        }
    }

    pub fn to_record(&self) -> Record {
        Record {
            magic: MODEL_MAGIC,
            dims: self.widths.iter().map(|&w| w as u64).collect(),
            header: Vec::new(),
            data: self.params.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_record().write(path)
    }

    /// Reads a checkpoint; the file carries widths and parameters, the
    /// schedule comes from the caller.
    pub fn read(path: impl AsRef<Path>, schedule: BetaSchedule) -> Result<Self> {
        let rec = Record::read(path, MODEL_MAGIC, 0, None)?;
        let widths = rec.dims.iter().map(|&d| d as usize).collect();
        Self::from_parts(widths, rec.data, schedule)
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl WsField for MlpModel {
    fn ws(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward(x, t)
    }

    fn kind(&self) -> FieldKind {
        FieldKind::Model
    }
}

/// Training examples `(x0, t, x_t)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub x0: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub x_t: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("batch", "empty"));
        }
        check_len(self.len(), self.x0.len())?;
        check_len(self.len(), self.x_t.len())?;
        for ((x0, xt), &t) in self.x0.iter().zip(&self.x_t).zip(&self.t) {
            check_len(dim, x0.len())?;
            check_len(dim, xt.len())?;
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::TimeOutOfRange(t));
            }
        }
        Ok(())
    }
}

const CHUNK: usize = 16;

/// Mean over the batch of `w_i ||n(x_t, t) - target_i||^2`, with its
/// gradient. Chunks are reduced in a fixed order, so results do not depend on
/// the thread count.
fn regression_loss(
    model: &MlpModel,
    batch: &Batch,
    per_example: impl Fn(usize) -> Option<(Vec<f64>, f64)> + Sync,
) -> (f64, Vec<f64>) {
    let n = batch.len();
    let p = model.params.len();
    let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut loss = 0.0;
            let mut grads = vec![0.0; p];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let Some((target, weight)) = per_example(i) else { continue };
                let (out, cache) = model.forward_cached(&batch.x_t[i], batch.t[i]);
                let diff: Vec<f64> = out.iter().zip(&target).map(|(a, b)| a - b).collect();
                loss += weight * diff.iter().map(|d| d * d).sum::<f64>();
                let g: Vec<f64> = diff.iter().map(|d| 2.0 * weight * d).collect();
                model.backward(&cache, &g, &mut grads);
            }
            (loss, grads)
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = vec![0.0; p];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    grads.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grads)
}

/// Denoising whitened-score loss `mean ||n(x_t, t) - G G^T grad log p(x_t | x0)||^2`.
///
/// The target comes from the schedule alone; no covariance operator is
/// involved.
pub fn ws_loss(model: &MlpModel, batch: &Batch, schedule: &BetaSchedule) -> Result<(f64, Vec<f64>)> {
    batch.validate(model.dim())?;
    let targets: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| schedule.ws_target(&batch.x0[i], &batch.x_t[i], batch.t[i]))
        .collect::<Result<_>>()?;
    Ok(regression_loss(model, batch, |i| Some((targets[i].clone(), 1.0))))
}

/// Forward-consistency loss
/// `mean ||x0 - (beta x_t + (1 - alpha^2) n(x_t, t)) / (beta alpha)||^2`,
/// skipping `t > CONSISTENCY_T_MAX`.
///
/// Written as a weighted regression: the residual equals
/// `c (n* - n)` with `c = (1 - alpha^2) / (beta alpha)` and
/// `n* = (beta alpha x0 - beta x_t) / (1 - alpha^2)`.
pub fn consistency_loss(model: &MlpModel, batch: &Batch, schedule: &BetaSchedule) -> Result<(f64, Vec<f64>)> {
    batch.validate(model.dim())?;
    Ok(regression_loss(model, batch, |i| {
        let t = batch.t[i];
        if t > CONSISTENCY_T_MAX {
            return None;
        }
        let a = schedule.alpha(t);
        let b = schedule.beta(t);
        let var = schedule.noise_variance(t);
        let c = var / (b * a);
        let target = batch.x0[i]
            .iter()
            .zip(&batch.x_t[i])
            .map(|(x0, xt)| (b * a * x0 - b * xt) / var)
            .collect();
        Some((target, c * c))
    }))
}

/// Consistency loss evaluated literally, for checking the regression form.
pub fn consistency_loss_direct(model: &MlpModel, batch: &Batch, schedule: &BetaSchedule) -> Result<f64> {
    batch.validate(model.dim())?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let t = batch.t[i];
        if t > CONSISTENCY_T_MAX {
            continue;
        }
        let a = schedule.alpha(t);
        let b = schedule.beta(t);
        let var = schedule.noise_variance(t);
        let n = model.forward(&batch.x_t[i], t)?;
        for k in 0..n.len() {
            let recon = (b * batch.x_t[i][k] + var * n[k]) / (b * a);
            total += (batch.x0[i][k] - recon).powi(2);
        }
    }
    Ok(total / batch.len() as f64)
}

/// Conventional denoising score matching against
/// `grad log p(x_t | x0) = (alpha x0 - x_t) / ((1 - alpha^2)(1 + gamma^2))`;
/// only defined for a delta kernel.
pub fn dsm_baseline_loss(model: &MlpModel, batch: &Batch, sde: &VpSde) -> Result<(f64, Vec<f64>)> {
    if !sde.kernel.is_delta() {
        return Err(Error::NonDeltaKernel {
            kappa: sde.kernel.condition_number(),
        });
    }
    batch.validate(model.dim())?;
    let shape = 1.0 + sde.gamma * sde.gamma;
    let targets: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| {
            let t = batch.t[i];
            let a = sde.schedule.alpha(t);
            let var = sde.schedule.noise_variance(t) * shape;
            batch.x0[i]
                .iter()
                .zip(&batch.x_t[i])
                .map(|(x0, xt)| (a * x0 - xt) / var)
                .collect()
        })
        .collect();
    Ok(regression_loss(model, batch, |i| Some((targets[i].clone(), 1.0))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrDecay {
    Constant,
    /// Linear decay to zero at `total` steps.
    Linear { total: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub decay: LrDecay,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: usize, lr: f64, decay: LrDecay) -> Self {
        Self {
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
            lr,
            decay,
        }
    }

    pub fn current_lr(&self) -> f64 {
        match self.decay {
            LrDecay::Constant => self.lr,
            LrDecay::Linear { total } => self.lr * (1.0 - self.step as f64 / total.max(1) as f64).max(0.0),
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        let lr = self.current_lr();
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }

    /// Header: step, learning rate, decay horizon (0 for constant).
    pub fn to_record(&self) -> Record {
        let total = match self.decay {
            LrDecay::Constant => 0.0,
            LrDecay::Linear { total } => total as f64,
        };
        let mut data = self.m.clone();
        data.extend_from_slice(&self.v);
        Record {
            magic: OPTIMIZER_MAGIC,
            dims: vec![2, self.m.len() as u64],
            header: vec![self.step as f64, self.lr, total],
            data,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_record().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let rec = Record::read(path, OPTIMIZER_MAGIC, 3, None)?;
        let p = rec.data.len() / 2;
        let total = rec.header[2] as usize;
        Ok(Self {
            m: rec.data[..p].to_vec(),
            v: rec.data[p..].to_vec(),
            step: rec.header[0] as u64,
            lr: rec.header[1],
            decay: if total == 0 {
                LrDecay::Constant
            } else {
                LrDecay::Linear { total }
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Per-example kernel std drawn uniformly from this interval.
    pub kernel_std_range: (f64, f64),
    /// Per-example `gamma^2` drawn uniformly from this interval.
    pub gamma_sq_range: (f64, f64),
    pub grayscale_prob: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub consistency_weight: f64,
    pub lr: f64,
    pub decay: LrDecay,
    pub grid: Grid,
}

impl TrainConfig {
    pub fn toy(grid: Grid) -> Self {
        Self {
            kernel_std_range: (0.1, 3.0),
            gamma_sq_range: (0.0, 1.0),
            grayscale_prob: 0.5,
            batch_size: 128,
            steps: 20_000,
            seed: 0,
            consistency_weight: 1.0,
            lr: 1e-3,
            decay: LrDecay::Constant,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.kernel_std_range;
        if !(a >= 0.0 && a <= b && b.is_finite()) {
            return Err(Error::invalid("kernel_std_range", format!("{a}..{b}")));
        }
        let (a, b) = self.gamma_sq_range;
        if !(a >= 0.0 && a <= b && b.is_finite()) {
            return Err(Error::invalid("gamma_sq_range", format!("{a}..{b}")));
        }
        if !(0.0..=1.0).contains(&self.grayscale_prob) {
            return Err(Error::invalid("grayscale_prob", format!("{}", self.grayscale_prob)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.consistency_weight >= 0.0 && self.consistency_weight.is_finite()) {
            return Err(Error::invalid("consistency_weight", format!("{}", self.consistency_weight)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{}", self.lr)));
        }
        Ok(())
    }
}

/// RNG for training step `step`; independent of every other step, which
/// makes resumed runs identical to uninterrupted ones.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..b)
    }
}

/// Draws a batch with a fresh noise spec (kernel std, `gamma`, grayscale)
/// for every example.
pub fn sample_batch<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    schedule: &BetaSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    let channels = cfg.grid.channels_of(gm.dim())?;
    let fixed_kernel = if cfg.kernel_std_range.0 == cfg.kernel_std_range.1 {
        Some(CirculantOperator::gaussian(cfg.kernel_std_range.0, cfg.grid)?)
    } else {
        None
    };
    let mut batch = Batch::default();
    for _ in 0..cfg.batch_size {
        let x0 = gm.sample(rng);
        let t = rng.random_range(T_MIN..=1.0);
        let std = uniform(rng, cfg.kernel_std_range);
        let gamma = uniform(rng, cfg.gamma_sq_range).sqrt();
        let grayscale = rng.random_bool(cfg.grayscale_prob);
        let spec = NoiseSpec {
            kernel_std: std,
            grayscale,
            gamma,
        };
        let noise = match &fixed_kernel {
            Some(k) => k.sample_noise_with(&spec, channels, rng)?,
            None => CirculantOperator::gaussian(std, cfg.grid)?.sample_noise_with(&spec, channels, rng)?,
        };
        let a = schedule.alpha(t);
        let s = schedule.noise_variance(t).sqrt();
        let x_t = x0.iter().zip(&noise).map(|(u, z)| a * u + s * z).collect();
        batch.x0.push(x0);
        batch.t.push(t);
        batch.x_t.push(x_t);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub ws_loss: f64,
    pub consistency_loss: f64,
}

impl LossRecord {
    pub fn total(&self, consistency_weight: f64) -> f64 {
        self.ws_loss + consistency_weight * self.consistency_loss
    }
}

pub fn write_loss_csv(curve: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,ws_loss,consistency_loss")?;
    for r in curve {
        writeln!(f, "{},{},{}", r.step, r.ws_loss, r.consistency_loss)?;
    }
    f.flush()?;
    Ok(())
}

/// Combined objective for one batch; the consistency term is skipped
/// entirely when its weight is zero.
pub fn total_loss(
    model: &MlpModel,
    batch: &Batch,
    schedule: &BetaSchedule,
    consistency_weight: f64,
) -> Result<(LossRecord, Vec<f64>)> {
    let (ws, mut grads) = ws_loss(model, batch, schedule)?;
    let mut cons = 0.0;
    if consistency_weight > 0.0 {
        let (c, g) = consistency_loss(model, batch, schedule)?;
        cons = c;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += consistency_weight * b;
        }
    }
    Ok((
        LossRecord {
            step: 0,
            ws_loss: ws,
            consistency_loss: cons,
        },
        grads,
    ))
}

/// Runs steps `adam.step .. cfg.steps`, so a model and optimizer restored
/// from a checkpoint continue exactly where they stopped.
pub fn train_resume(
    model: &mut MlpModel,
    adam: &mut AdamState,
    gm: &GaussianMixture,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_len(model.dim(), gm.dim())?;
    check_len(model.params.len(), adam.m.len())?;
    let schedule = model.schedule;
    let mut curve = Vec::with_capacity(cfg.steps.saturating_sub(adam.step as usize));
    while (adam.step as usize) < cfg.steps {
        let step = adam.step as usize;
        let mut rng = step_rng(cfg.seed, step as u64);
        let batch = sample_batch(gm, &schedule, cfg, &mut rng)?;
        let (mut rec, grads) = total_loss(model, &batch, &schedule, cfg.consistency_weight)?;
        rec.step = step;
        if !rec.total(cfg.consistency_weight).is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        adam.update(&mut model.params, &grads);
        curve.push(rec);
    }
    Ok(curve)
}

/// Trains from scratch with a fresh optimizer; returns the optimizer and
/// loss curve.
pub fn train(model: &mut MlpModel, gm: &GaussianMixture, cfg: &TrainConfig) -> Result<(AdamState, Vec<LossRecord>)> {
    let mut adam = AdamState::new(model.params.len(), cfg.lr, cfg.decay);
    let curve = train_resume(model, &mut adam, gm, cfg)?;
    Ok((adam, curve))
}

/// `mean ||n - ws*||^2 / mean ||ws*||^2` over `n` fresh pairs `(x_t, t)`
/// drawn through the oracle's SDE.
pub fn oracle_gap(model: &MlpModel, oracle: &Oracle, n: usize, seed: u64) -> Result<f64> {
    let sde = oracle.sde();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sde.noise_spec(false);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = oracle.mixture().sample(&mut rng);
        let t = rng.random_range(T_MIN..=1.0);
        let (x_t, _) = sde.forward_sample_with(&x0, t, &spec, &mut rng)?;
        pairs.push((x_t, t));
    }
    let sums: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(x, t)| {
            let exact = oracle.ws(x, *t)?;
            let pred = model.forward(x, *t)?;
            let err: f64 = exact.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum();
            let mag: f64 = exact.iter().map(|a| a * a).sum();
            Ok((err, mag))
        })
        .collect::<Result<_>>()?;
    let (err, mag) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    Ok(err / mag)
}

/// Means and standard errors of consecutive, non-overlapping blocks.
pub fn block_means(values: &[f64], block: usize) -> Vec<(f64, f64)> {
    values
        .chunks_exact(block.max(1))
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (m, (var / n).sqrt())
        })
        .collect()
}

/// Whether each block mean is at most the previous one plus `slack`
/// combined standard errors.
pub fn blocks_nonincreasing(blocks: &[(f64, f64)], slack: f64) -> bool {
    blocks
        .windows(2)
        .all(|w| w[1].0 <= w[0].0 + slack * (w[0].1.hypot(w[1].1)))
}
