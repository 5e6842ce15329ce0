//! Reverse-time integrators driven by a whitened-score field, and the
//! posterior sampler for linear inverse problems.
//!
//! All integrators walk the grid `t_i = i / T` for `i = T, ..., 1` with
//! `dt = 1 / T`, evaluating the field at `t_i` and landing at `t = 0`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::write_tensor;
use crate::covariance::NoiseSpec;
use crate::error::{check_len, Error, Result};
use crate::inverse::{norm, psnr, select_best, InverseProblem, LineSearch, Psnr, SweepRow};
use crate::oracle::Oracle;
use crate::sde::VpSde;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Oracle,
    Model,
    Other,
}

/// `(x_t, t) -> G_t G_t^T grad log p_t(x_t)`. Must be callable from many threads.
pub trait WsField: Send + Sync {
    fn ws(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    fn kind(&self) -> FieldKind {
        FieldKind::Other
    }

    /// Evaluates many states at one time. The default runs `ws` in parallel.
    fn ws_batch(&self, xs: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
        xs.par_iter().map(|x| self.ws(x, t)).collect()
    }
}

impl WsField for Oracle {
    fn ws(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Oracle::ws(self, x, t)
    }

    fn kind(&self) -> FieldKind {
        FieldKind::Oracle
    }

    fn ws_batch(&self, xs: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::TimeOutOfRange(t));
        }
        let m = self.marginal(t)?;
        xs.par_iter().map(|x| m.ws(x)).collect()
    }
}

/// The zero field; reduces every integrator to its drift.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl WsField for ZeroField {
    fn ws(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

/// Wraps a closure as a field.
pub struct FnField<F>(pub F);

impl<F> WsField for FnField<F>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + Send + Sync,
{
    fn ws(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (self.0)(x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Initial draw `x_T ~ N(0, K_init K_init^T + gamma^2 I)`; a delta
    /// kernel (std <= 0.5) gives `N(0, (1 + gamma^2) I)`.
    pub init: NoiseSpec,
    pub stochastic: bool,
    pub seed: u64,
    /// Keep every `stride`-th state (the first and last are always kept).
    pub stride: usize,
    pub channels: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            init: NoiseSpec::white(),
            stochastic: true,
            seed: 0,
            stride: 1,
            channels: 1,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels", "must be at least 1"));
        }
        self.init.validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// RNG of chain `chain` under `seed`; one stream per chain.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

fn draw_init(sde: &VpSde, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let op = cfg.init.operator(sde.kernel.grid())?;
    op.sample_noise_with(&cfg.init, cfg.channels, rng)
}

/// `x_T` for chain 0 of `cfg`.
pub fn initial_state(sde: &VpSde, cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    draw_init(sde, cfg, &mut chain_rng(cfg.seed, 0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    pub x_norm: f64,
    /// `None` where no field is evaluated.
    pub ws_norm: Option<f64>,
    /// `||y - A x||`, posterior runs only.
    pub residual_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Time of each stored state, starting at 1 and ending at 0.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// One entry per step, evaluated at the step's start time.
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least x_T")
    }

    pub fn write_states(&self, path: impl AsRef<Path>) -> Result<()> {
        let dim = self.states.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.states.iter().flatten().copied().collect();
        write_tensor(path, &[self.states.len(), dim], 0.0, &flat)
    }

    pub fn write_diagnostics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,x_norm,ws_norm,residual_norm")?;
        for d in &self.diagnostics {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{},{}", d.t, d.x_norm, opt(d.ws_norm), opt(d.residual_norm))?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    /// Euler-Maruyama for the reverse SDE; drift only when `stochastic` is off.
    ReverseSde,
    /// Euler for the probability-flow ODE.
    PfOde,
}

/// Correlated injection `sqrt(beta dt) (K xi1 + gamma xi2)`.
fn injection(sde: &VpSde, t: f64, dt: f64, channels: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let s = (sde.beta(t) * dt).sqrt();
    let mut z = sde.kernel.sample_noise_with(&sde.noise_spec(false), channels, rng)?;
    for v in z.iter_mut() {
        *v *= s;
    }
    Ok(z)
}

fn euler_step(
    integrator: Integrator,
    sde: &VpSde,
    stochastic: bool,
    x: &mut [f64],
    ws: &[f64],
    t: f64,
    dt: f64,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let f = sde.drift(t);
    let c = match integrator {
        Integrator::ReverseSde => 1.0,
        Integrator::PfOde => 0.5,
    };
    for (xv, w) in x.iter_mut().zip(ws) {
        *xv -= (f * *xv - c * w) * dt;
    }
    if integrator == Integrator::ReverseSde && stochastic {
        let z = injection(sde, t, dt, channels, rng)?;
        for (xv, zv) in x.iter_mut().zip(&z) {
            *xv += zv;
        }
    }
    Ok(())
}

struct Recorder {
    stride: usize,
    steps: usize,
    traj: Trajectory,
}

impl Recorder {
    fn new(cfg: &SamplerConfig, x_init: &[f64]) -> Self {
        Self {
            stride: cfg.stride,
            steps: cfg.steps,
            traj: Trajectory {
                times: vec![1.0],
                states: vec![x_init.to_vec()],
                diagnostics: Vec::with_capacity(cfg.steps),
            },
        }
    }

    fn push(&mut self, k: usize, x: &[f64], diag: StepDiagnostics) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        self.traj.diagnostics.push(diag);
        let done = k + 1;
        if done % self.stride == 0 || done == self.steps {
            self.traj.times.push((self.steps - done) as f64 / self.steps as f64);
            self.traj.states.push(x.to_vec());
        }
        Ok(())
    }
}

fn integrate_from(
    integrator: Integrator,
    field: &dyn WsField,
    sde: &VpSde,
    cfg: &SamplerConfig,
    x_init: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_len(sde.kernel.grid().len() * cfg.channels, x_init.len())?;
    let dt = cfg.dt();
    let mut x = x_init.to_vec();
    let mut rec = Recorder::new(cfg, x_init);
    for k in 0..cfg.steps {
        let t = (cfg.steps - k) as f64 * dt;
        let ws = field.ws(&x, t)?;
        check_len(x.len(), ws.len())?;
        let diag = StepDiagnostics {
            t,
            x_norm: norm(&x),
            ws_norm: Some(norm(&ws)),
            residual_norm: None,
        };
        euler_step(integrator, sde, cfg.stochastic, &mut x, &ws, t, dt, cfg.channels, rng)?;
        rec.push(k, &x, diag)?;
    }
    Ok(rec.traj)
}

/// Euler-Maruyama for `dx = [F x - G G^T grad log p] dt + G dw` backwards in time.
pub fn reverse_sde_integrate(field: &dyn WsField, sde: &VpSde, cfg: &SamplerConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = chain_rng(cfg.seed, 0);
    let x = draw_init(sde, cfg, &mut rng)?;
    integrate_from(Integrator::ReverseSde, field, sde, cfg, &x, &mut rng)
}

pub fn reverse_sde_integrate_from(
    field: &dyn WsField,
    sde: &VpSde,
    cfg: &SamplerConfig,
    x_init: &[f64],
) -> Result<Trajectory> {
    let mut rng = chain_rng(cfg.seed, 0);
    integrate_from(Integrator::ReverseSde, field, sde, cfg, x_init, &mut rng)
}

/// Euler for `dx = [F x - 1/2 G G^T grad log p] dt`.
pub fn pf_ode_integrate(field: &dyn WsField, sde: &VpSde, cfg: &SamplerConfig) -> Result<Trajectory> {
    let x = initial_state(sde, cfg)?;
    pf_ode_integrate_from(field, sde, cfg, &x)
}

pub fn pf_ode_integrate_from(
    field: &dyn WsField,
    sde: &VpSde,
    cfg: &SamplerConfig,
    x_init: &[f64],
) -> Result<Trajectory> {
    let mut rng = chain_rng(cfg.seed, 0);
    integrate_from(Integrator::PfOde, field, sde, cfg, x_init, &mut rng)
}

/// Euler for `dx/dt = u_t(x)` with the marginal flow-matching velocity of
/// the oracle's prior.
pub fn fm_ode_integrate(oracle: &Oracle, cfg: &SamplerConfig) -> Result<Trajectory> {
    let x = initial_state(oracle.sde(), cfg)?;
    fm_ode_integrate_from(oracle, cfg, &x)
}

pub fn fm_ode_integrate_from(oracle: &Oracle, cfg: &SamplerConfig, x_init: &[f64]) -> Result<Trajectory> {
    cfg.validate()?;
    check_len(oracle.mixture().dim(), x_init.len())?;
    let dt = cfg.dt();
    let mut x = x_init.to_vec();
    let mut rec = Recorder::new(cfg, x_init);
    for k in 0..cfg.steps {
        let t = (cfg.steps - k) as f64 * dt;
        let u = oracle.fm_velocity(&x, t)?;
        let diag = StepDiagnostics {
            t,
            x_norm: norm(&x),
            ws_norm: None,
            residual_norm: None,
        };
        for (xv, uv) in x.iter_mut().zip(&u) {
            *xv -= uv * dt;
        }
        rec.push(k, &x, diag)?;
    }
    Ok(rec.traj)
}

/// Runs `chains` independent chains in lockstep and returns their terminal
/// states. Chain `c` uses RNG stream `c`, so chain 0 reproduces the
/// single-chain integrators bitwise.
pub fn sample_ensemble(
    integrator: Integrator,
    field: &dyn WsField,
    sde: &VpSde,
    cfg: &SamplerConfig,
    chains: usize,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..chains as u64).map(|c| chain_rng(cfg.seed, c)).collect();
    let mut xs: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| draw_init(sde, cfg, r))
        .collect::<Result<_>>()?;
    let dt = cfg.dt();
    for k in 0..cfg.steps {
        let t = (cfg.steps - k) as f64 * dt;
        let ws = field.ws_batch(&xs, t)?;
        xs.par_iter_mut()
            .zip(rngs.par_iter_mut())
            .zip(ws.par_iter())
            .try_for_each(|((x, rng), w)| {
                euler_step(integrator, sde, cfg.stochastic, x, w, t, dt, cfg.channels, rng)?;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { step: k });
                }
                Ok(())
            })?;
    }
    Ok(xs)
}

/// How `lambda_t` is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    Fixed(f64),
    /// `lambda_t = c ||x' - x|| / ||beta A^H (y - A x) / 2||`: the likelihood
    /// step is `c` times as long as the prior step.
    PriorProportional(f64),
}

impl LambdaRule {
    fn coefficient(&self) -> f64 {
        match *self {
            LambdaRule::Fixed(c) | LambdaRule::PriorProportional(c) => c,
        }
    }
}

/// Sign of the likelihood step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LikelihoodSign {
    /// `x' + lambda beta A^H (y - A x) / 2`, moving toward the measurement.
    #[default]
    Descend,
    /// `x' - lambda beta A^H (y - A x) / 2`.
    AsPrinted,
}

impl std::str::FromStr for LikelihoodSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descend" => Ok(Self::Descend),
            "as_printed" => Ok(Self::AsPrinted),
            other => Err(Error::invalid("likelihood_sign", format!("`{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorConfig {
    pub sampler: SamplerConfig,
    pub sign: LikelihoodSign,
}

pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub x0: Vec<f64>,
    pub trajectory: Trajectory,
    pub lambdas: Vec<f64>,
}

/// Posterior sampling with a whitened-score prior.
///
/// Each step takes the prior move
/// `x' = (2 - sqrt(1 - beta dt)) x + n(x, t) dt / 2`
/// and then the likelihood move `x' +- lambda_t beta A^H (y - A x) / 2`,
/// with the residual taken at the pre-step state. With `stochastic` set the
/// prior move uses the full field and adds the reverse-SDE injection; this
/// variant is an extension.
///
/// A zero `lambda_t` leaves `x'` untouched, so `lambda = 0` reproduces
/// [`prior_sample`] bitwise for the same seed.
pub fn posterior_sample(
    field: &dyn WsField,
    prob: &InverseProblem,
    sde: &VpSde,
    cfg: &PosteriorConfig,
    rule: LambdaRule,
) -> Result<PosteriorSample> {
    let sc = &cfg.sampler;
    sc.validate()?;
    check_len(sde.kernel.grid().len() * sc.channels, prob.y.len())?;
    let mut rng = chain_rng(sc.seed, 0);
    let x = draw_init(sde, sc, &mut rng)?;
    algorithm_loop(field, Some((prob, rule, cfg.sign)), sde, sc, x, &mut rng)
}

/// The prior-only half of [`posterior_sample`].
pub fn prior_sample(field: &dyn WsField, sde: &VpSde, cfg: &SamplerConfig) -> Result<PosteriorSample> {
    cfg.validate()?;
    let mut rng = chain_rng(cfg.seed, 0);
    let x = draw_init(sde, cfg, &mut rng)?;
    algorithm_loop(field, None, sde, cfg, x, &mut rng)
}

fn algorithm_loop(
    field: &dyn WsField,
    likelihood: Option<(&InverseProblem, LambdaRule, LikelihoodSign)>,
    sde: &VpSde,
    cfg: &SamplerConfig,
    mut x: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<PosteriorSample> {
    if let Some((_, rule, _)) = likelihood {
        let c = rule.coefficient();
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::invalid("lambda", format!("{c}")));
        }
    }
    let dt = cfg.dt();
    if sde.schedule.beta_max * dt >= 1.0 {
        return Err(Error::invalid("steps", "beta_max * dt must stay below 1"));
    }
    let limit = DIVERGENCE_FACTOR * norm(&x);
    let mut rec = Recorder::new(cfg, &x);
    let mut lambdas = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let t = (cfg.steps - k) as f64 * dt;
        let beta = sde.beta(t);
        let n = field.ws(&x, t)?;
        check_len(x.len(), n.len())?;
        let a = 2.0 - (1.0 - beta * dt).sqrt();
        let c = if cfg.stochastic { 1.0 } else { 0.5 };
        let mut next: Vec<f64> = x.iter().zip(&n).map(|(xv, nv)| a * xv + c * nv * dt).collect();
        if cfg.stochastic {
            let z = injection(sde, t, dt, cfg.channels, rng)?;
            for (v, zv) in next.iter_mut().zip(&z) {
                *v += zv;
            }
        }
        let mut residual_norm = None;
        if let Some((prob, rule, sign)) = likelihood {
            let r = prob.residual(&x)?;
            residual_norm = Some(norm(&r));
            let g = prob.operator.adjoint(&r)?;
            let step: Vec<f64> = g.iter().map(|v| 0.5 * beta * v).collect();
            let lambda = match rule {
                LambdaRule::Fixed(l) => l,
                LambdaRule::PriorProportional(c) => {
                    let prior_move = next.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let lik = norm(&step);
                    if lik > 0.0 {
                        c * prior_move / lik
                    } else {
                        0.0
                    }
                }
            };
            lambdas.push(lambda);
            if lambda != 0.0 {
                let s = match sign {
                    LikelihoodSign::Descend => lambda,
                    LikelihoodSign::AsPrinted => -lambda,
                };
                for (v, g) in next.iter_mut().zip(&step) {
                    *v += s * g;
                }
            }
        }
        let diag = StepDiagnostics {
            t,
            x_norm: norm(&x),
            ws_norm: Some(norm(&n)),
            residual_norm,
        };
        x = next;
        rec.push(k, &x, diag)?;
        let nx = norm(&x);
        if limit > 0.0 && nx > limit {
            return Err(Error::Divergence {
                step: k,
                norm: nx,
                limit,
            });
        }
    }
    Ok(PosteriorSample {
        x0: x,
        trajectory: rec.traj,
        lambdas,
    })
}

/// Runs [`posterior_sample`] for each lambda in parallel and keeps the best
/// PSNR against `prob.x_true`. With `proportional` the grid values are the
/// coefficients of [`LambdaRule::PriorProportional`].
///
/// Failed runs are recorded in the table and do not stop the sweep.
pub fn lambda_line_search(
    field: &dyn WsField,
    prob: &InverseProblem,
    sde: &VpSde,
    cfg: &PosteriorConfig,
    lambda_grid: &[f64],
    proportional: bool,
) -> Result<LineSearch> {
    if lambda_grid.is_empty() {
        return Err(Error::invalid("lambda_grid", "empty"));
    }
    let truth = prob
        .x_true
        .as_ref()
        .ok_or_else(|| Error::invalid("x_true", "line search scores against ground truth"))?;
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let rows: Vec<(f64, Result<(Psnr, Vec<f64>)>)> = grid
        .par_iter()
        .map(|&l| {
            let rule = if proportional {
                LambdaRule::PriorProportional(l)
            } else {
                LambdaRule::Fixed(l)
            };
            let r = posterior_sample(field, prob, sde, cfg, rule)
                .and_then(|s| Ok((psnr(&s.x0, truth)?, s.x0)));
            (l, r)
        })
        .collect();
    let Some(best) = select_best(&rows) else {
        // Every run failed: surface the first failure as is.
        let first = rows.into_iter().find_map(|(_, r)| r.err());
        return Err(first.expect("nonempty grid"));
    };
    let table = rows
        .iter()
        .map(|(l, r)| SweepRow {
            lambda: *l,
            psnr: r.as_ref().ok().map(|(p, _)| *p),
            error: r.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    let (best_lambda, best_result) = rows.into_iter().nth(best).expect("index from rows");
    let (best_psnr, best_reconstruction) = best_result.expect("best row succeeded");
    Ok(LineSearch {
        best_lambda,
        best_psnr,
        best_reconstruction,
        table,
    })
}
