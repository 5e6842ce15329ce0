//! End-to-end invariant suite behind `wsdiff check`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covariance::{CirculantOperator, Grid, NoiseSpec};
use crate::error::{Error, Result};
use crate::inverse::{make_measurement, ForwardOperator, IdtMode, IdtParams, NoiseLevel, OperatorKind};
use crate::oracle::{fm_conditional_velocity, fm_conditional_velocity_gaussian_path, Oracle};
use crate::samplers::{
    fm_ode_integrate_from, initial_state, pf_ode_integrate_from, posterior_sample, prior_sample, LambdaRule,
    PosteriorConfig, SamplerConfig,
};
use crate::sde::VpSde;
use crate::testbeds::imaging_prior;
use crate::training::{consistency_loss, ws_loss, Batch, MlpModel};

use super::commands::{prior, sde};
use super::Run;

/// Measured value and tolerance; passes when `value <= tol`.
struct Outcome {
    name: &'static str,
    value: f64,
    tol: f64,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(f64::MIN_POSITIVE)
}

fn delta_kernel_is_identity(rng: &mut ChaCha8Rng) -> Result<f64> {
    let op = CirculantOperator::gaussian(0.3, Grid::new(8, 8)?)?;
    let x = normals(rng, 64);
    Ok(rel(&op.apply_k(&x)?, &x))
}

fn kkt_matches_composition(rng: &mut ChaCha8Rng) -> Result<f64> {
    let op = CirculantOperator::gaussian(2.5, Grid::new(16, 16)?)?;
    let x = normals(rng, 256);
    Ok(rel(&op.apply_k(&op.apply_k_adjoint(&x)?)?, &op.apply_kkt(&x)?))
}

/// Count of mismatching bits across kernel widths (0 when identical).
fn target_kernel_independent(base: &VpSde, rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = base.kernel.grid();
    let n = grid.len();
    let mut mismatches = 0usize;
    for _ in 0..10 {
        let x0 = normals(rng, n);
        let xt = normals(rng, n);
        let t = rng.random_range(0.01..=1.0);
        let reference = VpSde::new(base.schedule, CirculantOperator::identity(grid)).ws_conditional_target(&x0, &xt, t)?;
        for std in [1.0, 2.5, 5.0] {
            let s = VpSde::new(base.schedule, CirculantOperator::gaussian(std, grid)?);
            let got = s.ws_conditional_target(&x0, &xt, t)?;
            mismatches += got.iter().zip(&reference).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        }
    }
    Ok(mismatches as f64)
}

fn dense_ws_target(base: &VpSde, rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = Grid::new(4, 4)?;
    let sde = VpSde::new(base.schedule, CirculantOperator::gaussian(1.0, grid)?).with_gamma(0.1);
    let shape = sde.kernel.dense_covariance(sde.gamma);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x0 = normals(rng, 16);
        let xt = normals(rng, 16);
        let t = rng.random_range(0.05..=1.0);
        let a = sde.schedule.alpha(t);
        let rhs = DVector::from_iterator(16, x0.iter().zip(&xt).map(|(u, v)| a * u - v));
        let sigma = &shape * sde.schedule.noise_variance(t);
        let solved = sigma.lu().solve(&rhs).ok_or(Error::Singular { kappa: f64::INFINITY })?;
        let dense: Vec<f64> = (&shape * sde.beta(t) * solved).iter().copied().collect();
        worst = worst.max(rel(&sde.ws_conditional_target(&x0, &xt, t)?, &dense));
    }
    Ok(worst)
}

/// `alpha E[x0|x] - x - Sigma_t grad log p_t(x)`, largest entry.
fn tweedie_residual(oracle: &Oracle, rng: &mut ChaCha8Rng) -> Result<f64> {
    let sde = oracle.sde();
    let spec = sde.noise_spec(false);
    let mut worst: f64 = 0.0;
    for k in 1..=9 {
        let t = k as f64 / 10.0;
        let m = oracle.marginal(t)?;
        let var = sde.schedule.noise_variance(t);
        for _ in 0..50 {
            let x0 = oracle.mixture().sample(rng);
            let (x, _) = sde.forward_sample_with(&x0, t, &spec, rng)?;
            let mean = m.posterior_mean(&x)?;
            let score = m.score(&x)?;
            let cs = sde.kernel.apply_covariance(&score, sde.gamma)?;
            for i in 0..x.len() {
                worst = worst.max((m.alpha * mean[i] - x[i] - var * cs[i]).abs());
            }
        }
    }
    Ok(worst)
}

fn fm_conditional_routes(base: &VpSde, rng: &mut ChaCha8Rng) -> Result<f64> {
    let sde = VpSde::new(base.schedule, CirculantOperator::gaussian(0.8, Grid::new(3, 3)?)?).with_gamma(0.05);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x0 = normals(rng, 9);
        let xt = normals(rng, 9);
        let t = rng.random_range(0.02..=1.0);
        let a = fm_conditional_velocity(&sde, &x0, &xt, t)?;
        let b = fm_conditional_velocity_gaussian_path(&sde, &x0, &xt, t)?;
        worst = worst.max(rel(&a, &b));
    }
    Ok(worst)
}

fn fm_equals_pf(oracle: &Oracle, steps: usize) -> Result<f64> {
    let sde = oracle.sde();
    let cfg = SamplerConfig {
        steps,
        init: sde.noise_spec(false),
        stochastic: false,
        seed: 3,
        stride: 1,
        channels: oracle.channels(),
    };
    let x = initial_state(sde, &cfg)?;
    let fm = fm_ode_integrate_from(oracle, &cfg, &x)?;
    let pf = pf_ode_integrate_from(oracle, sde, &cfg, &x)?;
    Ok(fm
        .states
        .iter()
        .zip(&pf.states)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max))
}

fn gradients_match_fd(oracle: &Oracle, rng: &mut ChaCha8Rng) -> Result<f64> {
    let sde = oracle.sde();
    let dim = oracle.mixture().dim();
    let spec = sde.noise_spec(false);
    let mut worst: f64 = 0.0;
    for point in 0..3 {
        let mut model = MlpModel::new(dim, &[8, 8], sde.schedule, point)?;
        for p in model.params_mut() {
            *p += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        let mut batch = Batch::default();
        for _ in 0..4 {
            let x0 = oracle.mixture().sample(rng);
            let t = rng.random_range(0.01..=0.99);
            let (x_t, _) = sde.forward_sample_with(&x0, t, &spec, rng)?;
            batch.x0.push(x0);
            batch.t.push(t);
            batch.x_t.push(x_t);
        }
        type Loss = fn(&MlpModel, &Batch, &crate::sde::BetaSchedule) -> Result<(f64, Vec<f64>)>;
        for loss in [ws_loss as Loss, consistency_loss as Loss] {
            let (_, g) = loss(&model, &batch, &sde.schedule)?;
            let h = 1e-6;
            let mut fd = vec![0.0; g.len()];
            for i in 0..g.len() {
                let orig = model.params()[i];
                model.params_mut()[i] = orig + h;
                let up = loss(&model, &batch, &sde.schedule)?.0;
                model.params_mut()[i] = orig - h;
                let down = loss(&model, &batch, &sde.schedule)?.0;
                model.params_mut()[i] = orig;
                fd[i] = (up - down) / (2.0 * h);
            }
            worst = worst.max(rel(&fd, &g));
        }
    }
    Ok(worst)
}

fn adjoint_identity(rng: &mut ChaCha8Rng) -> Result<f64> {
    let grid = Grid::new(16, 16)?;
    let kinds = [
        OperatorKind::Identity,
        OperatorKind::MotionBlur { length: 5 },
        OperatorKind::LensBlur { std: 0.8 },
        OperatorKind::IdtMask {
            mode: IdtMode::Transmission,
            params: IdtParams::default(),
        },
        OperatorKind::IdtMask {
            mode: IdtMode::Reflection,
            params: IdtParams::default(),
        },
        OperatorKind::Laplacian,
    ];
    let mut worst: f64 = 0.0;
    for kind in kinds {
        let op = ForwardOperator::new(kind, grid)?;
        let x = normals(rng, 256);
        let y = normals(rng, 256);
        let lhs: f64 = op.apply(&x)?.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&op.adjoint(&y)?).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    Ok(worst)
}

/// `G G^T Sigma_y^{-1} = (beta / sigma^2) I` when the measurement noise
/// shares the diffusion's covariance shape.
fn preconditioning_identity(base: &VpSde) -> Result<f64> {
    let grid = Grid::new(4, 4)?;
    let kernel = CirculantOperator::gaussian(2.5, grid)?;
    let sde = VpSde::new(base.schedule, kernel.clone()).with_gamma(0.3);
    let sigma = 0.2;
    let sy = kernel.dense_covariance(0.3) * (sigma * sigma);
    let sy_inv = sy.try_inverse().ok_or(Error::Singular { kappa: f64::INFINITY })?;
    let mut worst: f64 = 0.0;
    for t in [0.1, 0.5, 0.9] {
        let ggt = sde.kernel.dense_covariance(sde.gamma) * sde.beta(t);
        let scale = sde.beta(t) / (sigma * sigma);
        let dev = (ggt * &sy_inv - DMatrix::identity(16, 16) * scale).abs().max() / scale;
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Count of differing entries between lambda = 0 posterior runs and prior
/// runs with matched seeds.
fn zero_lambda_is_prior(base: &VpSde) -> Result<f64> {
    let grid = Grid::new(8, 8)?;
    let gm = imaging_prior(grid, 1)?;
    let sde = VpSde::new(base.schedule, CirculantOperator::gaussian(2.5, grid)?).with_gamma(0.3);
    let oracle = Oracle::new(gm.clone(), sde.clone())?;
    let truth = gm.mean();
    let op = ForwardOperator::new(OperatorKind::LensBlur { std: 0.8 }, grid)?;
    let prob = make_measurement(&truth, op, NoiseSpec::correlated(2.5, true), NoiseLevel::Snr(1.0), 1)?;
    let mut mismatches = 0usize;
    for seed in 0..3 {
        for stochastic in [false, true] {
            let sc = SamplerConfig {
                steps: 100,
                init: sde.noise_spec(false),
                stochastic,
                seed,
                stride: 100,
                channels: 1,
            };
            let prior_run = prior_sample(&oracle, &sde, &sc)?;
            let cfg = PosteriorConfig {
                sampler: sc,
                sign: Default::default(),
            };
            let post = posterior_sample(&oracle, &prob, &sde, &cfg, LambdaRule::Fixed(0.0))?;
            mismatches += post.x0.iter().zip(&prior_run.x0).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        }
    }
    Ok(mismatches as f64)
}

pub(super) fn run_checks(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.clone();
    let scale: f64 = cfg.get("check.tolerance_scale")?;
    if !(scale >= 0.0) {
        return Err(Error::Config("`check.tolerance_scale` must be nonnegative".into()));
    }
    let p = prior(&cfg)?;
    let sde = sde(&cfg, p.grid)?;
    let oracle = Oracle::new(p.gm.clone(), sde.clone())?;
    let steps: usize = cfg.get("schedule.T")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.get("run.seed")?);

    let results = vec![
        Outcome { name: "delta_kernel_identity", value: delta_kernel_is_identity(&mut rng)?, tol: 1e-12 },
        Outcome { name: "kkt_composition", value: kkt_matches_composition(&mut rng)?, tol: 1e-12 },
        Outcome { name: "ws_target_kernel_independent", value: target_kernel_independent(&sde, &mut rng)?, tol: 0.0 },
        Outcome { name: "ws_target_dense", value: dense_ws_target(&sde, &mut rng)?, tol: 1e-8 },
        Outcome { name: "tweedie_residual", value: tweedie_residual(&oracle, &mut rng)?, tol: 1e-8 },
        Outcome { name: "fm_conditional_routes", value: fm_conditional_routes(&sde, &mut rng)?, tol: 1e-8 },
        Outcome { name: "fm_equals_pf_ode", value: fm_equals_pf(&oracle, steps)?, tol: 1e-8 },
        Outcome { name: "gradient_finite_difference", value: gradients_match_fd(&oracle, &mut rng)?, tol: 1e-4 },
        Outcome { name: "operator_adjoint", value: adjoint_identity(&mut rng)?, tol: 1e-10 },
        Outcome { name: "preconditioning_identity", value: preconditioning_identity(&sde)?, tol: 1e-8 },
        Outcome { name: "zero_lambda_is_prior", value: zero_lambda_is_prior(&sde)?, tol: 0.0 },
    ];

    let mut report = String::from("invariant,status,value,tolerance\n");
    let mut failed = Vec::new();
    for r in &results {
        let tol = r.tol * scale;
        let pass = r.value <= tol;
        let status = if pass { "PASS" } else { "FAIL" };
        let _ = writeln!(report, "{},{status},{:e},{:e}", r.name, r.value, tol);
        println!("{:<30} [{status}] {:.3e} (tol {:.1e})", r.name, r.value, tol);
        if !pass {
            failed.push(r.name);
        }
    }
    std::fs::write(run.artifact("check_report.csv"), report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant {
            name: failed.join(", "),
            detail: format!("{} of {} invariants failed", failed.len(), results.len()),
        })
    }
}
