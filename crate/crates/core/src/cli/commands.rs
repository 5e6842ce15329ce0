use std::io::Write;

use rayon::prelude::*;

use crate::container::write_tensor;
use crate::covariance::{CirculantOperator, Grid, NoiseSpec};
use crate::error::{Error, Result};
use crate::inverse::{
    make_measurement, psnr, tikhonov_tuned, ForwardOperator, IdtMode, IdtParams, NoiseLevel, OperatorKind, Psnr,
};
use crate::oracle::{
    angle_between, vector_field_grid, whitening_testbed, write_field_csv, ComponentCov, FieldGridSpec,
    GaussianMixture, Oracle,
};
use crate::samplers::{
    chain_rng, fm_ode_integrate, fm_ode_integrate_from, lambda_line_search, pf_ode_integrate, posterior_sample,
    reverse_sde_integrate, sample_ensemble, Integrator, LambdaRule, LikelihoodSign, PosteriorConfig,
    SamplerConfig, Trajectory, WsField,
};
use crate::sde::{BetaSchedule, VpSde};
use crate::testbeds::{imaging_prior, toy_mixture_2d};
use crate::training::{
    oracle_gap, train_resume, write_loss_csv, AdamState, LossRecord, LrDecay, MlpModel, TrainConfig,
};

use super::image::{quiver, write_image};
use super::{Run, RunConfig};

fn schedule(cfg: &RunConfig) -> Result<BetaSchedule> {
    BetaSchedule::new(cfg.get("schedule.beta_min")?, cfg.get("schedule.beta_max")?)
}

fn steps(cfg: &RunConfig) -> Result<usize> {
    let t: usize = cfg.get("schedule.T")?;
    if t == 0 {
        return Err(Error::Config("`schedule.T` must be positive".into()));
    }
    Ok(t)
}

pub(super) struct Prior {
    pub gm: GaussianMixture,
    pub grid: Grid,
    pub channels: usize,
}

pub(super) fn prior(cfg: &RunConfig) -> Result<Prior> {
    let image_grid = || -> Result<(Grid, usize)> {
        Ok((Grid::new(cfg.get("prior.height")?, cfg.get("prior.width")?)?, cfg.get("prior.channels")?))
    };
    match cfg.raw("prior.kind") {
        "toy" => Ok(Prior {
            gm: toy_mixture_2d(),
            grid: Grid::line(2)?,
            channels: 1,
        }),
        "imaging" => {
            let (grid, channels) = image_grid()?;
            Ok(Prior {
                gm: imaging_prior(grid, channels)?,
                grid,
                channels,
            })
        }
        "mixture" => {
            let means = cfg.get_rows("prior.means")?;
            let vars = cfg.get_list("prior.variances")?;
            let weights = cfg.get_list("prior.weights")?;
            if means.is_empty() || means.len() != vars.len() || means.len() != weights.len() {
                return Err(Error::Config(
                    "`prior.weights`, `prior.means` and `prior.variances` need one entry per component".into(),
                ));
            }
            let (grid, channels) = image_grid()?;
            let covs = vars.into_iter().map(ComponentCov::Scalar).collect();
            let gm = GaussianMixture::new(weights, means, covs)?;
            if gm.dim() != grid.len() * channels {
                return Err(Error::Config(format!(
                    "mixture dimension {} does not match prior.height x prior.width x prior.channels = {}",
                    gm.dim(),
                    grid.len() * channels
                )));
            }
            Ok(Prior { gm, grid, channels })
        }
        other => Err(Error::Config(format!("`prior.kind`: unknown kind `{other}`"))),
    }
}

pub(super) fn sde(cfg: &RunConfig, grid: Grid) -> Result<VpSde> {
    let kernel = CirculantOperator::gaussian(cfg.get("kernel.std")?, grid)?;
    Ok(VpSde::new(schedule(cfg)?, kernel).with_gamma(cfg.get("kernel.gamma")?))
}

fn operator_kind(cfg: &RunConfig) -> Result<OperatorKind> {
    Ok(match cfg.raw("problem.operator") {
        "identity" => OperatorKind::Identity,
        "motion_blur" => OperatorKind::MotionBlur {
            length: cfg.get("problem.length")?,
        },
        "lens_blur" => OperatorKind::LensBlur {
            std: cfg.get("problem.std")?,
        },
        "tidt" => OperatorKind::IdtMask {
            mode: IdtMode::Transmission,
            params: IdtParams::default(),
        },
        "ridt" => OperatorKind::IdtMask {
            mode: IdtMode::Reflection,
            params: IdtParams::default(),
        },
        "laplacian" => OperatorKind::Laplacian,
        other => return Err(Error::Config(format!("`problem.operator`: unknown operator `{other}`"))),
    })
}

fn fmt_kappa(k: f64) -> String {
    if k.fract() == 0.0 {
        format!("{}", k as i64)
    } else {
        format!("{k}")
    }
}

pub(super) fn vector_field(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.clone();
    let t: f64 = cfg.get("field.t")?;
    let spec = FieldGridSpec {
        extent: cfg.get("field.extent")?,
        points: cfg.get("field.points")?,
    };
    let size: usize = cfg.get("field.image_size")?;
    let mut panels: Vec<(String, GaussianMixture, VpSde)> = Vec::new();
    if cfg.raw("prior.kind") == "whitening" {
        let scale: f64 = cfg.get("field.prior_scale")?;
        for kappa in cfg.get_list("field.kappas")? {
            let (gm, sde) = whitening_testbed(kappa, scale)?;
            panels.push((format!("field_kappa_{}", fmt_kappa(kappa)), gm, sde));
        }
    } else {
        let p = prior(&cfg)?;
        if p.gm.dim() != 2 {
            return Err(Error::Config(format!(
                "vector-field needs a 2D prior; `{}` has dimension {}",
                cfg.raw("prior.kind"),
                p.gm.dim()
            )));
        }
        let sde = sde(&cfg, p.grid)?;
        panels.push(("field".to_string(), p.gm, sde));
    }
    let summary_path = run.artifact("field_summary.csv");
    let mut summary = std::io::BufWriter::new(std::fs::File::create(summary_path)?);
    writeln!(summary, "panel,kappa,max_ws_norm,max_score_norm,max_ws_angle")?;
    for (name, gm, sde) in panels {
        let rows = vector_field_grid(&gm, &sde, spec, t)?;
        write_field_csv(&rows, run.artifact(&format!("{name}.csv")))?;
        quiver(&rows, spec, size)?.write_ppm(run.artifact(&format!("{name}.ppm")))?;
        let alpha = sde.alpha(t)?;
        let mu = gm.mean();
        let mut ws_max: f64 = 0.0;
        let mut score_max: f64 = 0.0;
        let mut angle: f64 = 0.0;
        for r in &rows {
            ws_max = ws_max.max(r.ws[0].hypot(r.ws[1]));
            score_max = score_max.max(r.score[0].hypot(r.score[1]));
            angle = angle.max(angle_between(r.ws, [alpha * mu[0] - r.x[0], alpha * mu[1] - r.x[1]]));
        }
        let kappa = sde.kernel.condition_number();
        writeln!(summary, "{name},{kappa},{ws_max},{score_max},{angle}")?;
        println!("{name}: kappa {kappa:.3} max|ws| {ws_max:.4} max|score| {score_max:.4}");
    }
    summary.flush()?;
    Ok(())
}

fn load_field(cfg: &RunConfig, p: &Prior, sde: &VpSde) -> Result<Box<dyn WsField>> {
    match cfg.get_opt::<String>("prior.checkpoint")? {
        Some(path) => {
            let model = MlpModel::read(&path, sde.schedule)?;
            if model.dim() != p.gm.dim() {
                return Err(Error::Config(format!(
                    "checkpoint dimension {} does not match the prior's {}",
                    model.dim(),
                    p.gm.dim()
                )));
            }
            Ok(Box::new(model))
        }
        None => Ok(Box::new(Oracle::new(p.gm.clone(), sde.clone())?)),
    }
}

/// Per-coordinate mean and variance of the mixture.
fn prior_marginals(gm: &GaussianMixture) -> (Vec<f64>, Vec<f64>) {
    let mean = gm.mean();
    let mut second = vec![0.0; gm.dim()];
    for ((w, m), c) in gm.weights().iter().zip(gm.means()).zip(gm.covariances()) {
        for i in 0..gm.dim() {
            let v = match c {
                ComponentCov::Full(s) => s[(i, i)],
                ComponentCov::Scalar(s) => *s,
            };
            second[i] += w * (v + m[i] * m[i]);
        }
    }
    let var = second.iter().zip(&mean).map(|(s, m)| s - m * m).collect();
    (mean, var)
}

fn write_trajectory(run: &mut Run, traj: &Trajectory) -> Result<()> {
    traj.write_states(run.artifact("trajectory.wst"))?;
    traj.write_diagnostics_csv(run.artifact("diagnostics.csv"))
}

pub(super) fn sample(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.clone();
    let p = prior(&cfg)?;
    let sde = sde(&cfg, p.grid)?;
    let field = load_field(&cfg, &p, &sde)?;
    let integrator = cfg.raw("sampler.integrator").to_string();
    let sc = SamplerConfig {
        steps: steps(&cfg)?,
        init: sde.noise_spec(cfg.get_bool("kernel.grayscale")?),
        stochastic: integrator == "sde",
        seed: cfg.get("run.seed")?,
        stride: cfg.get("output.stride")?,
        channels: p.channels,
    };
    let chains: usize = cfg.get("sampler.chains")?;
    if chains == 0 {
        return Err(Error::Config("`sampler.chains` must be positive".into()));
    }
    let oracle = || Oracle::new(p.gm.clone(), sde.clone());
    let traj = match integrator.as_str() {
        "sde" => reverse_sde_integrate(field.as_ref(), &sde, &sc)?,
        "pf" => pf_ode_integrate(field.as_ref(), &sde, &sc)?,
        "fm" => {
            if cfg.get_opt::<String>("prior.checkpoint")?.is_some() {
                return Err(Error::Config("the `fm` integrator needs the exact oracle".into()));
            }
            fm_ode_integrate(&oracle()?, &sc)?
        }
        other => return Err(Error::Config(format!("`sampler.integrator`: unknown `{other}`"))),
    };
    write_trajectory(run, &traj)?;

    let samples: Vec<Vec<f64>> = match integrator.as_str() {
        "sde" => sample_ensemble(Integrator::ReverseSde, field.as_ref(), &sde, &sc, chains)?,
        "pf" => sample_ensemble(Integrator::PfOde, field.as_ref(), &sde, &sc, chains)?,
        _ => {
            let oracle = oracle()?;
            let init_op = sc.init.operator(p.grid)?;
            (0..chains as u64)
                .into_par_iter()
                .map(|c| {
                    let x = init_op.sample_noise_with(&sc.init, sc.channels, &mut chain_rng(sc.seed, c))?;
                    Ok(fm_ode_integrate_from(&oracle, &sc, &x)?.terminal().to_vec())
                })
                .collect::<Result<_>>()?
        }
    };
    let dim = p.gm.dim();
    let flat: Vec<f64> = samples.iter().flatten().copied().collect();
    write_tensor(run.artifact("samples.wst"), &[chains, dim], 0.0, &flat)?;

    let (pm, pv) = prior_marginals(&p.gm);
    let n = chains as f64;
    let mut f = std::io::BufWriter::new(std::fs::File::create(run.artifact("moments.csv"))?);
    writeln!(f, "index,sample_mean,sample_var,prior_mean,prior_var")?;
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        let m = samples.iter().map(|x| x[i]).sum::<f64>() / n;
        let v = samples.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        worst = worst.max((m - pm[i]).abs() / (pv[i] / n).sqrt());
        writeln!(f, "{i},{m},{v},{},{}", pm[i], pv[i])?;
    }
    f.flush()?;
    println!(
        "sampled {chains} chains x {} steps ({integrator}); largest mean deviation {worst:.2} standard errors",
        sc.steps
    );
    Ok(())
}

fn read_loss_csv(path: &std::path::Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Container(format!("bad loss row `{l}`"));
            let mut it = l.split(',');
            let mut next = || it.next().ok_or_else(bad);
            let step = next()?.parse().map_err(|_| bad())?;
            let ws_loss = next()?.parse().map_err(|_| bad())?;
            let consistency_loss = next()?.parse().map_err(|_| bad())?;
            Ok(LossRecord {
                step,
                ws_loss,
                consistency_loss,
            })
        })
        .collect()
}

pub(super) const MODEL_FILE: &str = "model.wsm";
pub(super) const OPTIMIZER_FILE: &str = "adam.wso";
pub(super) const LOSS_FILE: &str = "loss.csv";

pub(super) fn train_toy(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.clone();
    let p = prior(&cfg)?;
    let sde = sde(&cfg, p.grid)?;
    let schedule = sde.schedule;
    let kernel_std: f64 = cfg.get("kernel.std")?;
    let gamma: f64 = cfg.get("kernel.gamma")?;
    let steps: usize = cfg.get("train.steps")?;
    let tc = TrainConfig {
        kernel_std_range: (
            cfg.get_opt("train.kernel_std_min")?.unwrap_or(kernel_std),
            cfg.get_opt("train.kernel_std_max")?.unwrap_or(kernel_std),
        ),
        gamma_sq_range: (
            cfg.get_opt("train.gamma_sq_min")?.unwrap_or(gamma * gamma),
            cfg.get_opt("train.gamma_sq_max")?.unwrap_or(gamma * gamma),
        ),
        grayscale_prob: cfg.get("train.grayscale_prob")?,
        batch_size: cfg.get("train.batch_size")?,
        steps,
        seed: cfg.get("run.seed")?,
        consistency_weight: cfg.get("train.consistency_weight")?,
        lr: cfg.get("train.lr")?,
        decay: match cfg.raw("train.decay") {
            "constant" => LrDecay::Constant,
            "linear" => LrDecay::Linear { total: steps },
            other => return Err(Error::Config(format!("`train.decay`: unknown `{other}`"))),
        },
        grid: p.grid,
    };
    tc.validate().map_err(|e| Error::Config(e.to_string()))?;
    let (mut model, mut adam, mut curve) = match cfg.get_opt::<String>("train.resume")? {
        Some(dir) => {
            let dir = std::path::Path::new(&dir);
            let model = MlpModel::read(dir.join(MODEL_FILE), schedule)?;
            let adam = AdamState::read(dir.join(OPTIMIZER_FILE))?;
            let mut curve = read_loss_csv(&dir.join(LOSS_FILE))?;
            curve.truncate(adam.step as usize);
            (model, adam, curve)
        }
        None => {
            let hidden: Vec<usize> = cfg
                .get_list("train.hidden")?
                .into_iter()
                .map(|w| w as usize)
                .collect();
            let model = MlpModel::new(p.gm.dim(), &hidden, schedule, tc.seed)?;
            let adam = AdamState::new(model.params().len(), tc.lr, tc.decay);
            (model, adam, Vec::new())
        }
    };
    let start = adam.step;
    curve.extend(train_resume(&mut model, &mut adam, &p.gm, &tc)?);
    model.write(run.artifact(MODEL_FILE))?;
    adam.write(run.artifact(OPTIMIZER_FILE))?;
    write_loss_csv(&curve, run.artifact(LOSS_FILE))?;

    let samples: usize = cfg.get("train.gap_samples")?;
    let mut report = format!("steps = {}\nresumed_from = {start}\n", adam.step);
    if samples > 0 {
        let oracle = Oracle::new(p.gm.clone(), sde)?;
        let gap = oracle_gap(&model, &oracle, samples, tc.seed.wrapping_add(1))?;
        report.push_str(&format!("oracle_gap = {gap}\n"));
        println!("trained to step {}; oracle gap {gap:.4}", adam.step);
    }
    std::fs::write(run.artifact("train_report.txt"), report)?;
    Ok(())
}

fn psnr_row(f: &mut impl Write, name: &str, p: Psnr) -> Result<()> {
    writeln!(f, "{name},{},{}", p.paper, p.standard)?;
    Ok(())
}

pub(super) fn invert(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.clone();
    let p = prior(&cfg)?;
    let sde = sde(&cfg, p.grid)?;
    let field = load_field(&cfg, &p, &sde)?;
    let truth = p.gm.sample(&mut chain_rng(cfg.get("problem.truth_seed")?, 0));
    let op = ForwardOperator::new(operator_kind(&cfg)?, p.grid)?;
    let noise = NoiseSpec::correlated(cfg.get("problem.noise_std")?, cfg.get_bool("problem.noise_grayscale")?)
        .with_gamma(cfg.get("problem.noise_gamma")?);
    let level = match cfg.get_opt("problem.sigma")? {
        Some(s) => NoiseLevel::Sigma(s),
        None => NoiseLevel::Snr(cfg.get("problem.snr")?),
    };
    let prob = make_measurement(&truth, op, noise, level, cfg.get("problem.seed")?)?;
    let sign: LikelihoodSign = cfg.raw("sampler.likelihood_sign").parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let proportional = match cfg.raw("sampler.lambda_rule") {
        "proportional" => true,
        "fixed" => false,
        other => return Err(Error::Config(format!("`sampler.lambda_rule`: unknown `{other}`"))),
    };
    let pc = PosteriorConfig {
        sampler: SamplerConfig {
            steps: steps(&cfg)?,
            init: sde.noise_spec(cfg.get_bool("kernel.grayscale")?),
            stochastic: cfg.get_bool("sampler.stochastic")?,
            seed: cfg.get("run.seed")?,
            stride: cfg.get("output.stride")?,
            channels: p.channels,
        },
        sign,
    };

    let grid = p.grid;
    write_tensor(run.artifact("truth.wst"), &[p.channels, grid.height, grid.width], 0.0, &truth)?;
    write_tensor(run.artifact("measurement.wst"), &[p.channels, grid.height, grid.width], prob.sigma, &prob.y)?;
    let ext = if p.channels == 3 { "ppm" } else { "pgm" };
    write_image(run.artifact(&format!("truth.{ext}")), grid, &truth)?;
    write_image(run.artifact(&format!("measurement.{ext}")), grid, &prob.y)?;

    let (weight, tik, tik_x) = tikhonov_tuned(&prob, &cfg.get_grid("problem.tikhonov_grid")?)?;
    write_image(run.artifact(&format!("tikhonov.{ext}")), grid, &tik_x)?;

    let (lambda, recon, best) = match cfg.get_opt::<f64>("sampler.lambda")? {
        Some(l) => {
            let rule = if proportional {
                LambdaRule::PriorProportional(l)
            } else {
                LambdaRule::Fixed(l)
            };
            let s = posterior_sample(field.as_ref(), &prob, &sde, &pc, rule)?;
            write_trajectory(run, &s.trajectory)?;
            let best = psnr(&s.x0, &truth)?;
            (l, s.x0, best)
        }
        None => {
            let ls = lambda_line_search(field.as_ref(), &prob, &sde, &pc, &cfg.get_grid("sampler.lambda_grid")?, proportional)?;
            ls.write_csv(run.artifact("lambda_sweep.csv"))?;
            (ls.best_lambda, ls.best_reconstruction, ls.best_psnr)
        }
    };
    write_tensor(run.artifact("reconstruction.wst"), &[p.channels, grid.height, grid.width], lambda, &recon)?;
    write_image(run.artifact(&format!("reconstruction.{ext}")), grid, &recon)?;

    let meas = psnr(&prob.y, &truth)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(run.artifact("psnr.csv"))?);
    writeln!(f, "method,psnr_paper,psnr_std")?;
    psnr_row(&mut f, "measurement", meas)?;
    psnr_row(&mut f, "tikhonov", tik)?;
    psnr_row(&mut f, "whitened_score", best)?;
    f.flush()?;
    println!(
        "{}: measurement {:.2} dB, tikhonov {:.2} dB (weight {weight:.3e}), whitened score {:.2} dB (lambda {lambda})",
        cfg.raw("problem.operator"),
        meas.standard,
        tik.standard,
        best.standard
    );
    Ok(())
}
