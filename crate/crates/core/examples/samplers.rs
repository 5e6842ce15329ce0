//! Reverse SDE, probability-flow ODE and flow-matching ODE driven by the
//! exact whitened score of the toy mixture, with ensemble moments against
//! the prior.

use ws_diffusion::covariance::{CirculantOperator, Grid};
use ws_diffusion::samplers::{fm_ode_integrate, sample_ensemble, Integrator, SamplerConfig};
use ws_diffusion::sde::{BetaSchedule, VpSde};
use ws_diffusion::testbeds::{toy_mixture_2d, TOY_KERNEL_STD};
use ws_diffusion::Oracle;

fn moments(xs: &[Vec<f64>]) -> ([f64; 2], [f64; 2]) {
    let n = xs.len() as f64;
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    for i in 0..2 {
        m[i] = xs.iter().map(|x| x[i]).sum::<f64>() / n;
        v[i] = xs.iter().map(|x| (x[i] - m[i]).powi(2)).sum::<f64>() / (n - 1.0);
    }
    (m, v)
}

fn main() -> ws_diffusion::Result<()> {
    let gm = toy_mixture_2d();
    let sde = VpSde::new(
        BetaSchedule::default(),
        CirculantOperator::gaussian(TOY_KERNEL_STD, Grid::line(2)?)?,
    )
    .with_gamma(0.5);
    let oracle = Oracle::new(gm.clone(), sde.clone())?;
    let chains = 2000;
    let cfg = SamplerConfig {
        steps: 1000,
        init: sde.noise_spec(false),
        stochastic: true,
        seed: 1,
        stride: 1000,
        channels: 1,
    };

    let cov = gm.covariance();
    let prior_mean = gm.mean();
    println!("prior   mean [{:.3}, {:.3}]  var [{:.3}, {:.3}]", prior_mean[0], prior_mean[1], cov[(0, 0)], cov[(1, 1)]);

    let sde_runs = sample_ensemble(Integrator::ReverseSde, &oracle, &sde, &cfg, chains)?;
    let pf_cfg = SamplerConfig { stochastic: false, ..cfg };
    let pf_runs = sample_ensemble(Integrator::PfOde, &oracle, &sde, &pf_cfg, chains)?;
    let fm_runs: Vec<Vec<f64>> = (0..chains as u64)
        .map(|c| Ok(fm_ode_integrate(&oracle, &SamplerConfig { seed: c, ..pf_cfg })?.terminal().to_vec()))
        .collect::<ws_diffusion::Result<_>>()?;

    for (name, xs) in [("sde", &sde_runs), ("pf-ode", &pf_runs), ("fm-ode", &fm_runs)] {
        let (m, v) = moments(xs);
        println!("{name:<7} mean [{:.3}, {:.3}]  var [{:.3}, {:.3}]", m[0], m[1], v[0], v[1]);
    }
    Ok(())
}
