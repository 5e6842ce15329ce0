//! Trains the small time-conditioned MLP on the toy mixture with the
//! whitened-score and consistency losses, then compares it with the exact
//! field. Pass a step count as the first argument (default 3000).

use ws_diffusion::covariance::{CirculantOperator, Grid};
use ws_diffusion::sde::{BetaSchedule, VpSde};
use ws_diffusion::testbeds::{toy_mixture_2d, TOY_KERNEL_STD};
use ws_diffusion::training::{block_means, oracle_gap, train, MlpModel, TrainConfig};
use ws_diffusion::Oracle;

fn main() -> ws_diffusion::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3000);
    let grid = Grid::line(2)?;
    let gm = toy_mixture_2d();
    let schedule = BetaSchedule::default();
    let cfg = TrainConfig {
        kernel_std_range: (TOY_KERNEL_STD, TOY_KERNEL_STD),
        gamma_sq_range: (0.0, 0.0),
        grayscale_prob: 0.0,
        steps,
        ..TrainConfig::toy(grid)
    };
    let mut model = MlpModel::new(2, &[64, 64], schedule, 0)?;
    let (adam, curve) = train(&mut model, &gm, &cfg)?;
    let totals: Vec<f64> = curve.iter().map(|r| r.total(cfg.consistency_weight)).collect();
    for (i, (mean, se)) in block_means(&totals, steps / 10).iter().enumerate() {
        println!("block {i}: loss {mean:.4} +- {se:.4}");
    }
    let sde = VpSde::new(schedule, CirculantOperator::gaussian(TOY_KERNEL_STD, grid)?);
    let oracle = Oracle::new(gm, sde)?;
    println!(
        "after {} steps: relative gap to the exact field {:.4}",
        adam.step,
        oracle_gap(&model, &oracle, 2000, 99)?
    );
    Ok(())
}
