//! Score and whitened score of an anisotropic 2D Gaussian as the noise
//! covariance grows more ill-conditioned. Writes one quiver image per kappa
//! and prints the largest angle between the whitened score and the
//! direction to the mean.

use ws_diffusion::oracle::{angle_between, vector_field_grid, whitening_testbed, FieldGridSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("ws_vector_field");
    std::fs::create_dir_all(&out)?;
    let spec = FieldGridSpec { extent: 3.0, points: 15 };
    for kappa in [1.0, 4.0, 16.0, 64.0] {
        let (gm, sde) = whitening_testbed(kappa, 1.0)?;
        let rows = vector_field_grid(&gm, &sde, spec, 0.5)?;
        let marginal_mean = {
            let a = sde.alpha(0.5)?;
            [a * gm.means()[0][0], a * gm.means()[0][1]]
        };
        let worst = rows
            .iter()
            .map(|r| angle_between(r.ws, [marginal_mean[0] - r.x[0], marginal_mean[1] - r.x[1]]))
            .fold(0.0, f64::max);
        let ratio = rows
            .iter()
            .map(|r| r.score[0].hypot(r.score[1]))
            .fold(0.0, f64::max)
            / rows.iter().map(|r| r.ws[0].hypot(r.ws[1])).fold(0.0, f64::max);
        let img = ws_diffusion::cli::image::quiver(&rows, spec, 256)?;
        let path = out.join(format!("field_kappa_{kappa}.ppm"));
        img.write_ppm(&path)?;
        println!(
            "kappa {kappa:>4}: max ws angle {:.2e} rad, |score|/|ws| peak ratio {ratio:.2}, {}",
            worst,
            path.display()
        );
    }
    Ok(())
}
