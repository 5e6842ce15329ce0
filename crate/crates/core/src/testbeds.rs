//! Fixed problem instances shared by the examples, the command-line tool and
//! the test suites.

use nalgebra::DMatrix;

use crate::covariance::Grid;
use crate::error::Result;
use crate::inverse::{IdtMode, IdtParams, OperatorKind};
use crate::oracle::{ComponentCov, GaussianMixture};

/// Smooth pattern with values in `[0.2, 0.8]`, different in each channel.
pub fn smooth_pattern(grid: Grid, channels: usize) -> Vec<f64> {
    use std::f64::consts::TAU;
    let mut out = Vec::with_capacity(grid.len() * channels);
    for c in 0..channels {
        let phase = c as f64 * 1.3;
        for i in 0..grid.height {
            let u = i as f64 / grid.height as f64;
            for j in 0..grid.width {
                let v = j as f64 / grid.width as f64;
                let a = (TAU * u + phase).sin() * (TAU * 2.0 * v).cos();
                let b = (TAU * (u + v) - phase).cos();
                out.push(0.5 + 0.2 * a + 0.1 * b);
            }
        }
    }
    out
}

pub const IMAGING_PRIOR_STD: f64 = 0.1;

/// `N(pattern, 0.1^2 I)` over `channels` channels of `grid`.
pub fn imaging_prior(grid: Grid, channels: usize) -> Result<GaussianMixture> {
    GaussianMixture::single(
        smooth_pattern(grid, channels),
        ComponentCov::Scalar(IMAGING_PRIOR_STD * IMAGING_PRIOR_STD),
    )
}

/// Two-component 2D mixture used for the toy training runs.
pub fn toy_mixture_2d() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.4, 0.6],
        vec![vec![1.5, 1.0], vec![-0.5, 0.5]],
        vec![
            ComponentCov::Full(DMatrix::from_row_slice(2, 2, &[0.08, 0.02, 0.02, 0.06])),
            ComponentCov::Full(DMatrix::from_row_slice(2, 2, &[0.05, -0.01, -0.01, 0.1])),
        ],
    )
    .expect("valid mixture")
}

/// Kernel std of the fixed noise operator used when training the toy model.
pub const TOY_KERNEL_STD: f64 = 0.7;

/// Noise kernel std of the imaging measurements.
pub const MEASUREMENT_KERNEL_STD: f64 = 2.5;

/// The imaging tasks with their measurement SNRs.
pub fn imaging_tasks() -> Vec<(&'static str, OperatorKind, f64)> {
    vec![
        ("denoise", OperatorKind::Identity, 0.26),
        ("motion_blur", OperatorKind::MotionBlur { length: 5 }, 0.493),
        ("lens_blur", OperatorKind::LensBlur { std: 0.8 }, 0.810),
        (
            "tidt",
            OperatorKind::IdtMask {
                mode: IdtMode::Transmission,
                params: IdtParams::default(),
            },
            0.632,
        ),
        (
            "ridt",
            OperatorKind::IdtMask {
                mode: IdtMode::Reflection,
                params: IdtParams::default(),
            },
            0.632,
        ),
        ("laplacian", OperatorKind::Laplacian, 12.91),
    ]
}
