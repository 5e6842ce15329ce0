//! Binary PGM/PPM output and a small line rasterizer for quiver plots.

use std::io::Write;
use std::path::Path;

use crate::covariance::Grid;
use crate::error::{check_len, Error, Result};
use crate::oracle::{FieldGridSpec, FieldRow};

/// RGB raster, row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    /// Bresenham line between pixel coordinates.
    pub fn line(&mut self, from: (f64, f64), to: (f64, f64), c: [u8; 3]) {
        let (mut x0, mut y0) = (from.0.round() as i64, from.1.round() as i64);
        let (x1, y1) = (to.0.round() as i64, to.1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn arrow(&mut self, from: (f64, f64), to: (f64, f64), c: [u8; 3]) {
        self.line(from, to, c);
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        let len = dx.hypot(dy);
        if len < 2.0 {
            return;
        }
        let head = (0.3 * len).min(6.0);
        let (ux, uy) = (dx / len, dy / len);
        for side in [-1.0, 1.0] {
            let (px, py) = (-uy * side, ux * side);
            let tip = (
                to.0 - head * ux + 0.5 * head * px,
                to.1 - head * uy + 0.5 * head * py,
            );
            self.line(to, tip, c);
        }
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        for p in &self.pixels {
            f.write_all(p)?;
        }
        f.flush()?;
        Ok(())
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1-channel image as PGM or a 3-channel image as PPM; values are
/// clipped to `[0, 1]`. Other channel counts show the channel mean.
pub fn write_image(path: impl AsRef<Path>, grid: Grid, data: &[f64]) -> Result<()> {
    let channels = grid.channels_of(data.len())?;
    let n = grid.len();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if channels == 3 {
        write!(f, "P6\n{} {}\n255\n", grid.width, grid.height)?;
        for i in 0..n {
            f.write_all(&[to_byte(data[i]), to_byte(data[n + i]), to_byte(data[2 * n + i])])?;
        }
    } else {
        write!(f, "P5\n{} {}\n255\n", grid.width, grid.height)?;
        for i in 0..n {
            let mean = (0..channels).map(|c| data[c * n + i]).sum::<f64>() / channels as f64;
            f.write_all(&[to_byte(mean)])?;
        }
    }
    f.flush()?;
    Ok(())
}

pub const WS_COLOR: [u8; 3] = [255, 255, 255];
pub const SCORE_COLOR: [u8; 3] = [230, 40, 40];

/// Quiver overlay of the score (red) and whitened score (white) on a square
/// raster. Each field is scaled so its longest arrow spans 90% of the grid
/// spacing.
pub fn quiver(rows: &[FieldRow], spec: FieldGridSpec, size: usize) -> Result<Raster> {
    check_len(spec.points * spec.points, rows.len())?;
    if size < 16 {
        return Err(Error::invalid("image_size", "must be at least 16"));
    }
    let mut img = Raster::new(size, size, [0, 0, 0]);
    let scale = (size - 1) as f64 / (2.0 * spec.extent);
    let to_px = |x: [f64; 2]| ((x[0] + spec.extent) * scale, (spec.extent - x[1]) * scale);
    let spacing = 2.0 * spec.extent / (spec.points - 1) as f64;
    let longest = |f: &dyn Fn(&FieldRow) -> [f64; 2]| {
        rows.iter().map(|r| f(r)[0].hypot(f(r)[1])).fold(0.0, f64::max)
    };
    let layers: [(&dyn Fn(&FieldRow) -> [f64; 2], [u8; 3]); 2] =
        [(&|r| r.ws, WS_COLOR), (&|r| r.score, SCORE_COLOR)];
    for (field, color) in layers {
        let max = longest(field);
        if max == 0.0 {
            continue;
        }
        let k = 0.9 * spacing / max;
        for r in rows {
            let v = field(r);
            let tip = [r.x[0] + k * v[0], r.x[1] + k * v[1]];
            img.arrow(to_px(r.x), to_px(tip), color);
        }
    }
    Ok(img)
}
