//! Fourier support of the transmission and reflection IDT masks, printed
//! as ASCII maps with the origin at the centre.

use ws_diffusion::covariance::Grid;
use ws_diffusion::inverse::{build_idt_mask, IdtMode, IdtParams};

fn main() -> ws_diffusion::Result<()> {
    let n = 32;
    let grid = Grid::new(n, n)?;
    for mode in [IdtMode::Transmission, IdtMode::Reflection] {
        let op = build_idt_mask(mode, grid, IdtParams::default())?;
        let support = op.support(0.5);
        let kept = support.iter().filter(|&&s| s).count();
        println!("{mode:?}: {kept} of {} frequencies kept", n * n);
        for i in 0..n {
            let row: String = (0..n)
                .map(|j| {
                    let (fi, fj) = ((i + n / 2) % n, (j + n / 2) % n);
                    if support[fi * n + fj] { '#' } else { '.' }
                })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
