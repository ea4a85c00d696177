//! Samples free-form masks and reports their hole ratios; writes a few as PNG.
//!
//! `cargo run --release --example masks [count]`

use coordfill::data::masks::hole_ratio;
use coordfill::data::{generate_mask, MaskSpec};
use coordfill::image_io::write_mask;

fn main() -> coordfill::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let spec = MaskSpec::default();
    let mut ratios = Vec::new();
    for seed in 0..n {
        let m = generate_mask(&spec.clone().with_seed(seed), 128, 128)?;
        if seed < 4 {
            write_mask(format!("mask_{seed}.png"), &m)?;
        }
        ratios.push(hole_ratio(&m));
    }
    ratios.sort_by(f64::total_cmp);
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    println!(
        "{n} masks at 128x128: hole ratio min {:.3}, median {:.3}, mean {mean:.3}, max {:.3} (bound {})",
        ratios[0],
        ratios[ratios.len() / 2],
        ratios[ratios.len() - 1],
        spec.max_hole_ratio
    );
    Ok(())
}
