//! Times parameter generation and hole-pixel querying across output sizes
//! and mask ratios, plus the transposed-conv decoder for comparison.
//!
//! `cargo run --release --example bench [max_side]`

use coordfill::bench::{self, BenchConfig, Phase};
use coordfill::decoders::DecoderKind;
use coordfill::model::{Model, ModelConfig};
use coordfill::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coordfill::Result<()> {
    let max: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let sides: Vec<usize> = [256, 512, 1024, 2048].into_iter().filter(|&s| s <= max).collect();
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let cfg = BenchConfig {
        resolutions: sides.iter().map(|&s| (s, s)).collect(),
        ..BenchConfig::default()
    };
    let rows = bench::run(&model, &store, &cfg)?;
    println!("{:>9} {:>6} {:>6} {:>10} {:>9}", "phase", "side", "ratio", "ms", "pixels");
    for r in &rows {
        println!(
            "{:>9} {:>6} {:>6.2} {:>10.2} {:>9}",
            r.phase.to_string(),
            r.height,
            r.mask_ratio,
            r.wall_ms,
            r.decoded_pixels
        );
    }

    let side = *sides.last().unwrap_or(&256);
    let mut conv_store = ParamStore::new();
    let conv = Model::new(
        &mut conv_store,
        ModelConfig {
            decoder: DecoderKind::Conv,
            max_output_res: side,
            ..ModelConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let c = bench::conv_decode_time(&conv, &conv_store, side, side, 3, 0)?;
    let q = rows
        .iter()
        .filter(|r| r.phase == Phase::Query && r.height == side)
        .map(|r| r.wall_ms)
        .last()
        .unwrap_or(f64::NAN);
    println!("conv decoder full {side}x{side}: {:.1} ms; pixel query at 25%: {q:.1} ms", c.wall_ms);
    bench::write_csv("bench.csv", &rows)?;
    Ok(())
}
