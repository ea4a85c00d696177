//! Trains the reference model and its variants on the same data and prints
//! held-out scores.
//!
//! `cargo run --release --example ablate [suite] [seeds] [config.json]`
//!
//! `suite` is `masked_prediction`, `decoder`, `block`, `injection`, `all`
//! or a comma-separated list of variant names.

use coordfill::ablation;
use coordfill::train::TrainConfig;

fn main() -> coordfill::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let variants = ablation::suite(&args.next().unwrap_or_else(|| "masked_prediction".into()))?;
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let base = match args.next() {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(&p).map_err(|e| coordfill::Error::io(&p, e))?)?,
        None => TrainConfig::default(),
    };
    let rows = ablation::run(&base, &variants, &(0..seeds).collect::<Vec<_>>())?;
    println!("{:<18} {:>4} {:>8} {:>8} {:>9} {:>8}", "variant", "seed", "PSNR", "SSIM", "hole PSNR", "hole SSIM");
    for r in &rows {
        println!(
            "{:<18} {:>4} {:>8.2} {:>8.3} {:>9.2} {:>8.3}",
            r.variant, r.seed, r.psnr, r.ssim, r.psnr_masked, r.ssim_masked
        );
    }
    for v in variants.iter().skip(1) {
        let (won, total) = ablation::wins(&rows, &variants[0].name, &v.name);
        println!("{} >= {} on {won}/{total} seeds", variants[0].name, v.name);
    }
    ablation::write_csv("ablation.csv", &rows)?;
    Ok(())
}
