//! Trains on procedural images and compares against mean fill.
//!
//! `cargo run --release --example train_desk [config.json]`

use std::time::Instant;

use coordfill::train::{evaluate, load_data, train, TrainConfig};

fn main() -> coordfill::Result<()> {
    env_logger::init();
    let cfg = match std::env::args().nth(1) {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(&p).map_err(|e| coordfill::Error::io(&p, e))?)?,
        None => TrainConfig::default(),
    };
    let (train_set, held_out, masks) = load_data(&cfg)?;

    let start = Instant::now();
    let (trainer, history) = train(&train_set, cfg)?;
    let first = history.first().map(|r| r.total).unwrap_or(f64::NAN);
    let last = history.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("{} steps in {:.1?}: total loss {first:.4} -> {last:.4}", history.len(), start.elapsed());
    for r in history.iter().step_by((history.len() / 10).max(1)) {
        println!("  step {:4}  per {:.4}  adv_g {:.4}  adv_d {:.4}  fm {:.5}  total {:.4}", r.step, r.l_per, r.l_adv_g, r.l_adv_d, r.l_fm, r.total);
    }
    let report = evaluate(&trainer.model, &trainer.store, &held_out, &masks)?;
    println!(
        "held-out masked PSNR {:.2} dB (mean fill {:.2} dB), masked SSIM {:.3}, proxy perceptual {:.4}",
        report.psnr_masked, report.mean_fill_psnr_masked, report.ssim_masked, report.proxy_perceptual
    );
    Ok(())
}
