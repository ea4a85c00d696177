//! Trains model variants on one dataset and scores them on a
//! shared held-out split.

use std::path::Path;

use serde::Serialize;

use crate::decoders::DecoderKind;
use crate::error::{Error, Result};
use crate::ffc::BlockKind;
use crate::train::{evaluate, load_data, train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub masked_prediction: bool,
    pub decoder: DecoderKind,
    pub block_kind: BlockKind,
    pub resolution_injection: bool,
}

impl Variant {
    /// Pixel-query decoder, masked prediction, AttFFC, resolution injection.
    pub fn reference() -> Self {
        Self {
            name: "coordfill".into(),
            masked_prediction: true,
            decoder: DecoderKind::PixelQuery,
            block_kind: BlockKind::AttFfc,
            resolution_injection: true,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        let base = Self::reference();
        let v = match name {
            "coordfill" => base,
            "full_image" => Self {
                masked_prediction: false,
                ..base
            },
            "d_conv" => Self {
                decoder: DecoderKind::Conv,
                ..base
            },
            "d_mlp" => Self {
                decoder: DecoderKind::Mlp,
                ..base
            },
            "d_conv_full_image" => Self {
                decoder: DecoderKind::Conv,
                masked_prediction: false,
                ..base
            },
            "resffc" => Self {
                block_kind: BlockKind::ResFfc,
                ..base
            },
            "no_injection" => Self {
                resolution_injection: false,
                ..base
            },
            other => return Err(Error::config(format!("unknown ablation variant '{other}'"))),
        };
        Ok(Self { name: name.into(), ..v })
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.masked_prediction = self.masked_prediction;
        cfg.model.decoder = self.decoder;
        cfg.model.generator.block_kind = self.block_kind;
        cfg.model.generator.resolution_injection = self.resolution_injection;
        cfg
    }
}

/// Expands a suite name (`masked_prediction`, `decoder`, `block`,
/// `injection`, `all`) or a comma-separated list of variant names.
pub fn suite(name: &str) -> Result<Vec<Variant>> {
    let names: Vec<&str> = match name {
        "masked_prediction" => vec!["coordfill", "full_image"],
        "decoder" => vec!["coordfill", "d_conv", "d_mlp"],
        "block" => vec!["coordfill", "resffc"],
        "injection" => vec!["coordfill", "no_injection"],
        "all" => vec!["coordfill", "full_image", "d_conv", "d_mlp", "resffc", "no_injection"],
        list => list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect(),
    };
    if names.is_empty() {
        return Err(Error::config("ablation suite is empty"));
    }
    names.into_iter().map(Variant::named).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub masked_prediction: bool,
    pub decoder: String,
    pub block_kind: String,
    pub resolution_injection: bool,
    pub steps: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: f64,
    pub ssim_masked: f64,
    pub mean_fill_psnr_masked: f64,
    pub proxy_perceptual: f64,
}

/// One row per (variant, seed); variants differ only in their toggles and
/// the training seed.
pub fn run(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let (train_set, held_out, masks) = load_data(base)?;
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for v in variants {
            let cfg = TrainConfig { seed, ..v.apply(base) };
            let (t, hist) = train(&train_set, cfg)?;
            let r = evaluate(&t.model, &t.store, &held_out, &masks)?;
            log::info!("{} seed {seed}: masked PSNR {:.2}", v.name, r.psnr_masked);
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                dataset_seed: base.data.seed,
                masked_prediction: v.masked_prediction,
                decoder: v.decoder.to_string(),
                block_kind: v.block_kind.to_string(),
                resolution_injection: v.resolution_injection,
                steps: hist.len(),
                psnr: r.psnr,
                ssim: r.ssim,
                psnr_masked: r.psnr_masked,
                ssim_masked: r.ssim_masked,
                mean_fill_psnr_masked: r.mean_fill_psnr_masked,
                proxy_perceptual: r.proxy_perceptual,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Number of seeds on which variant `a` scores at least variant `b` on
/// masked PSNR, and the number of seeds compared.
pub fn wins(rows: &[AblationRow], a: &str, b: &str) -> (usize, usize) {
    let mut won = 0;
    let mut total = 0;
    for ra in rows.iter().filter(|r| r.variant == a) {
        if let Some(rb) = rows.iter().find(|r| r.variant == b && r.seed == ra.seed) {
            total += 1;
            won += (ra.psnr_masked >= rb.psnr_masked) as usize;
        }
    }
    (won, total)
}
