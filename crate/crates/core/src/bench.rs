//! Wall-clock benchmarks of the two inference phases.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::coord_query::{hole_coords, query_pixels};
use crate::data::{mask_with_ratio, synth_dataset};
use crate::error::{Error, Result};
use crate::model::{Decoder, Model};
use crate::param_gen::{generate_parameters, prepare_input, MaskedImage};
use crate::params::ParamStore;

pub const WARMUPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Paramgen,
    Query,
    Total,
    /// Full-image decode of the transposed-conv baseline.
    ConvDecode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Paramgen => "paramgen",
            Phase::Query => "query",
            Phase::Total => "total",
            Phase::ConvDecode => "conv_decode",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub phase: Phase,
    pub height: usize,
    pub width: usize,
    pub mask_ratio: f64,
    pub wall_ms: f64,
    pub decoded_pixels: usize,
    /// `ok`, `oom` (skipped: estimated memory over budget) or `error`.
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub resolutions: Vec<(usize, usize)>,
    pub mask_ratios: Vec<f64>,
    pub repeats: usize,
    pub workers: usize,
    pub seed: u64,
    /// Rows whose estimated working set exceeds this are recorded as `oom`.
    pub memory_budget: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![(256, 256), (512, 512), (1024, 1024)],
            mask_ratios: vec![0.05, 0.15, 0.25],
            repeats: 5,
            workers: 1,
            seed: 0,
            memory_budget: 2 << 30,
        }
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of `repeats` runs after [`WARMUPS`] untimed ones.
pub fn time_median<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    for _ in 0..WARMUPS {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let out = f()?;
        times.push(ms(t.elapsed()));
        last = Some(out);
    }
    Ok((median(times), last.expect("at least one repeat")))
}

fn ms(d: Duration) -> f64 {
    // Keep a strictly positive value even when the clock does not advance.
    (d.as_secs_f64() * 1e3).max(1e-6)
}

/// Rough peak bytes for one inference at `h x w`: image, mask, output and
/// per-pixel coordinate and colour buffers.
pub fn estimated_bytes(h: usize, w: usize) -> usize {
    h.saturating_mul(w).saturating_mul(4 * 3 + 4 + 4 * 3 + 16 + 12)
}

fn row(phase: Phase, h: usize, w: usize, ratio: f64, wall_ms: f64, pixels: usize, status: &str) -> BenchRecord {
    BenchRecord {
        phase,
        height: h,
        width: w,
        mask_ratio: ratio,
        wall_ms,
        decoded_pixels: pixels,
        status: status.into(),
    }
}

/// Times parameter generation and hole-pixel querying separately, plus the
/// end-to-end path, for every (resolution, mask ratio) pair.
pub fn run(model: &Model, store: &ParamStore, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if !matches!(model.decoder, Decoder::PixelQuery) {
        return Err(Error::InvalidArgument("the phase benchmark needs the pixel-query decoder".into()));
    }
    if cfg.mask_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidArgument("mask ratios must lie in [0, 1]".into()));
    }
    let gen = &model.generator;
    let spec = &gen.config.mlp;
    let mut out = Vec::new();
    for &(h, w) in &cfg.resolutions {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("resolution {h}x{w} is empty")));
        }
        if estimated_bytes(h, w) > cfg.memory_budget {
            for &ratio in &cfg.mask_ratios {
                for phase in [Phase::Paramgen, Phase::Query, Phase::Total] {
                    out.push(row(phase, h, w, ratio, f64::NAN, 0, "oom"));
                }
            }
            continue;
        }
        let image = synth_dataset(1, h, w, cfg.seed).remove(0);
        for &ratio in &cfg.mask_ratios {
            let mask = mask_with_ratio(h, w, ratio, cfg.seed)?;
            let input = MaskedImage::new(image.clone(), mask)?;
            let measured = (|| -> Result<[BenchRecord; 3]> {
                let (t_gen, map) = time_median(cfg.repeats, || generate_parameters(gen, store, &input))?;
                let coords = hole_coords(&input.mask)?;
                let view = map.upsampled(h, w)?;
                let (t_q, q) = time_median(cfg.repeats, || query_pixels(&view, &coords, spec, cfg.workers))?;
                let (t_all, r) = time_median(cfg.repeats, || model.inpaint(store, &input, cfg.workers))?;
                Ok([
                    row(Phase::Paramgen, h, w, ratio, t_gen, 0, "ok"),
                    row(Phase::Query, h, w, ratio, t_q, q.rgb.len(), "ok"),
                    row(Phase::Total, h, w, ratio, t_all, r.decoded_pixels, "ok"),
                ])
            })();
            match measured {
                Ok(rows) => out.extend(rows),
                Err(e) => {
                    log::warn!("bench {h}x{w} ratio {ratio}: {e}");
                    for phase in [Phase::Paramgen, Phase::Query, Phase::Total] {
                        out.push(row(phase, h, w, ratio, f64::NAN, 0, "error"));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Full-image decode time of a transposed-conv baseline model at `h x w`,
/// starting from precomputed bottleneck features.
pub fn conv_decode_time(model: &Model, store: &ParamStore, h: usize, w: usize, repeats: usize, seed: u64) -> Result<BenchRecord> {
    let Decoder::Conv(dec) = &model.decoder else {
        return Err(Error::InvalidArgument("conv_decode_time needs the conv decoder".into()));
    };
    let image = synth_dataset(1, h, w, seed).remove(0).unsqueeze0();
    let mask = mask_with_ratio(h, w, 0.25, seed)?.unsqueeze0();
    let (x, _) = prepare_input(&image, &mask, model.config.generator.fixed_input_res)?;
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(x)?;
    let feat = model.generator.features(&mut g, store, xv)?;
    let feat = g.value(feat).clone();
    let (t, _) = time_median(repeats, || {
        let mut g = Graph::new(Mode::Eval);
        let f = g.constant(feat.clone())?;
        let out = dec.forward(&mut g, store, f, h, w)?;
        Ok(g.value(out).len())
    })?;
    Ok(row(Phase::ConvDecode, h, w, 0.25, t, h * w, "ok"))
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[BenchRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses `256`, `256x512` or `256,512x384` style lists into `(h, w)` pairs.
pub fn parse_resolutions(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|item| {
            let item = item.trim();
            let bad = || Error::InvalidArgument(format!("bad resolution '{item}'"));
            match item.split_once(['x', 'X']) {
                Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
                None => {
                    let v = item.parse().map_err(|_| bad())?;
                    Ok((v, v))
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::param_gen::GeneratorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Model, ParamStore) {
        let cfg = ModelConfig {
            generator: GeneratorConfig {
                fixed_input_res: 16,
                base_channels: 4,
                n_blocks: 1,
                ..GeneratorConfig::default()
            },
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let m = Model::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (m, store)
    }

    #[test]
    fn median_oracle() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn zero_ratio_row_decodes_nothing() {
        let (m, s) = tiny();
        let cfg = BenchConfig {
            resolutions: vec![(32, 32)],
            mask_ratios: vec![0.0, 0.25],
            repeats: 1,
            ..BenchConfig::default()
        };
        let rows = run(&m, &s, &cfg).unwrap();
        assert_eq!(rows.len(), 6);
        let q0 = rows.iter().find(|r| r.phase == Phase::Query && r.mask_ratio == 0.0).unwrap();
        assert_eq!(q0.decoded_pixels, 0);
        let q1 = rows.iter().find(|r| r.phase == Phase::Query && r.mask_ratio == 0.25).unwrap();
        assert_eq!(q1.decoded_pixels, 256);
        assert!(rows.iter().all(|r| r.wall_ms > 0.0 && r.status == "ok"));
    }

    #[test]
    fn over_budget_resolution_is_flagged_and_skipped() {
        let (m, s) = tiny();
        let cfg = BenchConfig {
            resolutions: vec![(64, 64), (32, 32)],
            mask_ratios: vec![0.1],
            repeats: 1,
            memory_budget: estimated_bytes(48, 48),
            ..BenchConfig::default()
        };
        let rows = run(&m, &s, &cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[..3].iter().all(|r| r.status == "oom"));
        assert!(rows[3..].iter().all(|r| r.status == "ok"));
    }

    #[test]
    fn csv_schema_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bench.csv");
        write_csv(&p, &[row(Phase::Query, 8, 8, 0.05, 1.5, 3, "ok")]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "phase,height,width,mask_ratio,wall_ms,decoded_pixels,status\nquery,8,8,0.05,1.5,3,ok\n");
    }

    #[test]
    fn resolution_lists() {
        assert_eq!(parse_resolutions("256,512x384").unwrap(), vec![(256, 256), (512, 384)]);
        assert!(parse_resolutions("a").is_err());
    }
}
