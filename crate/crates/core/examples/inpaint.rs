//! Fills a procedural image with a model checkpoint and writes the input,
//! mask and result as PNGs.
//!
//! `cargo run --release --example inpaint [checkpoint.cfck] [out_dir]`
//!
//! Without a checkpoint a freshly initialized model is used, which shows the
//! pipeline and timings but not meaningful fills.

use std::path::PathBuf;

use coordfill::checkpoint;
use coordfill::data::{generate_mask, synth_dataset, MaskSpec};
use coordfill::image_io::{write_image, write_mask};
use coordfill::model::{Model, ModelConfig};
use coordfill::param_gen::MaskedImage;
use coordfill::params::ParamStore;
use coordfill::train::mean_fill;
use coordfill::metrics::MetricReport;
use rand::SeedableRng;

fn main() -> coordfill::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model, store) = match args.next() {
        Some(p) => checkpoint::load(p)?,
        None => {
            let mut store = ParamStore::new();
            let m = Model::new(&mut store, ModelConfig::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
            (m, store)
        }
    };
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "inpaint_out".into()));
    std::fs::create_dir_all(&out_dir).map_err(|e| coordfill::Error::io(&out_dir, e))?;

    let (h, w) = (96, 128);
    let image = synth_dataset(1, h, w, 42).remove(0);
    let mask = generate_mask(&MaskSpec::default().with_seed(42), h, w)?;
    let input = MaskedImage::new(image.clone(), mask.clone())?;
    println!("{h}x{w} image, {:.1}% hole", 100.0 * input.hole_ratio());

    let r = model.inpaint(&store, &input, 2)?;
    println!(
        "paramgen {:.2?}  query {:.2?}  total {:.2?}  ({} pixels decoded, {} multiplies)",
        r.timings.paramgen, r.timings.query, r.timings.total, r.decoded_pixels, r.mults
    );
    for (name, out) in [("model", &r.image), ("mean fill", &mean_fill(&input))] {
        let m = MetricReport::compute(out, &image, &mask)?;
        println!("{name:>9}: masked PSNR {:.2} dB, masked SSIM {:.3}", m.psnr_masked, m.ssim_masked);
    }

    let mut holed = image.clone();
    let plane = h * w;
    for i in 0..plane {
        if mask.data()[i] > 0.5 {
            for c in 0..3 {
                holed.data_mut()[c * plane + i] = 1.0;
            }
        }
    }
    write_image(out_dir.join("input.png"), &holed)?;
    write_mask(out_dir.join("mask.png"), &mask)?;
    write_image(out_dir.join("output.png"), &r.image)?;
    write_image(out_dir.join("truth.png"), &image)?;
    println!("wrote {}/{{input,mask,output,truth}}.png", out_dir.display());
    Ok(())
}
