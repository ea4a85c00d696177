//! Generates one parameter map and decodes it at several output sizes.
//! Pixels that land on the same continuous position agree across sizes.
//!
//! `cargo run --release --example multires`

use coordfill::coord_query::decode_at_resolution;
use coordfill::data::{mask_with_ratio, synth_dataset};
use coordfill::image_io::write_image;
use coordfill::model::{Model, ModelConfig};
use coordfill::param_gen::{generate_parameters, MaskedImage};
use coordfill::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coordfill::Result<()> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))?;
    let spec = &model.generator.config.mlp;
    let image = synth_dataset(1, 64, 64, 3).remove(0);
    let input = MaskedImage::new(image, mask_with_ratio(64, 64, 0.2, 3)?)?;
    let map = generate_parameters(&model.generator, &store, &input)?;
    println!("parameter grid {}x{}, {} values per cell", map.grid_h(), map.grid_w(), map.param_len());

    let base = decode_at_resolution(&map, 64, 64, spec)?;
    for k in [1, 2, 4, 8] {
        let (h, w) = (64 * k, 64 * k);
        let start = std::time::Instant::now();
        let out = decode_at_resolution(&map, h, w, spec)?;
        let took = start.elapsed();
        let mut worst = 0.0f32;
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let a = base.data()[(c * 64 + y) * 64 + x];
                    let b = out.data()[(c * h + k * y) * w + k * x];
                    worst = worst.max((a - b).abs());
                }
            }
        }
        println!("{h:>4}x{w:<4} decoded in {took:>10.2?}, max diff to 64x64 at shared points {worst:.1e}");
        write_image(format!("multires_{h}.png"), &out)?;
    }
    Ok(())
}
