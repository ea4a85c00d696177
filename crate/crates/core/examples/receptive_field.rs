//! Impulse response support of an FFC block: a spectral branch spreads a
//! single input pixel over the whole grid, a plain local conv does not.
//!
//! `cargo run --release --example receptive_field`

use coordfill::ffc::{impulse_coverage, randomize_norms, FfcBlock, FfcConfig};
use coordfill::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coordfill::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for alpha in [0.0, 0.25, 0.5, 0.75] {
        let mut store = ParamStore::<f64>::new();
        let cfg = FfcConfig { alpha, ..FfcConfig::new(8, 8) };
        let block = FfcBlock::new(&mut store, "ffc", cfg, &mut rng)?;
        randomize_norms(&mut store, &mut rng);
        let cover = impulse_coverage(&block, &store, 32, 32, 1e-8)?;
        println!("alpha {alpha:.2}: impulse reaches {:.1}% of a 32x32 grid", 100.0 * cover);
    }
    Ok(())
}
