//! Fixtures shared by the criterion benches.

use mdc_core::training::textures;
use mdc_core::{Codec, FeatureTensor, Image, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy-width codec with untrained weights. Encoder output is scaled up so
/// the indices spread over all centers instead of collapsing into one bin.
pub fn toy_codec() -> Codec {
    let mut p = ModelParams::init(ModelConfig::toy(), 1).expect("toy config is valid");
    p.get_mut("enc.z.w").scale_assign(100.0);
    Codec::new(p)
}

pub fn texture(size: usize, seed: u64) -> Image {
    textures(1, size, size, seed).remove(0)
}

pub fn features(m: usize, n: usize, k: usize, seed: u64) -> FeatureTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..m * n * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    FeatureTensor::new(m, n, k, data).expect("sizes agree")
}
