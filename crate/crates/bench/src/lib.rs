//! Fixtures shared by the `kernels` benchmarks.

use dugi_core::masking::TokenSource;
use dugi_core::synth::{synth_image, SynthParams};
use dugi_core::{GrayImage, MaskSelection, MaskStrategy, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic synthetic image of side `size`.
pub fn image(size: usize, seed: u64) -> GrayImage {
    let params = SynthParams {
        size,
        ..SynthParams::default()
    };
    synth_image(&params, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Default-config model, an input image and its entropy mask.
pub fn model_fixture(seed: u64) -> (Model, GrayImage, MaskSelection) {
    let config = ModelConfig::default();
    let size = config.input_size;
    let model = Model::new(config, seed).expect("default config is valid");
    let img = image(size, seed);
    let mask = model
        .select_units(
            &img,
            model.config.mask_lambda,
            MaskStrategy::Entropy,
            TokenSource::RawPixels,
            None,
        )
        .expect("entropy mask needs no rng");
    (model, img, mask)
}
