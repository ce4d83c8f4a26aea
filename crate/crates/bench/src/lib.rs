//! Shared fixtures for the criterion benches under `benches/`.

use textrecon::model::{Model, ModelConfig};
use textrecon::synthdata::{patchify, render, PatchSize};
use textrecon::tensor::Matrix;
use textrecon::textcodec::Charset;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The default desk-scale configuration.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        dec_depth: 2,
        patch: PatchSize { height: 32, width: 4 },
        charset: Charset::prefix(16, 8).expect("valid prefix"),
        ..ModelConfig::default()
    }
}

pub fn desk_model() -> Model {
    Model::new(desk_config(), 0).expect("valid config")
}

/// Patch matrix of a rendered label.
pub fn patches_for(model: &Model, label: &str) -> Matrix {
    let cfg = model.config();
    let img = render(label, cfg.image, &mut ChaCha8Rng::seed_from_u64(1)).expect("renderable label");
    patchify(&img, cfg.patch).expect("divisible geometry").patches
}
