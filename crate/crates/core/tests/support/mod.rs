//! Gradient-check fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use textrecon::model::{Model, ModelConfig};
use textrecon::synthdata::{generate, DatasetSpec, ImageShape, PatchSize};
use textrecon::textcodec::Charset;
use textrecon::trainer::{prepare_samples, sample_gradient, sample_loss, PhaseConfig, Sample};

pub fn config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_depth: 2,
        dec_depth: 2,
        ffn_mult: 2,
        image: ImageShape { height: 8, width: 32, channels: 1 },
        patch: PatchSize { height: 4, width: 8 },
        charset: Charset::prefix(6, 4).unwrap(),
        r_v: 0.5,
        r_l: 0.5,
        ..ModelConfig::default()
    }
}

pub fn sample(cfg: &ModelConfig) -> Sample {
    let mut spec = DatasetSpec::new(1, cfg.charset.clone(), 4);
    spec.shape = cfg.image;
    spec.min_len = 3;
    spec.max_len = 3;
    spec.mix = textrecon::synthdata::CorruptionMix::CLEAN;
    prepare_samples(&generate(&spec, &HashSet::new()).unwrap(), cfg).unwrap().remove(0)
}

/// Worst relative error over parameter tensors.
pub fn check(pc: &PhaseConfig) -> (f64, String) {
    let cfg = config();
    let mut model = Model::new(cfg.clone(), 1).unwrap();
    // Larger weights than the default init so every gradient is well above
    // finite-difference noise.
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    let s = sample(&cfg);
    let (_, grads) = sample_gradient(&model, &s, pc, 3).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let name = model.params().name(id).to_string();
        let n = model.params().get(id).len();
        let (mut diff2, mut num2, mut ana2) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = sample_loss(&model, &s, pc, 3).unwrap();
            model.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = sample_loss(&model, &s, pc, 3).unwrap();
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = grads.get(id).data()[k];
            diff2 += (num - ana) * (num - ana);
            num2 += num * num;
            ana2 += ana * ana;
        }
        let scale = num2.sqrt().max(ana2.sqrt());
        let rel = if scale < 1e-9 { diff2.sqrt() } else { diff2.sqrt() / scale };
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}
