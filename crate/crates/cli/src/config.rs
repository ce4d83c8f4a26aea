//! Flat run configuration: a TOML file of `key = value` pairs, overridable
//! per flag.

use std::path::Path;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use textrecon::model::{ModelConfig, VisualCarry};
use textrecon::synthdata::{CorruptionMix, DatasetSpec, ImageShape, PatchSize};
use textrecon::textcodec::Charset;
use textrecon::trainer::PhaseConfig;

const DEFAULT_CHARSET: &str = "abcdefghijklmnop";

macro_rules! run_config {
    ($( #[doc = $doc:literal] $field:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of a run. Missing keys take their defaults; unknown
        /// keys are rejected.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        /// Per-flag overrides of [`RunConfig`]; a flag beats the config file.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct Overrides {
            $( #[doc = $doc] #[arg(long, help_heading = "Config overrides")] pub $field: Option<$ty>, )*
        }

        impl Overrides {
            pub fn apply(&self, cfg: &mut RunConfig) {
                $( if let Some(v) = &self.$field { cfg.$field = v.clone(); } )*
            }
        }
    };
}

run_config! {
    /// Model width [default: 32]
    d_model: usize = 32,
    /// Attention heads [default: 4]
    n_heads: usize = 4,
    /// Encoder blocks [default: 2]
    enc_depth: usize = 2,
    /// Decoder layers [default: 2]
    dec_depth: usize = 2,
    /// Feed-forward width as a multiple of d_model [default: 4]
    ffn_mult: usize = 4,
    /// Image height in pixels [default: 32]
    height: usize = 32,
    /// Image width in pixels [default: 128]
    width: usize = 128,
    /// Image channels, 1 or 3 [default: 1]
    channels: usize = 1,
    /// Patch height [default: 32]
    patch_h: usize = 32,
    /// Patch width [default: 4]
    patch_w: usize = 4,
    /// Character set, one symbol per char [default: abcdefghijklmnop]
    charset: String = DEFAULT_CHARSET.to_string(),
    /// Shortest generated label [default: 1]
    min_len: usize = 1,
    /// Longest label; also the decoder's length budget [default: 8]
    max_len: usize = 8,
    /// Number of samples to generate [default: 10000]
    n: usize = 10_000,
    /// Corruption mix as name=fraction pairs [default: clean=0.7,occluded=0.1,blurred=0.1,noisy=0.1]
    mix: String = "clean=0.7,occluded=0.1,blurred=0.1,noisy=0.1".to_string(),
    /// Patch masking ratio in pretraining [default: 0.75]
    r_v: f64 = 0.75,
    /// Character masking ratio in pretraining [default: 0.2]
    r_l: f64 = 0.2,
    /// Visual loss weight [default: 1]
    lambda_v: f64 = 1.0,
    /// Linguistic loss weight [default: 1]
    lambda_l: f64 = 1.0,
    /// Permutations per sample in fine-tuning [default: 6]
    num_perms: usize = 6,
    /// One head pair for all decoder layers [default: true]
    shared_heads: bool = true,
    /// Standardize visual targets per patch [default: false]
    norm_pix: bool = false,
    /// Visual stream wiring between decoder layers, leak-free or literal [default: leak-free]
    visual_carry: String = "leak-free".to_string(),
    /// Pretraining epochs [default: 20]
    mvlr_epochs: usize = 20,
    /// Fine-tuning epochs [default: 20]
    finetune_epochs: usize = 20,
    /// Pretraining step budget, 0 derives it from epochs [default: 0]
    mvlr_steps: usize = 0,
    /// Fine-tuning step budget, 0 derives it from epochs [default: 0]
    finetune_steps: usize = 0,
    /// Peak pretraining learning rate [default: 0.003]
    mvlr_lr: f64 = 3e-3,
    /// Peak fine-tuning learning rate [default: 0.003]
    finetune_lr: f64 = 3e-3,
    /// Samples per optimizer step [default: 32]
    batch_size: usize = 32,
    /// AdamW decoupled weight decay [default: 0.01]
    weight_decay: f64 = 0.01,
    /// Global gradient-norm clip, 0 disables [default: 1]
    clip_norm: f64 = 1.0,
    /// Save a resumable checkpoint every this many steps, 0 only at phase end [default: 0]
    checkpoint_every: usize = 0,
    /// Iterative refinement passes at evaluation [default: 1]
    refine_iters: usize = 1,
    /// Seed for data generation, initialization and training [default: 0]
    seed: u64 = 0,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).map_err(|e| anyhow!("{}: {}", p.display(), e.message()))?
            }
            None => Self::default(),
        };
        overrides.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn charset(&self) -> anyhow::Result<Charset> {
        Ok(Charset::new(&self.charset, self.max_len)?)
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let visual_carry: VisualCarry = self.visual_carry.parse().map_err(|e: String| anyhow!(e))?;
        let cfg = ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            enc_depth: self.enc_depth,
            dec_depth: self.dec_depth,
            ffn_mult: self.ffn_mult,
            image: self.image_shape(),
            patch: PatchSize { height: self.patch_h, width: self.patch_w },
            charset: self.charset()?,
            r_v: self.r_v,
            r_l: self.r_l,
            lambda_v: self.lambda_v,
            lambda_l: self.lambda_l,
            num_perms: self.num_perms,
            shared_heads: self.shared_heads,
            norm_pix: self.norm_pix,
            visual_carry,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape { height: self.height, width: self.width, channels: self.channels }
    }

    pub fn dataset_spec(&self) -> anyhow::Result<DatasetSpec> {
        let mut spec = DatasetSpec::new(self.n, self.charset()?, self.seed);
        spec.min_len = self.min_len;
        spec.max_len = self.max_len;
        spec.mix = CorruptionMix::parse(&self.mix)?;
        spec.shape = self.image_shape();
        Ok(spec)
    }

    fn tune(&self, mut pc: PhaseConfig, steps: usize) -> PhaseConfig {
        pc.batch_size = self.batch_size;
        pc.weight_decay = self.weight_decay;
        pc.clip_norm = (self.clip_norm > 0.0).then_some(self.clip_norm);
        pc.max_steps = (steps > 0).then_some(steps);
        pc
    }

    pub fn mvlr_phase(&self, cfg: &ModelConfig) -> PhaseConfig {
        self.tune(PhaseConfig::mvlr(cfg, self.mvlr_epochs, self.mvlr_lr, self.seed), self.mvlr_steps)
    }

    pub fn finetune_phase(&self, cfg: &ModelConfig) -> PhaseConfig {
        self.tune(PhaseConfig::finetune(cfg, self.finetune_epochs, self.finetune_lr, self.seed), self.finetune_steps)
    }
}
