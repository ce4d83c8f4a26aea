use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::synthdata::{ImageShape, PatchSize};
use crate::textcodec::Charset;

/// What the visual stream carries from one decoder layer into the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualCarry {
    /// The next layer reads the post-self-attention state `H_v`; the
    /// query-conditioned visual update only feeds the visual head. Query rows
    /// then never see text they are not allowed to see.
    LeakFree,
    /// The next layer reads the query-conditioned visual update. Every visual
    /// row has attended to every query, so from the second layer on masked
    /// text reaches all queries.
    Literal,
}

impl VisualCarry {
    pub fn as_str(self) -> &'static str {
        match self {
            VisualCarry::LeakFree => "leak-free",
            VisualCarry::Literal => "literal",
        }
    }
}

impl fmt::Display for VisualCarry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VisualCarry {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "leak-free" => Ok(VisualCarry::LeakFree),
            "literal" => Ok(VisualCarry::Literal),
            _ => Err(format!("unknown visual carry {s:?} (expected leak-free or literal)")),
        }
    }
}

/// Architecture and objective hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Hidden width of every feed-forward sublayer as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub image: ImageShape,
    pub patch: PatchSize,
    pub charset: Charset,
    pub r_v: f64,
    pub r_l: f64,
    pub lambda_v: f64,
    pub lambda_l: f64,
    pub num_perms: usize,
    pub shared_heads: bool,
    /// Visual targets standardized per patch instead of raw pixels.
    pub norm_pix: bool,
    pub visual_carry: VisualCarry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            enc_depth: 2,
            dec_depth: 4,
            ffn_mult: 4,
            image: ImageShape::DEFAULT,
            patch: PatchSize::DEFAULT,
            charset: Charset::default(),
            r_v: 0.75,
            r_l: 0.2,
            lambda_v: 1.0,
            lambda_l: 1.0,
            num_perms: 6,
            shared_heads: true,
            norm_pix: false,
            visual_carry: VisualCarry::LeakFree,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.dec_depth == 0 {
            return bad("decoder depth must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be at least 1".into());
        }
        let (h, w) = (self.image.height, self.image.width);
        if self.patch.height == 0 || self.patch.width == 0 || h % self.patch.height != 0 || w % self.patch.width != 0 {
            return bad(format!("{h}x{w} image is not divisible into {}x{} patches", self.patch.height, self.patch.width));
        }
        if self.image.channels == 0 {
            return bad("image needs at least one channel".into());
        }
        for (name, r) in [("r_v", self.r_v), ("r_l", self.r_l)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} = {r} must lie in [0, 1)"));
            }
        }
        for (name, l) in [("lambda_v", self.lambda_v), ("lambda_l", self.lambda_l)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} = {l} must be finite and non-negative"));
            }
        }
        if self.num_perms == 0 {
            return bad("num_perms must be at least 1".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image.height / self.patch.height) * (self.image.width / self.patch.width)
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.image.height / self.patch.height, self.image.width / self.patch.width)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.height * self.patch.width * self.image.channels
    }

    pub fn max_label_len(&self) -> usize {
        self.charset.max_label_len()
    }

    /// Number of query slots: one per character plus the EOS slot.
    pub fn max_queries(&self) -> usize {
        self.max_label_len() + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.charset.vocab_size()
    }

    /// Whether every decoder layer reads the same language-free visual stream.
    pub fn visual_stream_is_shared(&self) -> bool {
        self.visual_carry == VisualCarry::LeakFree
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("dec_depth", self.dec_depth.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("height", self.image.height.to_string()),
            ("width", self.image.width.to_string()),
            ("channels", self.image.channels.to_string()),
            ("patch_h", self.patch.height.to_string()),
            ("patch_w", self.patch.width.to_string()),
            ("charset", self.charset.as_string()),
            ("max_label_len", self.max_label_len().to_string()),
            ("r_v", format!("{:?}", self.r_v)),
            ("r_l", format!("{:?}", self.r_l)),
            ("lambda_v", format!("{:?}", self.lambda_v)),
            ("lambda_l", format!("{:?}", self.lambda_l)),
            ("num_perms", self.num_perms.to_string()),
            ("shared_heads", self.shared_heads.to_string()),
            ("norm_pix", self.norm_pix.to_string()),
            ("visual_carry", self.visual_carry.to_string()),
        ]
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("malformed config line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| ModelError::InvalidConfig(format!("missing key {k}")));
        fn num<T: FromStr>(k: &str, v: String) -> Result<T, ModelError> {
            v.parse().map_err(|_| ModelError::InvalidConfig(format!("bad value {v:?} for {k}")))
        }
        let d_model = num("d_model", take("d_model")?)?;
        let n_heads = num("n_heads", take("n_heads")?)?;
        let enc_depth = num("enc_depth", take("enc_depth")?)?;
        let dec_depth = num("dec_depth", take("dec_depth")?)?;
        let ffn_mult = num("ffn_mult", take("ffn_mult")?)?;
        let image = ImageShape {
            height: num("height", take("height")?)?,
            width: num("width", take("width")?)?,
            channels: num("channels", take("channels")?)?,
        };
        let patch = PatchSize { height: num("patch_h", take("patch_h")?)?, width: num("patch_w", take("patch_w")?)? };
        let chars = take("charset")?;
        let max_len = num("max_label_len", take("max_label_len")?)?;
        let charset = Charset::new(&chars, max_len).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let cfg = Self {
            d_model,
            n_heads,
            enc_depth,
            dec_depth,
            ffn_mult,
            image,
            patch,
            charset,
            r_v: num("r_v", take("r_v")?)?,
            r_l: num("r_l", take("r_l")?)?,
            lambda_v: num("lambda_v", take("lambda_v")?)?,
            lambda_l: num("lambda_l", take("lambda_l")?)?,
            num_perms: num("num_perms", take("num_perms")?)?,
            shared_heads: num("shared_heads", take("shared_heads")?)?,
            norm_pix: num("norm_pix", take("norm_pix")?)?,
            visual_carry: take("visual_carry")?.parse().map_err(ModelError::InvalidConfig)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(ModelError::InvalidConfig(format!("unknown key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fields that differ from `other`, as `key: ours != theirs`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| format!("{k}: {a} != {b}"))
            .collect()
    }
}
