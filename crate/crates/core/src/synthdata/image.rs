use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::font::{self, GLYPH_H, GLYPH_W};
use super::SynthError;

/// Image geometry, `height x width x channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const DEFAULT: ImageShape = ImageShape { height: 32, width: 128, channels: 1 };

    pub fn num_values(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Corruption {
    Clean,
    Occluded,
    Blurred,
    Noisy,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [Corruption::Clean, Corruption::Occluded, Corruption::Blurred, Corruption::Noisy];

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::Clean => "clean",
            Corruption::Occluded => "occluded",
            Corruption::Blurred => "blurred",
            Corruption::Noisy => "noisy",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Corruption {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown corruption tag {s:?}"))
    }
}

/// Where a glyph was drawn: top-left corner and integer scale factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub ch: char,
    pub x: usize,
    pub y: usize,
    pub scale_x: usize,
    pub scale_y: usize,
}

impl GlyphBox {
    pub fn width(&self) -> usize {
        GLYPH_W * self.scale_x
    }

    pub fn height(&self) -> usize {
        GLYPH_H * self.scale_y
    }
}

/// A labeled image with values in `[-1, 1]`, stored `HWC` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TextImage {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub label: String,
    pub tags: BTreeSet<Corruption>,
    /// Glyph placements; empty for images read back from disk.
    pub layout: Vec<GlyphBox>,
}

impl TextImage {
    pub fn new(shape: ImageShape, pixels: Vec<f32>, label: impl Into<String>) -> Self {
        assert_eq!(pixels.len(), shape.num_values());
        Self { shape, pixels, label: label.into(), tags: BTreeSet::from([Corruption::Clean]), layout: Vec::new() }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.shape.width + x) * self.shape.channels + c]
    }

    fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let w = self.shape.width;
        let ch = self.shape.channels;
        self.pixels[(y * w + x) * ch + c] = v;
    }

    pub fn has_tag(&self, tag: Corruption) -> bool {
        self.tags.contains(&tag)
    }

    pub fn tags_string(&self) -> String {
        self.tags.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(",")
    }

    /// Bounding box `(x0, y0, x1, y1)` (exclusive ends) of the drawn text, or
    /// the whole image if the layout is unknown.
    pub fn text_region(&self) -> (usize, usize, usize, usize) {
        if self.layout.is_empty() {
            return (0, 0, self.shape.width, self.shape.height);
        }
        let x0 = self.layout.iter().map(|g| g.x).min().unwrap_or(0);
        let y0 = self.layout.iter().map(|g| g.y).min().unwrap_or(0);
        let x1 = self.layout.iter().map(|g| g.x + g.width()).max().unwrap_or(self.shape.width);
        let y1 = self.layout.iter().map(|g| g.y + g.height()).max().unwrap_or(self.shape.height);
        (x0, y0, x1, y1)
    }
}

/// Minimum foreground/background contrast in normalized units.
pub const MIN_CONTRAST: f32 = 0.5;
/// Largest left margin before the first glyph, in pixels. Word crops are
/// tight; placing text anywhere in the free width made desk-scale models
/// need several times more steps to locate characters.
pub const MAX_X_OFFSET: usize = 8;
/// Largest per-character vertical offset, in pixels.
pub const MAX_JITTER: usize = 2;

/// Draws `label` with the built-in font at a random position and contrast.
pub fn render<R: Rng + ?Sized>(label: &str, shape: ImageShape, rng: &mut R) -> Result<TextImage, SynthError> {
    let chars: Vec<char> = label.chars().collect();
    if chars.is_empty() {
        return Err(SynthError::EmptyLabel);
    }
    if let Some(&c) = chars.iter().find(|c| !font::has_glyph(**c)) {
        return Err(SynthError::NoGlyph(c));
    }
    let n = chars.len();
    let scale_y = ((shape.height.saturating_sub(2 * MAX_JITTER)) / GLYPH_H).clamp(1, 3);
    if GLYPH_H * scale_y > shape.height {
        return Err(SynthError::LabelTooWide { label: label.to_string(), width: shape.width });
    }
    // Widest horizontal scale whose text (one scaled column of spacing) fits;
    // tightly packed unit glyphs as a last resort.
    let (scale_x, gap) = [(2, 2), (1, 1), (1, 0)]
        .into_iter()
        .find(|&(s, g)| n * GLYPH_W * s + (n - 1) * g <= shape.width)
        .ok_or_else(|| SynthError::LabelTooWide { label: label.to_string(), width: shape.width })?;
    let text_w = n * GLYPH_W * scale_x + (n - 1) * gap;
    let glyph_h = GLYPH_H * scale_y;
    let x0 = rng.gen_range(0..=MAX_X_OFFSET.min(shape.width - text_w));
    let slack = shape.height - glyph_h;
    let base_y = if slack >= 2 * MAX_JITTER { rng.gen_range(MAX_JITTER..=slack - MAX_JITTER) } else { slack / 2 };

    let bg: f32 = rng.gen_range(-1.0..=1.0);
    let fg = loop {
        let f: f32 = rng.gen_range(-1.0..=1.0);
        if (f - bg).abs() >= MIN_CONTRAST {
            break f;
        }
    };

    let mut img = TextImage::new(shape, vec![bg; shape.num_values()], label);
    for (i, &ch) in chars.iter().enumerate() {
        let jitter = rng.gen_range(-(MAX_JITTER as i64)..=MAX_JITTER as i64);
        let y = (base_y as i64 + jitter).clamp(0, slack as i64) as usize;
        let x = x0 + i * (GLYPH_W * scale_x + gap);
        let gb = GlyphBox { ch, x, y, scale_x, scale_y };
        for gy in 0..gb.height() {
            for gx in 0..gb.width() {
                if font::ink(ch, gy / scale_y, gx / scale_x) == Some(true) {
                    for c in 0..shape.channels {
                        img.set(y + gy, x + gx, c, fg);
                    }
                }
            }
        }
        img.layout.push(gb);
    }
    Ok(img)
}

/// Largest fraction of the text region a full-severity occluder covers.
pub const MAX_OCCLUSION: f64 = 0.6;
const MIN_OCCLUSION: f64 = 0.1;

/// Applies one corruption. `severity = 0` leaves pixels untouched; tags are
/// updated either way.
pub fn corrupt<R: Rng + ?Sized>(img: &TextImage, kind: Corruption, severity: f64, rng: &mut R) -> TextImage {
    let severity = severity.clamp(0.0, 1.0);
    let mut out = img.clone();
    if kind != Corruption::Clean {
        out.tags.remove(&Corruption::Clean);
        out.tags.insert(kind);
    }
    if severity == 0.0 {
        return out;
    }
    match kind {
        Corruption::Clean => {}
        Corruption::Occluded => occlude(&mut out, severity, rng),
        Corruption::Blurred => blur(&mut out, 1.5 * severity),
        Corruption::Noisy => {
            let normal = Normal::new(0.0, 0.3 * severity).expect("finite std");
            for p in &mut out.pixels {
                *p = (*p + normal.sample(rng) as f32).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

fn occlude<R: Rng + ?Sized>(img: &mut TextImage, severity: f64, rng: &mut R) {
    let (x0, y0, x1, y1) = img.text_region();
    let (rw, rh) = (x1 - x0, y1 - y0);
    if rw == 0 || rh == 0 {
        return;
    }
    let hi = MAX_OCCLUSION * severity;
    let lo = MIN_OCCLUSION.min(hi);
    let frac = rng.gen_range(lo..=hi);
    let area = frac * (rw * rh) as f64;
    let h = ((rng.gen_range(0.5..=1.0) * rh as f64).round() as usize).clamp(1, rh);
    let w = ((area / h as f64).floor() as usize).clamp(1, rw);
    let h = h.min(((hi * (rw * rh) as f64) / w as f64).floor().max(1.0) as usize);
    let ox = x0 + rng.gen_range(0..=rw - w);
    let oy = y0 + rng.gen_range(0..=rh - h);
    let color: f32 = rng.gen_range(-1.0..=1.0);
    for y in oy..oy + h {
        for x in ox..ox + w {
            for c in 0..img.shape.channels {
                img.set(y, x, c, color);
            }
        }
    }
}

/// Separable Gaussian blur with clamped edges.
fn blur(img: &mut TextImage, sigma: f64) {
    if sigma < 1e-6 {
        return;
    }
    let radius = (2.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let ImageShape { height, width, channels } = img.shape;
    let src = img.clone();
    let mut tmp = vec![0f32; src.pixels.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let sx = (x as i64 + k as i64 - radius).clamp(0, width as i64 - 1) as usize;
                    acc += w * src.get(y, sx, c) as f64;
                }
                tmp[(y * width + x) * channels + c] = acc as f32;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let sy = (y as i64 + k as i64 - radius).clamp(0, height as i64 - 1) as usize;
                    acc += w * tmp[(sy * width + x) * channels + c] as f64;
                }
                img.set(y, x, c, (acc as f32).clamp(-1.0, 1.0));
            }
        }
    }
}
