//! Synthetic labeled text images: rendering, corruption, patchification and
//! dataset persistence.

mod dataset;
pub mod font;
mod image;
mod patch;

use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{
    build_dataset, build_dataset_excluding, build_splits, dequantize, generate, generate_sample, load_dataset,
    quantize, read_manifest, read_pnm, split_seed, write_pnm, write_pnm_bytes, CorruptionMix, DatasetReader,
    DatasetSpec, ManifestEntry, IMAGE_DIR, MANIFEST,
};
pub use image::{corrupt, render, Corruption, GlyphBox, ImageShape, TextImage, MAX_JITTER, MAX_OCCLUSION, MIN_CONTRAST};
pub use patch::{patchify, patchify_pixels, unpatchify, unpatchify_matrix, PatchGrid, PatchSize};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("label must contain at least one character")]
    EmptyLabel,
    #[error("no glyph for character {0:?}")]
    NoGlyph(char),
    #[error("label {label:?} does not fit in {width} pixels")]
    LabelTooWide { label: String, width: usize },
    #[error("{height}x{width} image is not divisible into {patch_h}x{patch_w} patches")]
    IndivisibleGeometry { height: usize, width: usize, patch_h: usize, patch_w: usize },
    #[error("dataset must contain at least one sample")]
    EmptyDataset,
    #[error("invalid label length range {min}..={max}")]
    BadLengthRange { min: usize, max: usize },
    #[error("invalid corruption mix: {0}")]
    BadMix(String),
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("manifest line {line}: {reason}")]
    ManifestCorrupt { line: usize, reason: String },
    #[error("{path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
