//! Masked visual-linguistic reconstruction for text recognition: synthetic
//! data, attention-mask algebra, a small transformer with a hand-written
//! autodiff tape, two-phase training and greedy/refined decoding.

pub mod graph;
pub mod inference;
pub mod masking;
pub mod model;
pub mod objective;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod textcodec;
pub mod trainer;

pub use inference::{EvalReport, Prediction};
pub use masking::{AttentionMask, Permutation, VisualMaskPlan};
pub use model::{Model, ModelConfig, VisualCarry};
pub use synthdata::{Corruption, ImageShape, PatchSize, TextImage};
pub use tensor::Matrix;
pub use textcodec::{Charset, TokenId, TokenSeq};
pub use trainer::{Phase, PhaseConfig, Sample, TrainState};
