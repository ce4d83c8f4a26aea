//! Greedy autoregressive decoding, cloze refinement, word accuracy and
//! reconstruction previews.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::masking::{build_cloze_mask, query_text_mask, AttentionMask, Permutation, VisualMaskPlan};
use crate::model::{Model, ModelError, VisualCache};
use crate::objective::NORM_PIX_EPS;
use crate::synthdata::{quantize, unpatchify_matrix, Corruption, ImageShape};
use crate::tensor::Matrix;
use crate::textcodec::{CodecError, TokenId, TokenSeq, EOS};
use crate::trainer::Sample;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("no trained parameters: {0}")]
    UntrainedParams(String),
    #[error("{predictions} predictions for {references} references")]
    CountMismatch { predictions: usize, references: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub text: String,
    /// Character ids, without the terminating EOS.
    pub token_ids: Vec<TokenId>,
    /// Probability of each emitted token, including the final EOS when one
    /// was emitted.
    pub confidences: Vec<f64>,
    pub refined: bool,
}

impl Prediction {
    pub fn mean_confidence(&self) -> f64 {
        if self.confidences.is_empty() {
            return 0.0;
        }
        self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
    }
}

/// Loads a model for decoding; a missing file is reported as untrained.
pub fn load_trained(path: &std::path::Path) -> Result<Model, InferenceError> {
    if !path.exists() {
        return Err(InferenceError::UntrainedParams(format!("{} does not exist", path.display())));
    }
    Ok(Model::load(path)?)
}

/// Highest-scoring token among EOS and the characters, lowest id on ties,
/// with its softmax probability over the whole vocabulary.
fn pick(model: &Model, logits: &[f64]) -> (TokenId, f64) {
    let n_chars = model.config().charset.num_chars();
    let mut best = EOS;
    for id in 1..=n_chars {
        if logits[id] > logits[best] {
            best = id;
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    (best, (logits[best] - max).exp() / z)
}

/// Lower-triangular mask for `rows` queries over `rows` context columns.
pub fn causal_mask(rows: usize) -> AttentionMask {
    AttentionMask::from_fn(rows, rows, |r, c| c <= r)
}

/// Decoding session over one image: the encoder and visual stream run once
/// and every later query pass reuses them.
pub struct Session<'m> {
    model: &'m Model,
    graph: Graph<'m>,
    vis: VisualCache,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, patches: &Matrix) -> Result<Self, InferenceError> {
        let mut graph = Graph::new(model.params());
        let plan = VisualMaskPlan::none(model.config().num_patches());
        let f_v = model.encode_image_graph(&mut graph, patches, &plan)?;
        let vis = model.visual_cache(&mut graph, f_v);
        Ok(Self { model, graph, vis })
    }

    /// Final-layer logits for context `[BOS, ids]` under `mask`.
    pub fn logits(&mut self, ids: &[TokenId], mask: &AttentionMask) -> Result<Matrix, InferenceError> {
        let seq = TokenSeq::new(ids.to_vec());
        let f_l = self.model.embed_text_graph(&mut self.graph, &seq)?;
        let text = self.model.text_cache(&mut self.graph, f_l);
        let layers = self.model.decode_graph(&mut self.graph, &self.vis, &text, mask, false)?;
        let l: Var = layers.last().expect("at least one layer").l;
        Ok(self.graph.value(l).clone())
    }
}

/// Greedy decoding; also returns the final-layer logit row used at each step.
pub fn greedy_decode_traced(model: &Model, patches: &Matrix) -> Result<(Prediction, Vec<Vec<f64>>), InferenceError> {
    let mut session = Session::new(model, patches)?;
    let max_len = model.config().max_label_len();
    let mut ids = Vec::new();
    let mut confidences = Vec::new();
    let mut steps = Vec::new();
    for t in 1..=max_len + 1 {
        let logits = session.logits(&ids, &causal_mask(t))?;
        let row = logits.row(t - 1).to_vec();
        let (id, p) = pick(model, &row);
        steps.push(row);
        confidences.push(p);
        if id == EOS || t > max_len {
            break;
        }
        ids.push(id);
        if ids.len() == max_len {
            break;
        }
    }
    let text = model.config().charset.decode(&ids)?;
    Ok((Prediction { text, token_ids: ids, confidences, refined: false }, steps))
}

pub fn greedy_decode(model: &Model, patches: &Matrix) -> Result<Prediction, InferenceError> {
    Ok(greedy_decode_traced(model, patches)?.0)
}

/// Final-layer logits of one full-sequence pass over `[BOS, prefix]` with
/// the causal (identity order) mask.
pub fn causal_logits(model: &Model, patches: &Matrix, prefix: &[TokenId]) -> Result<Matrix, InferenceError> {
    let mut session = Session::new(model, patches)?;
    session.logits(prefix, &causal_mask(prefix.len() + 1))
}

/// One cloze pass: every query sees the whole draft except its own token.
pub fn refine(model: &Model, patches: &Matrix, draft: &Prediction) -> Result<Prediction, InferenceError> {
    let mut session = Session::new(model, patches)?;
    refine_in(&mut session, draft)
}

fn refine_in(session: &mut Session<'_>, draft: &Prediction) -> Result<Prediction, InferenceError> {
    let model = session.model;
    let l = draft.token_ids.len();
    let logits = session.logits(&draft.token_ids, &build_cloze_mask(l + 1, l + 1))?;
    let mut ids = Vec::new();
    let mut confidences = Vec::new();
    for r in 0..=l {
        let (id, p) = pick(model, logits.row(r));
        confidences.push(p);
        if id == EOS {
            break;
        }
        ids.push(id);
    }
    ids.truncate(model.config().max_label_len());
    let text = model.config().charset.decode(&ids)?;
    Ok(Prediction { text, token_ids: ids, confidences, refined: true })
}

/// Greedy decoding followed by `refine_iters` cloze passes.
pub fn recognize(model: &Model, patches: &Matrix, refine_iters: usize) -> Result<Prediction, InferenceError> {
    let (mut pred, _) = greedy_decode_traced(model, patches)?;
    if refine_iters > 0 {
        let mut session = Session::new(model, patches)?;
        for _ in 0..refine_iters {
            pred = refine_in(&mut session, &pred)?;
        }
    }
    Ok(pred)
}

/// Fraction of exact matches, ignoring case.
pub fn word_accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], references: &[T]) -> Result<f64, InferenceError> {
    if predictions.len() != references.len() {
        return Err(InferenceError::CountMismatch { predictions: predictions.len(), references: references.len() });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.as_ref().to_lowercase() == r.as_ref().to_lowercase())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Ground truth, masked input and reconstruction of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Preview {
    pub shape: ImageShape,
    pub ground_truth: Vec<f32>,
    pub masked: Vec<f32>,
    pub reconstruction: Vec<f32>,
    /// Pixel MSE over masked patches: model and per-image mean baseline.
    pub masked_mse: f64,
    pub baseline_mse: f64,
}

impl Preview {
    /// The three panels stacked vertically as 8-bit values.
    pub fn composite(&self) -> (ImageShape, Vec<u8>) {
        let shape = ImageShape { height: self.shape.height * 3, ..self.shape };
        let bytes = [&self.ground_truth, &self.masked, &self.reconstruction].iter().flat_map(|p| p.iter().map(|&v| quantize(v))).collect();
        (shape, bytes)
    }
}

/// Reconstructs masked patches from the final layer's visual head. Visible
/// patches are copied through; masked patches in the middle panel are black.
pub fn reconstruct_preview(model: &Model, patches: &Matrix, plan: &VisualMaskPlan, seq: &TokenSeq) -> Result<Preview, InferenceError> {
    let cfg = model.config();
    let mask = query_text_mask(&Permutation::identity(seq.len()), &seq.masked_positions());
    let trace = model.forward(patches, plan, seq, &mask)?;
    let pred = &trace.last().v;
    let mut recon = patches.clone();
    let mut masked = patches.clone();
    let mean = patches.data().iter().sum::<f64>() / patches.len() as f64;
    let (mut err, mut base, mut count) = (0.0, 0.0, 0usize);
    for &i in plan.masked() {
        let truth = patches.row(i);
        let (mu, sd) = if cfg.norm_pix {
            let n = truth.len() as f64;
            let mu = truth.iter().sum::<f64>() / n;
            let var = truth.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            (mu, (var + NORM_PIX_EPS).sqrt())
        } else {
            (0.0, 1.0)
        };
        for (j, out) in recon.row_mut(i).iter_mut().enumerate() {
            *out = (pred.get(i, j) * sd + mu).clamp(-1.0, 1.0);
            err += (*out - truth[j]).powi(2);
            base += (mean - truth[j]).powi(2);
            count += 1;
        }
        masked.row_mut(i).iter_mut().for_each(|v| *v = -1.0);
    }
    let count = count.max(1) as f64;
    let (grid, c) = (cfg.grid_shape(), cfg.image.channels);
    Ok(Preview {
        shape: cfg.image,
        ground_truth: unpatchify_matrix(patches, grid, cfg.patch, c),
        masked: unpatchify_matrix(&masked, grid, cfg.patch, c),
        reconstruction: unpatchify_matrix(&recon, grid, cfg.patch, c),
        masked_mse: err / count,
        baseline_mse: base / count,
    })
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub filename: String,
    pub reference: String,
    pub prediction: String,
    pub correct: bool,
    pub mean_confidence: f64,
    pub tags: Vec<Corruption>,
}

impl EvalRecord {
    pub const HEADER: &'static str = "filename\treference\tprediction\tcorrect\tmean_confidence\ttags";

    pub fn to_line(&self) -> String {
        let tags: Vec<_> = self.tags.iter().map(|t| t.as_str()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            self.filename,
            self.reference,
            self.prediction,
            u8::from(self.correct),
            self.mean_confidence,
            tags.join(",")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn overall(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.correct).count() as f64 / self.records.len() as f64
    }

    /// `(correct, total)` per corruption tag.
    pub fn by_tag(&self) -> BTreeMap<Corruption, (usize, usize)> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            for &t in &r.tags {
                let e = out.entry(t).or_insert((0, 0));
                e.0 += usize::from(r.correct);
                e.1 += 1;
            }
        }
        out
    }

    pub fn accuracy_for(&self, tag: Corruption) -> Option<f64> {
        self.by_tag().get(&tag).map(|&(c, n)| c as f64 / n as f64)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>9}", "subset", "correct", "total", "accuracy");
        for (tag, (c, n)) in self.by_tag() {
            let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8.2}%", tag.as_str(), c, n, 100.0 * c as f64 / n as f64);
        }
        let c = self.records.iter().filter(|r| r.correct).count();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8.2}%", "overall", c, self.records.len(), 100.0 * self.overall());
        s
    }

    pub fn records_tsv(&self) -> String {
        let mut s = String::from(EvalRecord::HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }
}

/// Recognizes every sample; `names[i]` labels record `i`.
pub fn evaluate(model: &Model, samples: &[Sample], names: &[String], refine_iters: usize) -> Result<EvalReport, InferenceError> {
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let pred = recognize(model, &s.patches, refine_iters)?;
        records.push(EvalRecord {
            filename: names.get(i).cloned().unwrap_or_else(|| i.to_string()),
            reference: s.label.clone(),
            correct: pred.text.to_lowercase() == s.label.to_lowercase(),
            mean_confidence: pred.mean_confidence(),
            prediction: pred.text,
            tags: s.tags.clone(),
        });
    }
    Ok(EvalReport { records })
}
