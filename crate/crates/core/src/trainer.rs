//! Two-phase training: masked visual-linguistic pretraining, then
//! fine-tuning on full images with permuted autoregressive targets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::Graph;
use crate::masking::{query_text_mask, sample_linguistic_mask, sample_permutations, sample_visual_mask, Permutation, VisualMaskPlan};
use crate::model::{read_checkpoint, write_checkpoint, Model, ModelConfig, ModelError};
use crate::objective::{all_target_rows, linguistic_loss_graph, masked_target_rows, visual_loss_graph, visual_targets, ObjectiveError};
use crate::params::{GradStore, ParamStore};
use crate::synthdata::{patchify, Corruption, SynthError, TextImage};
use crate::tensor::Matrix;
use crate::textcodec::{CodecError, TokenSeq};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    DivergenceDetected { step: usize },
    #[error("sample {index} ({label:?}): {source}")]
    BadSample { index: usize, label: String, source: CodecError },
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint has no training state: {0}")]
    MissingState(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Mvlr,
    FineTune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Mvlr => "mvlr",
            Phase::FineTune => "finetune",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Phase::Mvlr => 0x6d76_6c72,
            Phase::FineTune => 0x6674_756e,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mvlr" => Ok(Phase::Mvlr),
            "finetune" => Ok(Phase::FineTune),
            _ => Err(format!("unknown phase {s:?}")),
        }
    }
}

/// Settings of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// Overrides `epochs * ceil(n / batch_size)` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr_init: f64,
    pub r_v_eff: f64,
    pub r_l_eff: f64,
    pub lambda_v_eff: f64,
    pub lambda_l: f64,
    /// Permutations per sample in fine-tuning; pretraining draws one per batch.
    pub permutations: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl PhaseConfig {
    pub fn mvlr(cfg: &ModelConfig, epochs: usize, lr_init: f64, seed: u64) -> Self {
        Self {
            phase: Phase::Mvlr,
            epochs,
            max_steps: None,
            batch_size: 64,
            lr_init,
            r_v_eff: cfg.r_v,
            r_l_eff: cfg.r_l,
            lambda_v_eff: cfg.lambda_v,
            lambda_l: cfg.lambda_l,
            permutations: 1,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            seed,
        }
    }

    pub fn finetune(cfg: &ModelConfig, epochs: usize, lr_init: f64, seed: u64) -> Self {
        Self {
            phase: Phase::FineTune,
            r_v_eff: 0.0,
            r_l_eff: 0.0,
            lambda_v_eff: 0.0,
            permutations: cfg.num_perms,
            ..Self::mvlr(cfg, epochs, lr_init, seed)
        }
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.max_steps.unwrap_or_else(|| self.epochs * n_samples.div_ceil(self.batch_size.max(1)))
    }
}

/// A training example ready for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub patches: Matrix,
    pub seq: TokenSeq,
    pub label: String,
    pub tags: Vec<Corruption>,
}

pub fn prepare_sample(img: &TextImage, cfg: &ModelConfig) -> Result<Sample, TrainError> {
    prepare_indexed(0, img, cfg)
}

fn prepare_indexed(index: usize, img: &TextImage, cfg: &ModelConfig) -> Result<Sample, TrainError> {
    let grid = patchify(img, cfg.patch)?;
    let seq = cfg.charset.encode(&img.label).map_err(|source| TrainError::BadSample { index, label: img.label.clone(), source })?;
    if seq.is_empty() {
        return Err(TrainError::BadSample { index, label: img.label.clone(), source: CodecError::TooLong { len: 0, max: 0 } });
    }
    Ok(Sample { patches: grid.patches, seq, label: img.label.clone(), tags: img.tags.iter().copied().collect() })
}

pub fn prepare_samples(images: &[TextImage], cfg: &ModelConfig) -> Result<Vec<Sample>, TrainError> {
    images.iter().enumerate().map(|(i, img)| prepare_indexed(i, img, cfg)).collect()
}

pub const WARMUP_FRACTION: f64 = 0.1;
pub const START_FACTOR: f64 = 1.0 / 25.0;
pub const FINAL_FACTOR: f64 = 1.0 / 1000.0;

/// One-cycle schedule: linear warmup from `lr/25` to `lr` over the first
/// tenth of the steps, then cosine decay to `lr/1000`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_init: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let s = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = WARMUP_FRACTION * total;
    if s < warm {
        let start = lr_init * START_FACTOR;
        start + (lr_init - start) * s / warm
    } else {
        let end = lr_init * FINAL_FACTOR;
        let progress = if total > warm { (s - warm) / (total - warm) } else { 1.0 };
        end + (lr_init - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: GradStore,
    pub v: GradStore,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One update. `decayed[i]` says whether parameter `i` gets weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64, weight_decay: f64, decayed: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = self.v.get_mut(id).data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let wd = if decayed[id.index()] { weight_decay } else { 0.0 };
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            for ((p, &m), &v) in params.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *p -= lr * (update + wd * *p);
            }
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub phase: Phase,
    /// Steps completed in the current phase.
    pub step: usize,
    pub best_loss: Option<f64>,
}

impl TrainState {
    pub fn new(model: Model, phase: Phase) -> Self {
        let opt = AdamW::new(model.params());
        Self { model, opt, phase, step: 0, best_loss: None }
    }

    /// Starts a new phase from the current parameters with fresh moments.
    pub fn into_phase(self, phase: Phase) -> Self {
        Self::new(self.model, phase)
    }
}

/// Per-step log record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub l_v: f64,
    pub l_l: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step={} phase={} lr={:e} L_v={:?} L_l={:?} total={:?} wall_ms={:.3}",
            self.step, self.phase, self.lr, self.l_v, self.l_l, self.total, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let fields: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        Some(Self {
            step: fields.get("step")?.parse().ok()?,
            phase: fields.get("phase")?.parse().ok()?,
            lr: fields.get("lr")?.parse().ok()?,
            l_v: fields.get("L_v")?.parse().ok()?,
            l_l: fields.get("L_l")?.parse().ok()?,
            total: fields.get("total")?.parse().ok()?,
            wall_ms: fields.get("wall_ms")?.parse().ok()?,
        })
    }
}

/// Whether to keep training after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Order in which samples are visited during `epoch`.
fn epoch_order(n: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ phase.stream_tag());
    rng.set_stream(u64::MAX - epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn step_rng(seed: u64, phase: Phase, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ phase.stream_tag());
    rng.set_stream(step as u64);
    rng
}

/// Loss terms of one sample, already backpropagated into `grads`.
struct SampleLoss {
    l_v: Option<f64>,
    l_l: f64,
    total: f64,
}

fn train_sample<R: Rng>(
    model: &Model,
    sample: &Sample,
    pc: &PhaseConfig,
    batch_perm: Option<&Permutation>,
    grad_scale: f64,
    grads: &mut GradStore,
    rng: &mut R,
) -> Result<SampleLoss, TrainError> {
    let cfg = model.config();
    let n = cfg.num_patches();
    let len = sample.seq.len();
    let plan = if pc.r_v_eff > 0.0 { sample_visual_mask(n, pc.r_v_eff, rng) } else { VisualMaskPlan::none(n) };
    let seq = sample_linguistic_mask(&sample.seq, pc.r_l_eff, rng);
    let masked = seq.masked_positions();
    let perms = match batch_perm {
        Some(p) => vec![p.restrict(len)],
        None => sample_permutations(len, pc.permutations.max(1), rng),
    };
    let masks: Vec<_> = perms.iter().map(|p| query_text_mask(p, &masked)).collect();
    let want_visual = pc.lambda_v_eff > 0.0 && !plan.masked().is_empty();

    let mut g = Graph::new(model.params());
    let all = model.forward_graph(&mut g, &sample.patches, &plan, &seq, &masks, want_visual)?;
    let targets = seq.targets();
    let rows = if masked.is_empty() { all_target_rows(&seq) } else { masked_target_rows(&seq) };
    let mut terms = Vec::new();
    let mut l_l = 0.0;
    let w = 1.0 / all.len() as f64;
    for layers in &all {
        let ll = linguistic_loss_graph(&mut g, layers, &targets, &rows)?;
        l_l += w * g.scalar(ll);
        terms.push((ll, w * pc.lambda_l));
    }
    let mut l_v = None;
    if want_visual {
        let t = visual_targets(&sample.patches, cfg.norm_pix);
        let lv = visual_loss_graph(&mut g, &all[0], &t, &plan).expect("visual branch requested");
        l_v = Some(g.scalar(lv));
        terms.push((lv, pc.lambda_v_eff));
    }
    let total = g.weighted_sum(&terms);
    let total_value = g.scalar(total);
    if total_value.is_finite() {
        g.backward(total, grad_scale, grads);
    }
    Ok(SampleLoss { l_v, l_l, total: total_value })
}

fn clip(grads: &mut GradStore, max_norm: f64) {
    let norm = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// Trains until the phase's step budget is spent or `on_step` says stop.
/// Resumes from `state.step`; the batch contents and random draws of step
/// `s` depend only on `(seed, phase, s)`, so an interrupted run resumed from
/// a checkpoint continues identically.
pub fn run_phase(
    samples: &[Sample],
    pc: &PhaseConfig,
    mut state: TrainState,
    mut on_step: impl FnMut(&StepRecord, &TrainState) -> Flow,
) -> Result<TrainState, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let bs = pc.batch_size.max(1).min(samples.len());
    let per_epoch = samples.len().div_ceil(bs);
    let total_steps = pc.total_steps(samples.len());
    let decayed = {
        let mut d = vec![false; state.model.params().len()];
        for id in state.model.decayed_params() {
            d[id.index()] = true;
        }
        d
    };
    let max_len = state.model.config().max_label_len();
    let mut grads = state.model.params().zeros_like();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < total_steps {
        let started = Instant::now();
        let step = state.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(samples.len(), pc.seed, pc.phase, epoch);
            order_epoch = epoch;
        }
        let start = (step % per_epoch) * bs;
        let batch = &order[start..(start + bs).min(samples.len())];
        let mut rng = step_rng(pc.seed, pc.phase, step);
        let batch_perm = (pc.phase == Phase::Mvlr).then(|| {
            if rng.gen_bool(0.5) {
                Permutation::identity(max_len)
            } else {
                Permutation::random(max_len, &mut rng)
            }
        });

        grads.zero();
        let scale = 1.0 / batch.len() as f64;
        let (mut l_v, mut n_v, mut l_l, mut total) = (0.0, 0usize, 0.0, 0.0);
        for &i in batch {
            let s = train_sample(&state.model, &samples[i], pc, batch_perm.as_ref(), scale, &mut grads, &mut rng)?;
            if let Some(v) = s.l_v {
                l_v += v;
                n_v += 1;
            }
            l_l += s.l_l * scale;
            total += s.total * scale;
        }
        if !total.is_finite() {
            return Err(TrainError::DivergenceDetected { step });
        }
        if let Some(c) = pc.clip_norm {
            clip(&mut grads, c);
        }
        let lr = lr_schedule(step, total_steps, pc.lr_init);
        state.opt.step(state.model.params_mut(), &grads, lr, pc.weight_decay, &decayed);
        state.step += 1;
        state.best_loss = Some(state.best_loss.map_or(total, |b| b.min(total)));
        let record = StepRecord {
            step,
            phase: pc.phase,
            lr,
            l_v: if n_v > 0 { l_v / n_v as f64 } else { 0.0 },
            l_l,
            total,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if on_step(&record, &state) == Flow::Stop {
            break;
        }
    }
    Ok(state)
}

/// Gradient of one phase's loss on a single sample with fixed random draws;
/// used for gradient checks and for inspecting which parameters learn.
pub fn sample_gradient(model: &Model, sample: &Sample, pc: &PhaseConfig, seed: u64) -> Result<(f64, GradStore), TrainError> {
    let mut grads = model.params().zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = (pc.phase == Phase::Mvlr).then(|| Permutation::random(sample.seq.len(), &mut rng));
    let loss = train_sample(model, sample, pc, perm.as_ref(), 1.0, &mut grads, &mut rng)?;
    Ok((loss.total, grads))
}

/// Loss of [`sample_gradient`] without the backward pass.
pub fn sample_loss(model: &Model, sample: &Sample, pc: &PhaseConfig, seed: u64) -> Result<f64, TrainError> {
    Ok(sample_gradient(model, sample, pc, seed)?.0)
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Writes parameters plus optimizer moments and step counters.
pub fn save_state(path: &Path, state: &TrainState) -> Result<(), TrainError> {
    let mut ckpt = state.model.to_checkpoint();
    let params = state.model.params();
    for (id, name, _) in params.iter() {
        ckpt.tensors.push((format!("{ADAM_M}{name}"), state.opt.m.get(id).clone()));
        ckpt.tensors.push((format!("{ADAM_V}{name}"), state.opt.v.get(id).clone()));
    }
    ckpt.meta.insert("phase".into(), state.phase.to_string());
    ckpt.meta.insert("step".into(), state.step.to_string());
    ckpt.meta.insert("adam_t".into(), state.opt.t.to_string());
    if let Some(b) = state.best_loss {
        ckpt.meta.insert("best_loss".into(), format!("{b:?}"));
    }
    write_checkpoint(path, &ckpt)?;
    Ok(())
}

/// Restores a training state. When `expected` is given its config must
/// match the checkpoint's exactly. A checkpoint without optimizer state
/// yields fresh moments at step 0.
pub fn restore_state(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState, TrainError> {
    let ckpt = read_checkpoint(path)?;
    if let Some(cfg) = expected {
        let diff = cfg.diff(&ckpt.config);
        if !diff.is_empty() {
            return Err(TrainError::ConfigMismatch(diff.join(", ")));
        }
    }
    let model = Model::from_checkpoint(&ckpt)?;
    let phase = match ckpt.meta.get("phase") {
        Some(p) => p.parse().map_err(TrainError::MissingState)?,
        None => Phase::Mvlr,
    };
    let mut state = TrainState::new(model, phase);
    let Some(step) = ckpt.meta.get("step") else {
        return Ok(state);
    };
    let bad = |what: &str| TrainError::MissingState(what.to_string());
    state.step = step.parse().map_err(|_| bad("step"))?;
    state.opt.t = ckpt.meta.get("adam_t").ok_or_else(|| bad("adam_t"))?.parse().map_err(|_| bad("adam_t"))?;
    state.best_loss = ckpt.meta.get("best_loss").and_then(|b| b.parse().ok());
    let by_name: BTreeMap<&str, &Matrix> = ckpt.tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let params: Vec<_> = state.model.params().iter().map(|(id, n, m)| (id, n.to_string(), m.shape())).collect();
    for (id, name, shape) in params {
        for (prefix, store) in [(ADAM_M, &mut state.opt.m), (ADAM_V, &mut state.opt.v)] {
            let t = by_name.get(format!("{prefix}{name}").as_str()).ok_or_else(|| bad(&format!("{prefix}{name}")))?;
            if t.shape() != shape {
                return Err(bad(&format!("{prefix}{name} shape")));
            }
            *store.get_mut(id) = (*t).clone();
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DatasetSpec, ImageShape, PatchSize};
    use crate::textcodec::Charset;
    use std::collections::HashSet;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            enc_depth: 1,
            dec_depth: 2,
            ffn_mult: 2,
            image: ImageShape { height: 16, width: 64, channels: 1 },
            patch: PatchSize { height: 8, width: 8 },
            charset: Charset::prefix(6, 4).unwrap(),
            ..ModelConfig::default()
        }
    }

    fn small_samples(cfg: &ModelConfig, n: usize) -> Vec<Sample> {
        let mut spec = DatasetSpec::new(n, cfg.charset.clone(), 3);
        spec.shape = cfg.image;
        spec.max_len = 4;
        prepare_samples(&generate(&spec, &HashSet::new()).unwrap(), cfg).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let lr = 1e-3;
        assert!((lr_schedule(0, 1000, lr) - lr / 25.0).abs() < 1e-18);
        assert!((lr_schedule(100, 1000, lr) - lr).abs() < 1e-18);
        assert!((lr_schedule(1000, 1000, lr) - lr / 1000.0).abs() < 1e-18);
        let values: Vec<f64> = (0..=1000).map(|s| lr_schedule(s, 1000, lr)).collect();
        assert!(values[..=100].windows(2).all(|w| w[1] > w[0]));
        assert!(values[100..].windows(2).all(|w| w[1] <= w[0]));
        assert!(values.windows(2).all(|w| (w[1] - w[0]).abs() < lr / 50.0));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps.register("x.w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut g = ps.zeros_like();
        g.get_mut(id).data_mut().copy_from_slice(&[0.5, -2.0]);
        let mut opt = AdamW::new(&ps);
        opt.step(&mut ps, &g, 0.1, 0.0, &[true]);
        let p = ps.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7);
        // Decoupled decay shrinks even with zero gradient.
        let mut ps2 = ParamStore::new();
        let id2 = ps2.register("y.w", Matrix::filled(1, 1, 2.0));
        let mut opt2 = AdamW::new(&ps2);
        let zero = ps2.zeros_like();
        opt2.step(&mut ps2, &zero, 0.1, 0.01, &[true]);
        assert!((ps2.get(id2).get(0, 0) - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn log_records_round_trip() {
        let r = StepRecord { step: 3, phase: Phase::FineTune, lr: 1.5e-4, l_v: 0.0, l_l: 2.25, total: 2.25, wall_ms: 12.5 };
        let line = r.to_line();
        assert!(line.starts_with("step=3 phase=finetune lr="));
        assert_eq!(StepRecord::parse(&line).unwrap(), r);
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let cfg = small_config();
        let samples = small_samples(&cfg, 12);
        let mut pc = PhaseConfig::mvlr(&cfg, 1, 1e-3, 9);
        pc.batch_size = 4;
        pc.max_steps = Some(5);
        let run = || {
            let mut log = Vec::new();
            let state = TrainState::new(Model::new(cfg.clone(), 1).unwrap(), Phase::Mvlr);
            run_phase(&samples, &pc, state, |r, _| {
                log.push(r.total);
                Flow::Continue
            })
            .unwrap();
            log
        };
        let a = run();
        assert_eq!(a.len(), 5);
        assert_eq!(a, run());
    }

    #[test]
    fn finetune_leaves_visual_head_silent() {
        let cfg = small_config();
        let samples = small_samples(&cfg, 3);
        let model = Model::new(cfg.clone(), 2).unwrap();
        let pc = PhaseConfig::finetune(&cfg, 1, 1e-3, 0);
        for s in &samples {
            let (_, grads) = sample_gradient(&model, s, &pc, 4).unwrap();
            for id in model.visual_head_params() {
                assert!(grads.get(id).data().iter().all(|&g| g == 0.0));
            }
        }
        let pre = PhaseConfig::mvlr(&cfg, 1, 1e-3, 0);
        let (_, grads) = sample_gradient(&model, &samples[0], &pre, 4).unwrap();
        assert!(model.visual_head_params().iter().any(|&id| grads.get(id).data().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn phase_configs() {
        let cfg = ModelConfig::default();
        let ft = PhaseConfig::finetune(&cfg, 10, 1e-4, 0);
        assert_eq!((ft.r_v_eff, ft.r_l_eff, ft.lambda_v_eff, ft.permutations), (0.0, 0.0, 0.0, 6));
        let pre = PhaseConfig::mvlr(&cfg, 20, 7e-4, 0);
        assert_eq!((pre.r_v_eff, pre.r_l_eff, pre.lambda_v_eff), (0.75, 0.2, 1.0));
        assert_eq!(pre.total_steps(130), 60);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_config();
        let samples = small_samples(&cfg, 10);
        let mut pc = PhaseConfig::finetune(&cfg, 1, 1e-3, 5);
        pc.batch_size = 3;
        pc.max_steps = Some(8);
        let fresh = || TrainState::new(Model::new(cfg.clone(), 3).unwrap(), Phase::FineTune);
        let mut full = Vec::new();
        run_phase(&samples, &pc, fresh(), |r, _| {
            full.push(r.total);
            Flow::Continue
        })
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.vlrd");
        let mut first = Vec::new();
        let half = run_phase(&samples, &pc, fresh(), |r, _| {
            first.push(r.total);
            if r.step == 3 {
                Flow::Stop
            } else {
                Flow::Continue
            }
        })
        .unwrap();
        save_state(&path, &half).unwrap();
        let restored = restore_state(&path, Some(&cfg)).unwrap();
        assert_eq!(restored.step, 4);
        let mut rest = Vec::new();
        run_phase(&samples, &pc, restored, |r, _| {
            rest.push(r.total);
            Flow::Continue
        })
        .unwrap();
        first.extend(rest);
        assert_eq!(first, full);

        let other = ModelConfig { d_model: 32, ..cfg };
        assert!(matches!(restore_state(&path, Some(&other)), Err(TrainError::ConfigMismatch(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = small_config();
        let samples = small_samples(&cfg, 4);
        let mut model = Model::new(cfg.clone(), 0).unwrap();
        let id = model.params().id("dec.queries").unwrap();
        model.params_mut().get_mut(id).set(0, 0, f64::NAN);
        let mut pc = PhaseConfig::finetune(&cfg, 1, 1e-3, 0);
        pc.batch_size = 2;
        let r = run_phase(&samples, &pc, TrainState::new(model, Phase::FineTune), |_, _| Flow::Continue);
        assert!(matches!(r, Err(TrainError::DivergenceDetected { step: 0 })));
        assert!(matches!(run_phase(&[], &pc, TrainState::new(Model::new(cfg, 0).unwrap(), Phase::FineTune), |_, _| Flow::Continue), Err(TrainError::EmptyDataset)));
    }
}
