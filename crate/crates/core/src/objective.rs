//! Reconstruction losses: masked-patch squared error and token cross-entropy,
//! each averaged over targets and decoder layers, plus their weighted sum.

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::masking::VisualMaskPlan;
use crate::model::{DecoderTrace, LayerVars};
use crate::tensor::Matrix;
use crate::textcodec::{TokenId, TokenSeq};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("linguistic target set is empty")]
    EmptyTargetSet,
    #[error("target row {row} outside the {rows} query rows")]
    TargetOutOfRange { row: usize, rows: usize },
    #[error("trace has no layers")]
    EmptyTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_v: f64,
    pub l_l: f64,
    pub total: f64,
    pub per_layer_v: Vec<f64>,
    pub per_layer_l: Vec<f64>,
    /// Masked pixel count and target token count.
    pub denominators: (usize, usize),
    /// False when nothing was masked and `l_v` was defined as zero.
    pub visual_defined: bool,
}

pub const NORM_PIX_EPS: f64 = 1e-6;

/// Reconstruction targets: raw pixels, or each patch standardized to zero
/// mean and unit variance.
pub fn visual_targets(patches: &Matrix, norm_pix: bool) -> Matrix {
    let mut t = patches.clone();
    if norm_pix {
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + NORM_PIX_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        }
    }
    t
}

/// Query rows supervised during pretraining: the masked character positions.
pub fn masked_target_rows(seq: &TokenSeq) -> Vec<usize> {
    seq.masked_positions().into_iter().map(|p| p - 1).collect()
}

/// Query rows supervised during fine-tuning: every character and the EOS slot.
pub fn all_target_rows(seq: &TokenSeq) -> Vec<usize> {
    (0..=seq.len()).collect()
}

fn check_nonempty(trace: &DecoderTrace) -> Result<(), ObjectiveError> {
    if trace.layers.is_empty() {
        Err(ObjectiveError::EmptyTrace)
    } else {
        Ok(())
    }
}

/// Mean squared error over the pixels of masked patches, averaged over
/// layers. With nothing masked the loss is `0` and `visual_defined` is false.
pub fn visual_loss(trace: &DecoderTrace, targets: &Matrix, plan: &VisualMaskPlan) -> Result<(f64, Vec<f64>), ObjectiveError> {
    check_nonempty(trace)?;
    let n_layers = trace.layers.len() as f64;
    let pixels = plan.masked().len() * targets.cols();
    let mut per_layer = Vec::with_capacity(trace.layers.len());
    for layer in &trace.layers {
        if layer.v.shape() != targets.shape() {
            return Err(ObjectiveError::ShapeMismatch { what: "visual prediction", expected: targets.shape(), got: layer.v.shape() });
        }
        if pixels == 0 {
            per_layer.push(0.0);
            continue;
        }
        let mut sum = 0.0;
        for &i in plan.masked() {
            for (a, b) in layer.v.row(i).iter().zip(targets.row(i)) {
                sum += (a - b) * (a - b);
            }
        }
        per_layer.push(sum / pixels as f64);
    }
    let mean = per_layer.iter().sum::<f64>() / n_layers;
    Ok((mean, per_layer))
}

fn check_rows(rows: &[usize], n_rows: usize, targets: &[TokenId]) -> Result<(), ObjectiveError> {
    if rows.is_empty() {
        return Err(ObjectiveError::EmptyTargetSet);
    }
    for &r in rows {
        if r >= n_rows || r >= targets.len() {
            return Err(ObjectiveError::TargetOutOfRange { row: r, rows: n_rows.min(targets.len()) });
        }
    }
    Ok(())
}

/// Softmax cross-entropy at `rows` (query row `r` predicts `targets[r]`),
/// averaged over rows and layers.
pub fn linguistic_loss(trace: &DecoderTrace, targets: &[TokenId], rows: &[usize]) -> Result<(f64, Vec<f64>), ObjectiveError> {
    check_nonempty(trace)?;
    let mut per_layer = Vec::with_capacity(trace.layers.len());
    for layer in &trace.layers {
        check_rows(rows, layer.l.rows(), targets)?;
        let mut sum = 0.0;
        for &r in rows {
            let row = layer.l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            sum += lse - row[targets[r]];
        }
        per_layer.push(sum / rows.len() as f64);
    }
    let mean = per_layer.iter().sum::<f64>() / trace.layers.len() as f64;
    Ok((mean, per_layer))
}

/// `lambda_v * l_v + lambda_l * l_l`; a zero weight drops its term entirely.
pub fn total_loss(l_v: f64, l_l: f64, lambda_v: f64, lambda_l: f64) -> f64 {
    let term = |w: f64, l: f64| if w == 0.0 { 0.0 } else { w * l };
    term(lambda_v, l_v) + term(lambda_l, l_l)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_report(
    trace: &DecoderTrace,
    visual_targets: &Matrix,
    plan: &VisualMaskPlan,
    token_targets: &[TokenId],
    rows: &[usize],
    lambda_v: f64,
    lambda_l: f64,
) -> Result<LossReport, ObjectiveError> {
    let (l_v, per_layer_v) = visual_loss(trace, visual_targets, plan)?;
    let (l_l, per_layer_l) = linguistic_loss(trace, token_targets, rows)?;
    Ok(LossReport {
        l_v,
        l_l,
        total: total_loss(l_v, l_l, lambda_v, lambda_l),
        per_layer_v,
        per_layer_l,
        denominators: (plan.masked().len() * visual_targets.cols(), rows.len()),
        visual_defined: !plan.masked().is_empty(),
    })
}

/// Graph form of [`visual_loss`]. `None` when nothing is masked or the
/// layers carry no visual predictions.
pub fn visual_loss_graph(g: &mut Graph, layers: &[LayerVars], targets: &Matrix, plan: &VisualMaskPlan) -> Option<Var> {
    let pixels = plan.masked().len() * targets.cols();
    if pixels == 0 || layers.is_empty() {
        return None;
    }
    let scale = 1.0 / (pixels as f64 * layers.len() as f64);
    let terms: Vec<(Var, f64)> = layers
        .iter()
        .map(|lv| lv.v.map(|v| (g.squared_error(v, targets, plan.masked(), scale), 1.0)))
        .collect::<Option<_>>()?;
    Some(g.weighted_sum(&terms))
}

/// Graph form of [`linguistic_loss`].
pub fn linguistic_loss_graph(g: &mut Graph, layers: &[LayerVars], targets: &[TokenId], rows: &[usize]) -> Result<Var, ObjectiveError> {
    if layers.is_empty() {
        return Err(ObjectiveError::EmptyTrace);
    }
    let pairs: Vec<(usize, usize)> = rows.iter().map(|&r| (r, targets.get(r).copied().unwrap_or(usize::MAX))).collect();
    let scale = 1.0 / (rows.len() as f64 * layers.len() as f64);
    let mut terms = Vec::with_capacity(layers.len());
    for lv in layers {
        check_rows(rows, g.value(lv.l).rows(), targets)?;
        terms.push((g.cross_entropy(lv.l, &pairs, scale), 1.0));
    }
    Ok(g.weighted_sum(&terms))
}
