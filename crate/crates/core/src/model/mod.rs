//! The recognition network: patch encoder, text embedding, the layered
//! visual-linguistic decoder and the two reconstruction heads.
//!
//! Everything is built on a [`Graph`] tape so that the same code serves
//! training (with backward) and inference (values only).

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{read_checkpoint, sidecar_path, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, VisualCarry};

use crate::graph::{Graph, Var};
use crate::masking::{AttentionMask, VisualMaskPlan};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::textcodec::TokenSeq;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("query-text mask is {got:?}, expected {expected:?}")]
    MaskShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("label of length {len} exceeds the maximum of {max}")]
    LabelTooLong { len: usize, max: usize },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    ln_x: Ln,
    /// Separate normalization for the key/value side of a cross-attention.
    ln_ctx: Option<Ln>,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ln_ffn: Ln,
    up: Lin,
    down: Lin,
}

#[derive(Debug, Clone)]
struct Head {
    ln: Ln,
    fc1: Lin,
    fc2: Lin,
}

/// The four attention blocks of one decoder layer.
#[derive(Debug, Clone)]
struct DecLayer {
    vis_self: Block,
    query_text: Block,
    vis_query: Block,
    query_vis: Block,
}

#[derive(Debug, Clone)]
struct Layout {
    /// Per-patch normalization of raw pixels, before the projection.
    patch_ln: Ln,
    patch_proj: Lin,
    patch_stats: Lin,
    patch_pos: ParamId,
    vis_mask: ParamId,
    enc: Vec<Block>,
    enc_ln: Ln,
    tok_emb: ParamId,
    tok_pos: ParamId,
    queries: ParamId,
    dec: Vec<DecLayer>,
    head_v: Vec<Head>,
    head_l: Vec<Head>,
}

/// 2D sine-cosine position table: half the width encodes the grid row and
/// half the column, or all of it the column when the grid is one row high.
pub fn sincos_2d((rows, cols): (usize, usize), d: usize) -> Matrix {
    let row_part = if rows > 1 { d / 2 } else { 0 };
    let fill = |out: &mut [f64], pos: f64| {
        let k = out.len() / 2;
        for i in 0..k {
            let w = 1.0 / 10000f64.powf(i as f64 / k as f64);
            out[i] = (pos * w).sin();
            out[k + i] = (pos * w).cos();
        }
    };
    let mut m = Matrix::zeros(rows * cols, d);
    for r in 0..rows {
        for c in 0..cols {
            let (a, b) = m.row_mut(r * cols + c).split_at_mut(row_part);
            fill(a, r as f64);
            fill(b, c as f64);
        }
    }
    m
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn table(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let m = Matrix::trunc_normal(rows, cols, INIT_STD, &mut self.rng);
        self.store.register(name, m)
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        Ln {
            g: self.store.register(format!("{name}.g"), Matrix::filled(1, d, 1.0)),
            b: self.store.register(format!("{name}.b"), Matrix::zeros(1, d)),
        }
    }

    fn lin(&mut self, name: &str, d_in: usize, d_out: usize) -> Lin {
        // Xavier-normal: at small widths the 0.02 used for tables leaves the
        // cross-attention paths too weak to train.
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let w = Matrix::trunc_normal(d_in, d_out, std, &mut self.rng);
        Lin {
            w: self.store.register(format!("{name}.w"), w),
            b: self.store.register(format!("{name}.b"), Matrix::zeros(1, d_out)),
        }
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize, cross: bool) -> Block {
        Block {
            ln_x: self.ln(&format!("{name}.ln_x"), d),
            ln_ctx: cross.then(|| self.ln(&format!("{name}.ln_ctx"), d)),
            q: self.lin(&format!("{name}.attn.q"), d, d),
            k: self.lin(&format!("{name}.attn.k"), d, d),
            v: self.lin(&format!("{name}.attn.v"), d, d),
            o: self.lin(&format!("{name}.attn.o"), d, d),
            ln_ffn: self.ln(&format!("{name}.ln_ffn"), d),
            up: self.lin(&format!("{name}.ffn.up"), d, hidden),
            down: self.lin(&format!("{name}.ffn.down"), hidden, d),
        }
    }

    fn head(&mut self, name: &str, d: usize, out: usize) -> Head {
        Head { ln: self.ln(&format!("{name}.ln"), d), fc1: self.lin(&format!("{name}.fc1"), d, d), fc2: self.lin(&format!("{name}.fc2"), d, out) }
    }
}

/// Per-row mean and standard deviation, one `(mean, std)` row per patch.
fn patch_stats(patches: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(patches.rows(), 2);
    for r in 0..patches.rows() {
        let row = patches.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out.set(r, 0, mean);
        out.set(r, 1, var.sqrt());
    }
    out
}

/// Graph handles for one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub h_v: Var,
    pub h_q: Var,
    /// Query-conditioned visual update; absent when the visual branch was
    /// not requested and the carry mode does not need it.
    pub f_v: Option<Var>,
    pub f_q: Var,
    pub v: Option<Var>,
    pub l: Var,
}

/// Text-independent visual state of one image. In leak-free mode it holds
/// the whole visual stream and can be reused across any number of query
/// passes (permutations, decoding steps).
#[derive(Debug, Clone)]
pub struct VisualCache {
    pub f_v0: Var,
    h_v: Vec<Var>,
    /// Keys and values of `H_v` for the query-to-visual attention.
    kv: Vec<(Var, Var)>,
}

/// Keys and values of the text context for every layer.
#[derive(Debug, Clone)]
pub struct TextCache {
    pub f_l: Var,
    context_len: usize,
    kv: Vec<(Var, Var)>,
}

/// Values of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub h_v: Matrix,
    pub h_q: Matrix,
    pub f_v: Matrix,
    pub f_q: Matrix,
    /// Reconstructed patches, `N x D`.
    pub v: Matrix,
    /// Vocabulary logits, `L_q x V`.
    pub l: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
}

impl DecoderTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn last(&self) -> &LayerTrace {
        self.layers.last().expect("trace has at least one layer")
    }
}

/// Outputs of a single decoder layer applied to explicit inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub h_v: Matrix,
    pub h_q: Matrix,
    pub f_v: Matrix,
    pub f_q: Matrix,
    /// The visual state handed to the next layer under the configured carry.
    pub carry: Matrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Freshly initialized parameters; the same seed gives the same model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = {
            let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
            let d = config.d_model;
            let hidden = d * config.ffn_mult;
            let n_heads = if config.shared_heads { 1 } else { config.dec_depth };
            Layout {
                patch_ln: init.ln("enc.patch_ln", config.patch_dim()),
                patch_proj: init.lin("enc.patch_proj", config.patch_dim(), d),
                patch_stats: init.lin("enc.patch_stats", 2, d),
                patch_pos: init.store.register("enc.pos".to_string(), sincos_2d(config.grid_shape(), d)),
                vis_mask: init.table("enc.mask_token".into(), 1, d),
                enc: (0..config.enc_depth).map(|i| init.block(&format!("enc.block{i}"), d, hidden, false)).collect(),
                enc_ln: init.ln("enc.ln", d),
                tok_emb: init.table("text.emb".into(), config.vocab_size(), d),
                tok_pos: init.table("text.pos".into(), config.max_queries(), d),
                queries: init.table("dec.queries".into(), config.max_queries(), d),
                dec: (0..config.dec_depth)
                    .map(|i| DecLayer {
                        vis_self: init.block(&format!("dec.layer{i}.vis_self"), d, hidden, false),
                        query_text: init.block(&format!("dec.layer{i}.query_text"), d, hidden, true),
                        vis_query: init.block(&format!("dec.layer{i}.vis_query"), d, hidden, true),
                        query_vis: init.block(&format!("dec.layer{i}.query_vis"), d, hidden, true),
                    })
                    .collect(),
                head_v: (0..n_heads).map(|i| init.head(&head_name("head_v", i, &config), d, config.patch_dim())).collect(),
                head_l: (0..n_heads).map(|i| init.head(&head_name("head_l", i, &config), d, config.vocab_size())).collect(),
            }
        };
        Ok(Self { config, params: store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters of the visual reconstruction head(s).
    pub fn visual_head_params(&self) -> Vec<ParamId> {
        self.layout.head_v.iter().flat_map(|h| [h.ln.g, h.ln.b, h.fc1.w, h.fc1.b, h.fc2.w, h.fc2.b]).collect()
    }

    /// Ids of weight matrices that receive weight decay (all linear weights).
    pub fn decayed_params(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, name, _)| name.ends_with(".w")).map(|(id, _, _)| id).collect()
    }

    fn ln(&self, g: &mut Graph, ln: Ln, x: Var) -> Var {
        let (gain, bias) = (g.param(ln.g), g.param(ln.b));
        g.layer_norm(x, gain, bias)
    }

    fn lin(&self, g: &mut Graph, lin: Lin, x: Var) -> Var {
        let (w, b) = (g.param(lin.w), g.param(lin.b));
        g.linear(x, w, Some(b))
    }

    fn ffn(&self, g: &mut Graph, blk: &Block, x: Var) -> Var {
        let h = self.ln(g, blk.ln_ffn, x);
        let h = self.lin(g, blk.up, h);
        let h = g.gelu(h);
        let h = self.lin(g, blk.down, h);
        g.add(x, h)
    }

    fn self_block(&self, g: &mut Graph, blk: &Block, x: Var) -> Var {
        let xn = self.ln(g, blk.ln_x, x);
        let (q, k, v) = (self.lin(g, blk.q, xn), self.lin(g, blk.k, xn), self.lin(g, blk.v, xn));
        let a = g.attention(q, k, v, self.config.n_heads, None);
        let o = self.lin(g, blk.o, a);
        let x = g.add(x, o);
        self.ffn(g, blk, x)
    }

    fn context_kv(&self, g: &mut Graph, blk: &Block, ctx: Var) -> (Var, Var) {
        let cn = self.ln(g, blk.ln_ctx.expect("cross-attention block"), ctx);
        (self.lin(g, blk.k, cn), self.lin(g, blk.v, cn))
    }

    fn cross_block(&self, g: &mut Graph, blk: &Block, x: Var, kv: (Var, Var), mask: Option<&AttentionMask>) -> Var {
        let xn = self.ln(g, blk.ln_x, x);
        let q = self.lin(g, blk.q, xn);
        let a = g.attention(q, kv.0, kv.1, self.config.n_heads, mask);
        let o = self.lin(g, blk.o, a);
        let x = g.add(x, o);
        self.ffn(g, blk, x)
    }

    fn head(&self, g: &mut Graph, h: &Head, x: Var) -> Var {
        let x = self.ln(g, h.ln, x);
        let x = self.lin(g, h.fc1, x);
        let x = g.gelu(x);
        self.lin(g, h.fc2, x)
    }

    fn head_v(&self, layer: usize) -> &Head {
        &self.layout.head_v[if self.config.shared_heads { 0 } else { layer }]
    }

    fn head_l(&self, layer: usize) -> &Head {
        &self.layout.head_l[if self.config.shared_heads { 0 } else { layer }]
    }

    fn check_patches(&self, patches: &Matrix, plan: &VisualMaskPlan) -> Result<(), ModelError> {
        let expected = (self.config.num_patches(), self.config.patch_dim());
        if patches.shape() != expected {
            return Err(ModelError::ShapeMismatch { what: "patch grid", expected, got: patches.shape() });
        }
        if plan.n_patches() != expected.0 {
            return Err(ModelError::ShapeMismatch {
                what: "visual mask plan",
                expected: (expected.0, 1),
                got: (plan.n_patches(), 1),
            });
        }
        Ok(())
    }

    /// Visual embedding over the full grid. Only visible patches enter the
    /// encoder; masked rows are the shared mask token plus position.
    pub fn encode_image_graph(&self, g: &mut Graph, patches: &Matrix, plan: &VisualMaskPlan) -> Result<Var, ModelError> {
        self.check_patches(patches, plan)?;
        let n = self.config.num_patches();
        let pos = g.param(self.layout.patch_pos);
        let mut parts = Vec::with_capacity(2);
        let visible = plan.visible().to_vec();
        if !visible.is_empty() {
            let raw = patches.select_rows(&visible);
            let stats = g.input(patch_stats(&raw));
            let x = g.input(raw);
            let x = self.ln(g, self.layout.patch_ln, x);
            let x = self.lin(g, self.layout.patch_proj, x);
            // The normalized pixels carry shape only; brightness and contrast
            // come back through the statistics so masked pixels stay predictable.
            let s = self.lin(g, self.layout.patch_stats, stats);
            let x = g.add(x, s);
            let p = g.gather(pos, &visible);
            let mut x = g.add(x, p);
            for blk in &self.layout.enc {
                x = self.self_block(g, blk, x);
            }
            let x = self.ln(g, self.layout.enc_ln, x);
            parts.push((x, visible));
        }
        let masked = plan.masked().to_vec();
        if !masked.is_empty() {
            let tok = g.param(self.layout.vis_mask);
            let m = g.gather(tok, &vec![0; masked.len()]);
            let p = g.gather(pos, &masked);
            let m = g.add(m, p);
            parts.push((m, masked));
        }
        Ok(g.scatter(n, parts))
    }

    /// Context embedding `[BOS, t_1..t_L]`; masked positions use `MASK_L`.
    pub fn embed_text_graph(&self, g: &mut Graph, seq: &TokenSeq) -> Result<Var, ModelError> {
        let max = self.config.max_label_len();
        if seq.len() > max {
            return Err(ModelError::LabelTooLong { len: seq.len(), max });
        }
        let cs = &self.config.charset;
        let mut ids = Vec::with_capacity(seq.len() + 1);
        ids.push(cs.bos());
        ids.extend(seq.ids().iter().zip(seq.masked()).map(|(&t, &m)| if m { cs.mask() } else { t }));
        let emb = g.param(self.layout.tok_emb);
        let pos = g.param(self.layout.tok_pos);
        let e = g.gather(emb, &ids);
        let p = g.gather(pos, &(0..ids.len()).collect::<Vec<_>>());
        Ok(g.add(e, p))
    }

    /// Precomputes the text side of every query-to-text attention.
    pub fn text_cache(&self, g: &mut Graph, f_l: Var) -> TextCache {
        let kv = self.layout.dec.iter().map(|layer| self.context_kv(g, &layer.query_text, f_l)).collect();
        TextCache { f_l, context_len: g.value(f_l).rows(), kv }
    }

    /// Runs the text-independent part of the decoder. In literal carry mode
    /// only the input embedding is recorded.
    pub fn visual_cache(&self, g: &mut Graph, f_v0: Var) -> VisualCache {
        let mut cache = VisualCache { f_v0, h_v: Vec::new(), kv: Vec::new() };
        if self.config.visual_stream_is_shared() {
            let mut x = f_v0;
            for layer in &self.layout.dec {
                x = self.self_block(g, &layer.vis_self, x);
                cache.h_v.push(x);
                cache.kv.push(self.context_kv(g, &layer.query_vis, x));
            }
        }
        cache
    }

    /// All decoder layers for one query-text mask. Queries are the first
    /// `mask.rows()` learned query tokens.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        vis: &VisualCache,
        text: &TextCache,
        mask: &AttentionMask,
        want_visual: bool,
    ) -> Result<Vec<LayerVars>, ModelError> {
        let l_q = mask.rows();
        if l_q == 0 || l_q > self.config.max_queries() || mask.cols() != text.context_len {
            return Err(ModelError::MaskShapeMismatch {
                expected: (l_q.clamp(1, self.config.max_queries()), text.context_len),
                got: mask.shape(),
            });
        }
        let queries = g.param(self.layout.queries);
        let mut f_q = g.gather(queries, &(0..l_q).collect::<Vec<_>>());
        let mut f_v = vis.f_v0;
        let mut out = Vec::with_capacity(self.layout.dec.len());
        for (n, layer) in self.layout.dec.iter().enumerate() {
            let (h_v, kv_v) = if self.config.visual_stream_is_shared() {
                (vis.h_v[n], vis.kv[n])
            } else {
                let h_v = self.self_block(g, &layer.vis_self, f_v);
                (h_v, self.context_kv(g, &layer.query_vis, h_v))
            };
            let h_q = self.cross_block(g, &layer.query_text, f_q, text.kv[n], Some(mask));
            let need_fv = want_visual || !self.config.visual_stream_is_shared();
            let f_v_next = need_fv.then(|| {
                let kv_q = self.context_kv(g, &layer.vis_query, h_q);
                self.cross_block(g, &layer.vis_query, h_v, kv_q, None)
            });
            f_q = self.cross_block(g, &layer.query_vis, h_q, kv_v, None);
            let v = if want_visual { f_v_next.map(|x| self.head(g, self.head_v(n), x)) } else { None };
            let l = self.head(g, self.head_l(n), f_q);
            out.push(LayerVars { h_v, h_q, f_v: f_v_next, f_q, v, l });
            f_v = f_v_next.unwrap_or(h_v);
        }
        Ok(out)
    }

    /// One graph forward for several query-text masks over the same image and
    /// text. The encoder and, in leak-free mode, the visual stream are shared.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        patches: &Matrix,
        plan: &VisualMaskPlan,
        seq: &TokenSeq,
        masks: &[AttentionMask],
        want_visual: bool,
    ) -> Result<Vec<Vec<LayerVars>>, ModelError> {
        let f_v = self.encode_image_graph(g, patches, plan)?;
        let f_l = self.embed_text_graph(g, seq)?;
        let vis = self.visual_cache(g, f_v);
        let text = self.text_cache(g, f_l);
        masks.iter().map(|m| self.decode_graph(g, &vis, &text, m, want_visual)).collect()
    }

    pub fn encode_image(&self, patches: &Matrix, plan: &VisualMaskPlan) -> Result<Matrix, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.encode_image_graph(&mut g, patches, plan)?;
        Ok(g.value(v).clone())
    }

    pub fn embed_text(&self, seq: &TokenSeq) -> Result<Matrix, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.embed_text_graph(&mut g, seq)?;
        Ok(g.value(v).clone())
    }

    /// Full forward pass with every layer's states and both heads.
    pub fn forward(
        &self,
        patches: &Matrix,
        plan: &VisualMaskPlan,
        seq: &TokenSeq,
        mask: &AttentionMask,
    ) -> Result<DecoderTrace, ModelError> {
        let mut g = Graph::new(&self.params);
        let layers = self.forward_graph(&mut g, patches, plan, seq, std::slice::from_ref(mask), true)?.remove(0);
        Ok(self.trace_values(&g, &layers))
    }

    pub fn trace_values(&self, g: &Graph, layers: &[LayerVars]) -> DecoderTrace {
        let val = |v: Var| g.value(v).clone();
        DecoderTrace {
            layers: layers
                .iter()
                .map(|lv| LayerTrace {
                    h_v: val(lv.h_v),
                    h_q: val(lv.h_q),
                    f_v: val(lv.f_v.expect("visual branch computed")),
                    f_q: val(lv.f_q),
                    v: val(lv.v.expect("visual head computed")),
                    l: val(lv.l),
                })
                .collect(),
        }
    }

    /// Decoder layer `n` (0-based) applied to explicit inputs.
    pub fn mvld_layer(
        &self,
        n: usize,
        f_v_prev: &Matrix,
        f_q_prev: &Matrix,
        f_l: &Matrix,
        mask: &AttentionMask,
    ) -> Result<LayerOutput, ModelError> {
        let d = self.config.d_model;
        let n_patches = self.config.num_patches();
        if f_v_prev.shape() != (n_patches, d) {
            return Err(ModelError::ShapeMismatch { what: "visual state", expected: (n_patches, d), got: f_v_prev.shape() });
        }
        if f_q_prev.cols() != d || f_l.cols() != d {
            return Err(ModelError::ShapeMismatch { what: "query/text width", expected: (f_q_prev.rows(), d), got: f_q_prev.shape() });
        }
        if mask.shape() != (f_q_prev.rows(), f_l.rows()) {
            return Err(ModelError::MaskShapeMismatch { expected: (f_q_prev.rows(), f_l.rows()), got: mask.shape() });
        }
        let layer = &self.layout.dec[n];
        let mut g = Graph::new(&self.params);
        let (fv, fq, fl) = (g.input(f_v_prev.clone()), g.input(f_q_prev.clone()), g.input(f_l.clone()));
        let h_v = self.self_block(&mut g, &layer.vis_self, fv);
        let kv_l = self.context_kv(&mut g, &layer.query_text, fl);
        let h_q = self.cross_block(&mut g, &layer.query_text, fq, kv_l, Some(mask));
        let kv_q = self.context_kv(&mut g, &layer.vis_query, h_q);
        let f_v = self.cross_block(&mut g, &layer.vis_query, h_v, kv_q, None);
        let kv_v = self.context_kv(&mut g, &layer.query_vis, h_v);
        let f_q = self.cross_block(&mut g, &layer.query_vis, h_q, kv_v, None);
        let carry = if self.config.visual_stream_is_shared() { h_v } else { f_v };
        let val = |v: Var| g.value(v).clone();
        Ok(LayerOutput { h_v: val(h_v), h_q: val(h_q), f_v: val(f_v), f_q: val(f_q), carry: val(carry) })
    }

    /// The learned initial query tokens `F_q^0`, one row per slot.
    pub fn query_tokens(&self) -> &Matrix {
        self.params.get(self.layout.queries)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self.params.iter().map(|(_, name, m)| (name.to_string(), m.clone())).collect(),
            meta: Default::default(),
        }
    }

    /// Rebuilds a model from checkpoint tensors. Extra tensors (optimizer
    /// state) are ignored; missing or misshapen parameters are errors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Model::new(ckpt.config.clone(), 0)?;
        let by_name: std::collections::HashMap<&str, &Matrix> = ckpt.tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let src = by_name.get(name.as_str()).ok_or_else(|| ModelError::CorruptCheckpoint(format!("missing tensor {name}")))?;
            let dst = model.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "tensor {name} is {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = (*src).clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

fn head_name(base: &str, i: usize, config: &ModelConfig) -> String {
    if config.shared_heads {
        base.to_string()
    } else {
        format!("{base}{i}")
    }
}

#[cfg(test)]
mod tests;
