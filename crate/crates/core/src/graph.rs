//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every forward op appends a node holding its output; [`Graph::backward`]
//! walks the tape once in reverse and accumulates parameter gradients into a
//! [`GradStore`]. Ops are coarse (a whole linear layer, a whole multi-head
//! attention) so tapes stay short.

use crate::masking::AttentionMask;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Gather { table: Var, idx: Vec<usize> },
    Scatter { parts: Vec<(Var, Vec<usize>)> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    /// Keeps `tanh` of the inner polynomial for the backward pass.
    Gelu { x: Var, tanh: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    SquaredError { pred: Var, target: Matrix, rows: Vec<usize>, scale: f64 },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, scale: f64, probs: Vec<Vec<f64>> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// The tape node for a parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(Matrix::zeros(0, 0), Op::Param(id), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `x @ w + b`, with `w` stored as `in x out` and `b` as `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.rows(), "linear input width");
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        gemm(1.0, xv.view(), wv.view(), 0.0, out.view_mut());
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols()), "bias shape");
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                    *o += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select_rows(idx);
        let needs = self.needs(table);
        self.push(out, Op::Gather { table, idx: idx.to_vec() }, needs)
    }

    /// Interleaves row blocks: `out[idx_j[i]] = part_j[i]`. The index lists
    /// must cover `0..n_rows` exactly once.
    pub fn scatter(&mut self, n_rows: usize, parts: Vec<(Var, Vec<usize>)>) -> Var {
        let cols = self.value(parts[0].0).cols();
        let mut out = Matrix::zeros(n_rows, cols);
        let mut covered = vec![false; n_rows];
        for (v, idx) in &parts {
            let pv = self.value(*v);
            assert_eq!(pv.rows(), idx.len(), "scatter block size");
            assert_eq!(pv.cols(), cols, "scatter block width");
            for (i, &r) in idx.iter().enumerate() {
                assert!(!covered[r], "row {r} scattered twice");
                covered[r] = true;
                out.row_mut(r).copy_from_slice(pv.row(i));
            }
        }
        assert!(covered.iter().all(|&c| c), "scatter leaves rows uncovered");
        let needs = parts.iter().any(|(v, _)| self.needs(*v));
        self.push(out, Op::Scatter { parts }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain).row(0), self.value(bias).row(0));
        let n = xv.cols() as f64;
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut stats = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, stats }, needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut tanh = Vec::with_capacity(out.data().len());
        for v in out.data_mut() {
            let t = tanh_via_exp(gelu_inner(*v));
            tanh.push(t);
            *v = 0.5 * *v * (1.0 + t);
        }
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x, tanh }, needs)
    }

    /// Scaled dot-product attention over `heads` column groups of the already
    /// projected `q`, `k`, `v`. Blocked entries get probability exactly zero;
    /// a row with nothing allowed attends to column 0 (BOS) alone.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttentionMask>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk, d) = (qv.rows(), kv.rows(), qv.cols());
        assert_eq!(kv.cols(), d, "key width");
        assert_eq!(vv.shape(), (lk, d), "value shape");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        if let Some(m) = mask {
            assert_eq!(m.shape(), (lq, lk), "attention mask shape");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(lq, lk);
            gemm(scale, qv.view().cols(off, dh), kv.view().cols(off, dh).t(), 0.0, p.view_mut());
            for r in 0..lq {
                let row = p.row_mut(r);
                softmax_masked(row, mask.map(|m| m.row(r)));
            }
            gemm(1.0, p.view(), vv.view().cols(off, dh), 0.0, out.view_mut().cols(off, dh));
            probs.push(p);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, needs)
    }

    /// `scale * sum_{r in rows} ||pred[r] - target[r]||^2` as a scalar node.
    pub fn squared_error(&mut self, pred: Var, target: &Matrix, rows: &[usize], scale: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "prediction/target shape");
        let mut sum = 0.0;
        for &r in rows {
            for (a, b) in pv.row(r).iter().zip(target.row(r)) {
                sum += (a - b) * (a - b);
            }
        }
        let needs = self.needs(pred);
        let op = Op::SquaredError { pred, target: target.clone(), rows: rows.to_vec(), scale };
        self.push(Matrix::filled(1, 1, scale * sum), op, needs)
    }

    /// `scale * sum over (row, class) of -log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], scale: f64) -> Var {
        let lv = self.value(logits);
        let mut sum = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for &(r, c) in targets {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            sum += lse - row[c];
            probs.push(row.iter().map(|x| (x - lse).exp()).collect());
        }
        let needs = self.needs(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), scale, probs };
        self.push(Matrix::filled(1, 1, scale * sum), op, needs)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut sum = 0.0;
        for &(v, w) in terms {
            sum += w * self.scalar(v);
        }
        let needs = terms.iter().any(|&(v, w)| w != 0.0 && self.needs(v));
        self.push(Matrix::filled(1, 1, sum), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Back-propagates `seed * d(loss)` and adds parameter gradients into `acc`.
    pub fn backward(&self, loss: Var, seed: f64, acc: &mut GradStore) {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, seed));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => acc.get_mut(*id).add_assign(&g),
                Op::Linear { x, w, b } => {
                    if self.needs(*x) {
                        let wv = self.value(*w);
                        let dx = slot(&self.nodes, &mut grads, acc, *x, self.value(*x).shape());
                        gemm(1.0, g.view(), wv.view().t(), 1.0, dx.view_mut());
                    }
                    if self.needs(*w) {
                        let xv = self.value(*x);
                        let dw = slot(&self.nodes, &mut grads, acc, *w, self.value(*w).shape());
                        gemm(1.0, xv.view().t(), g.view(), 1.0, dw.view_mut());
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let db = slot(&self.nodes, &mut grads, acc, b, (1, g.cols()));
                        let dbr = db.row_mut(0);
                        for r in 0..g.rows() {
                            for (a, &x) in dbr.iter_mut().zip(g.row(r)) {
                                *a += x;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            slot(&self.nodes, &mut grads, acc, v, g.shape()).add_assign(&g);
                        }
                    }
                }
                Op::Gather { table, idx } => {
                    let dt = slot(&self.nodes, &mut grads, acc, *table, self.value(*table).shape());
                    for (i, &r) in idx.iter().enumerate() {
                        for (a, &x) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += x;
                        }
                    }
                }
                Op::Scatter { parts } => {
                    for (v, idx) in parts {
                        if !self.needs(*v) {
                            continue;
                        }
                        let dp = slot(&self.nodes, &mut grads, acc, *v, self.value(*v).shape());
                        for (i, &r) in idx.iter().enumerate() {
                            for (a, &x) in dp.row_mut(i).iter_mut().zip(g.row(r)) {
                                *a += x;
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain).row(0).to_vec();
                    let n = xv.cols();
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dx = Matrix::zeros(xv.rows(), n);
                    let mut xhat = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let gr = g.row(r);
                        for j in 0..n {
                            xhat[j] = (xv.get(r, j) - mean) * rstd;
                            dxhat[j] = gr[j] * gv[j];
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    if self.needs(*x) {
                        slot(&self.nodes, &mut grads, acc, *x, dx.shape()).add_assign(&dx);
                    }
                    if self.needs(*gain) {
                        let dg = slot(&self.nodes, &mut grads, acc, *gain, (1, n));
                        dg.add_assign(&Matrix::from_vec(1, n, dgain));
                    }
                    if self.needs(*bias) {
                        let db = slot(&self.nodes, &mut grads, acc, *bias, (1, n));
                        db.add_assign(&Matrix::from_vec(1, n, dbias));
                    }
                }
                Op::Gelu { x, tanh } => {
                    let xv = self.value(*x);
                    let dx = slot(&self.nodes, &mut grads, acc, *x, xv.shape());
                    for (((d, &xi), &gi), &t) in dx.data_mut().iter_mut().zip(xv.data()).zip(g.data()).zip(tanh) {
                        *d += gi * gelu_grad(xi, t);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    self.attention_backward(&mut grads, acc, &g, (*q, *k, *v), *heads, probs);
                }
                Op::SquaredError { pred, target, rows, scale } => {
                    let pv = self.value(*pred);
                    let s = 2.0 * scale * g.get(0, 0);
                    let dp = slot(&self.nodes, &mut grads, acc, *pred, pv.shape());
                    for &r in rows {
                        let (pr, tr) = (pv.row(r), target.row(r));
                        for (j, d) in dp.row_mut(r).iter_mut().enumerate() {
                            *d += s * (pr[j] - tr[j]);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, scale, probs } => {
                    let s = scale * g.get(0, 0);
                    let dl = slot(&self.nodes, &mut grads, acc, *logits, self.value(*logits).shape());
                    for (&(r, c), p) in targets.iter().zip(probs) {
                        let row = dl.row_mut(r);
                        for (d, &pj) in row.iter_mut().zip(p) {
                            *d += s * pj;
                        }
                        row[c] -= s;
                    }
                }
                Op::WeightedSum(terms) => {
                    let gs = g.get(0, 0);
                    for &(v, w) in terms {
                        if self.needs(v) && w != 0.0 {
                            let d = slot(&self.nodes, &mut grads, acc, v, (1, 1));
                            d.data_mut()[0] += w * gs;
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Matrix>],
        acc: &mut GradStore,
        g: &Matrix,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[Matrix],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk, d) = (qv.rows(), kv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(lq, d);
        let mut dk = Matrix::zeros(lk, d);
        let mut dv = Matrix::zeros(lk, d);
        let mut ds = Matrix::zeros(lq, lk);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            // dP = dO V^T, then the softmax Jacobian row by row.
            gemm(1.0, g.view().cols(off, dh), vv.view().cols(off, dh).t(), 0.0, ds.view_mut());
            for r in 0..lq {
                let pr = p.row(r);
                let dr = ds.row_mut(r);
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &pj) in dr.iter_mut().zip(pr) {
                    *x = pj * (*x - dot);
                }
            }
            gemm(scale, ds.view(), kv.view().cols(off, dh), 0.0, dq.view_mut().cols(off, dh));
            gemm(scale, ds.view().t(), qv.view().cols(off, dh), 0.0, dk.view_mut().cols(off, dh));
            gemm(1.0, p.view().t(), g.view().cols(off, dh), 0.0, dv.view_mut().cols(off, dh));
        }
        for (var, dm) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                slot(&self.nodes, grads, acc, var, dm.shape()).add_assign(&dm);
            }
        }
    }
}

/// Gradient buffer of node `v`. Parameter nodes accumulate straight into
/// `acc`, which saves a zeroed temporary per use of every weight.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Matrix>],
    acc: &'a mut GradStore,
    v: Var,
    shape: (usize, usize),
) -> &'a mut Matrix {
    match nodes[v.0].op {
        Op::Param(id) => acc.get_mut(id),
        _ => grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1)),
    }
}

fn softmax_masked(row: &mut [f64], allow: Option<&[bool]>) {
    let allowed = |j: usize| allow.map_or(true, |a| a[j]);
    let any = (0..row.len()).any(allowed);
    let keep = |j: usize| if any { allowed(j) } else { j == 0 };
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if keep(j) && x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if keep(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_via_exp(gelu_inner(x)))
}

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + GELU_A * x * x * x)
}

/// `tanh` through a single `exp`, cheaper than the libm call; the absolute
/// error stays near machine epsilon.
fn tanh_via_exp(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter entry against `backward`.
    fn check<F>(store: &mut ParamStore, build: F)
    where
        F: Fn(&mut Graph<'_>) -> Var,
    {
        let mut acc = store.zeros_like();
        {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss, 1.0, &mut acc);
        }
        let eps = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + eps;
                let lp = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data_mut()[i] = orig - eps;
                let lm = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = acc.get(id).data()[i];
                let tol = 1e-6 * (1.0 + fd.abs().max(an.abs()));
                assert!((fd - an).abs() < tol, "{}[{i}]: fd {fd} vs analytic {an}", store.name(id));
            }
        }
    }

    fn rand_param(store: &mut ParamStore, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng) -> ParamId {
        store.register(name, Matrix::trunc_normal(r, c, 0.5, rng))
    }

    #[test]
    fn linear_layer_norm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let x = rand_param(&mut store, "x", 3, 4, &mut rng);
        let w = rand_param(&mut store, "w", 4, 5, &mut rng);
        let b = rand_param(&mut store, "b", 1, 5, &mut rng);
        let g = rand_param(&mut store, "g", 1, 5, &mut rng);
        let beta = rand_param(&mut store, "beta", 1, 5, &mut rng);
        let target = Matrix::trunc_normal(3, 5, 1.0, &mut rng);
        check(&mut store, |gr| {
            let (xv, wv, bv, gv, betav) = (gr.param(x), gr.param(w), gr.param(b), gr.param(g), gr.param(beta));
            let h = gr.linear(xv, wv, Some(bv));
            let n = gr.layer_norm(h, gv, betav);
            let a = gr.gelu(n);
            gr.squared_error(a, &target, &[0, 2], 0.7)
        });
    }

    #[test]
    fn attention_gather_scatter_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let q = rand_param(&mut store, "q", 3, 4, &mut rng);
        let k = rand_param(&mut store, "k", 5, 4, &mut rng);
        let v = rand_param(&mut store, "v", 5, 4, &mut rng);
        let table = rand_param(&mut store, "table", 2, 4, &mut rng);
        let mut mask = AttentionMask::filled(3, 5, true);
        mask.set(0, 2, false);
        mask.set(1, 4, false);
        for c in 0..5 {
            mask.set(2, c, false);
        }
        check(&mut store, |gr| {
            let (qv, kv, vv, tv) = (gr.param(q), gr.param(k), gr.param(v), gr.param(table));
            let att = gr.attention(qv, kv, vv, 2, Some(&mask));
            let extra = gr.gather(tv, &[1, 0]);
            let s = gr.scatter(5, vec![(att, vec![0, 2, 4]), (extra, vec![3, 1])]);
            let ce = gr.cross_entropy(s, &[(0, 1), (3, 2), (4, 0)], 0.5);
            let se = gr.squared_error(s, &Matrix::zeros(5, 4), &[1, 2], 0.1);
            gr.weighted_sum(&[(ce, 1.0), (se, 2.0)])
        });
    }

    #[test]
    fn masked_attention_ignores_blocked_values() {
        let mut store = ParamStore::new();
        let q = store.register("q", Matrix::from_vec(1, 2, vec![0.3, -0.2]));
        let k = store.register("k", Matrix::from_vec(2, 2, vec![1.0, 0.5, -0.4, 0.2]));
        let mut mask = AttentionMask::filled(1, 2, true);
        mask.set(0, 1, false);
        let run = |val: f64| {
            let mut g = Graph::new(&store);
            let (qv, kv) = (g.param(q), g.param(k));
            let v = g.input(Matrix::from_vec(2, 2, vec![1.0, 2.0, val, val]));
            let o = g.attention(qv, kv, v, 1, Some(&mask));
            g.value(o).clone()
        };
        assert_eq!(run(5.0), run(-123.0));
        assert_eq!(run(5.0).data(), &[1.0, 2.0]);
    }

    #[test]
    fn empty_mask_row_falls_back_to_bos() {
        let mut row = vec![0.2, 0.9, -1.0];
        softmax_masked(&mut row, Some(&[false, false, false]));
        assert_eq!(row, vec![1.0, 0.0, 0.0]);
    }
}
