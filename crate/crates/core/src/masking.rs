//! Stochastic masking and attention-mask algebra.
//!
//! Conventions used throughout:
//!
//! * Context columns are `0 = BOS`, then characters at columns `1..=L`.
//! * Query row `r` predicts position `r + 1`; row `L` is the EOS slot.
//! * `EOS` is a prediction target only and never appears as a context column,
//!   so it is treated as coming after every character in any factorization
//!   order.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::textcodec::TokenSeq;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("not a permutation of 1..={len}: {order:?}")]
    NotAPermutation { len: usize, order: Vec<usize> },
}

/// Partition of patch indices into masked and visible sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualMaskPlan {
    n_patches: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
}

impl VisualMaskPlan {
    /// Builds a plan from an explicit masked set. Indices are deduplicated and
    /// must be `< n_patches`.
    pub fn from_masked(n_patches: usize, masked: &[usize]) -> Self {
        let mut flags = vec![false; n_patches];
        for &i in masked {
            assert!(i < n_patches, "patch index {i} out of range {n_patches}");
            flags[i] = true;
        }
        let masked = (0..n_patches).filter(|&i| flags[i]).collect();
        let visible = (0..n_patches).filter(|&i| !flags[i]).collect();
        Self { n_patches, masked, visible }
    }

    /// Nothing masked, as used at inference and during fine-tuning.
    pub fn none(n_patches: usize) -> Self {
        Self::from_masked(n_patches, &[])
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Masks exactly `round(ratio * n_patches)` patches, uniformly without
/// replacement.
pub fn sample_visual_mask<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> VisualMaskPlan {
    assert!(n_patches >= 1, "need at least one patch");
    let k = masked_count(n_patches, ratio);
    let picked = index::sample(rng, n_patches, k).into_vec();
    VisualMaskPlan::from_masked(n_patches, &picked)
}

fn masked_count(n: usize, ratio: f64) -> usize {
    let ratio = ratio.clamp(0.0, 1.0);
    ((ratio * n as f64).round() as usize).min(n)
}

/// Flags `max(1, round(ratio * L))` character positions as masked when
/// `ratio > 0` and the label is nonempty; ids are left untouched.
pub fn sample_linguistic_mask<R: Rng + ?Sized>(seq: &TokenSeq, ratio: f64, rng: &mut R) -> TokenSeq {
    let len = seq.len();
    if ratio <= 0.0 || len == 0 {
        return seq.clone().with_masked_positions(&[]);
    }
    let k = masked_count(len, ratio).max(1);
    let positions: Vec<usize> = index::sample(rng, len, k).into_iter().map(|i| i + 1).collect();
    seq.clone().with_masked_positions(&positions)
}

/// Boolean allow matrix over (query row x context column). `true` means the
/// query may attend to that column.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.rows, self.cols)?;
        f.write_str(&self.to_grid())
    }
}

impl AttentionMask {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self { rows, cols, allow: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allow.push(f(r, c));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(row < self.rows && col < self.cols);
        self.allow[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        assert!(row < self.rows && col < self.cols);
        self.allow[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allow[row * self.cols..(row + 1) * self.cols]
    }

    /// Columns the given row may attend to.
    pub fn allowed_cols(&self, row: usize) -> Vec<usize> {
        self.row(row).iter().enumerate().filter_map(|(c, &a)| a.then_some(c)).collect()
    }

    /// Keeps only the first `rows` query rows.
    pub fn truncate_rows(&self, rows: usize) -> Self {
        assert!(rows <= self.rows);
        Self { rows, cols: self.cols, allow: self.allow[..rows * self.cols].to_vec() }
    }

    /// One line per query row, `1` for allowed and `0` for blocked.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for &a in self.row(r) {
                s.push(if a { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

/// Elementwise conjunction of two masks of equal shape.
pub fn merge_and(a: &AttentionMask, b: &AttentionMask) -> Result<AttentionMask, MaskError> {
    if a.shape() != b.shape() {
        return Err(MaskError::ShapeMismatch { left: a.shape(), right: b.shape() });
    }
    let allow = a.allow.iter().zip(&b.allow).map(|(&x, &y)| x && y).collect();
    Ok(AttentionMask { rows: a.rows, cols: a.cols, allow })
}

/// A factorization order over character positions `1..=L`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self, MaskError> {
        let len = order.len();
        let mut seen = vec![false; len + 1];
        for &p in &order {
            if p == 0 || p > len || seen[p] {
                return Err(MaskError::NotAPermutation { len, order });
            }
            seen[p] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(len: usize) -> Self {
        Self { order: (1..=len).collect() }
    }

    pub fn reverse(len: usize) -> Self {
        Self { order: (1..=len).rev().collect() }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (1..=len).collect();
        order.shuffle(rng);
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Keeps positions `1..=len` in their relative order. Restricting a
    /// uniformly random permutation gives a uniformly random one.
    pub fn restrict(&self, len: usize) -> Self {
        Self { order: self.order.iter().copied().filter(|&p| p <= len).collect() }
    }

    /// `rank[p]` is the step at which position `p` is generated; index 0 is
    /// unused.
    fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len() + 1];
        for (step, &p) in self.order.iter().enumerate() {
            rank[p] = step;
        }
        rank
    }
}

/// Permuted autoregressive mask of shape `(L + 1) x L_c` with `L_c = L + 1`.
///
/// Row `r < L` (position `r + 1`) sees BOS and every character generated
/// before it in `perm`; the EOS row sees BOS and all characters.
pub fn build_permuted_mask(perm: &Permutation, context_len: usize) -> AttentionMask {
    let len = perm.len();
    assert_eq!(context_len, len + 1, "context must be BOS plus {len} characters");
    let rank = perm.ranks();
    AttentionMask::from_fn(len + 1, context_len, |r, c| {
        if c == 0 {
            return true;
        }
        if r == len {
            return true;
        }
        rank[c] < rank[r + 1]
    })
}

/// Blanks the given character columns for every query.
pub fn build_masked_char_mask(masked_positions: &[usize], query_len: usize, context_len: usize) -> AttentionMask {
    let mut m = AttentionMask::filled(query_len, context_len, true);
    for &c in masked_positions {
        assert!(c >= 1 && c < context_len, "masked column {c} is not a character column");
        for r in 0..query_len {
            m.set(r, c, false);
        }
    }
    m
}

/// Refinement mask: every query sees all context except its own character
/// column. The EOS row has no own column and sees everything.
pub fn build_cloze_mask(query_len: usize, context_len: usize) -> AttentionMask {
    assert_eq!(query_len, context_len, "cloze mask is square");
    AttentionMask::from_fn(query_len, context_len, |r, c| c != r + 1)
}

/// The query-text mask: permuted order AND hidden masked characters.
pub fn query_text_mask(perm: &Permutation, masked_positions: &[usize]) -> AttentionMask {
    let context_len = perm.len() + 1;
    let permuted = build_permuted_mask(perm, context_len);
    let masked = build_masked_char_mask(masked_positions, context_len, context_len);
    merge_and(&permuted, &masked).expect("both masks are (L+1)x(L+1)")
}

/// `min(k, L!)` distinct permutations: identity first, reverse second, the
/// rest uniformly at random without duplicates.
pub fn sample_permutations<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<Permutation> {
    assert!(k >= 1, "need at least one permutation");
    let total = factorial_capped(len, k + 1);
    let want = k.min(total);
    let mut out = vec![Permutation::identity(len)];
    let reverse = Permutation::reverse(len);
    if want >= 2 && !out.contains(&reverse) {
        out.push(reverse);
    }
    if total <= k {
        for p in all_permutations(len) {
            if out.len() == want {
                break;
            }
            if !out.contains(&p) {
                out.push(p);
            }
        }
        return out;
    }
    while out.len() < want {
        let p = Permutation::random(len, rng);
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// `n!`, saturating at `cap`.
fn factorial_capped(n: usize, cap: usize) -> usize {
    let mut acc = 1usize;
    for i in 2..=n {
        acc = acc.saturating_mul(i);
        if acc >= cap {
            return cap;
        }
    }
    acc
}

/// All permutations of `1..=len` in lexicographic order.
pub fn all_permutations(len: usize) -> Vec<Permutation> {
    let mut cur: Vec<usize> = (1..=len).collect();
    let mut out = vec![Permutation { order: cur.clone() }];
    loop {
        let Some(i) = (1..cur.len()).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..cur.len()).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot has a successor");
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(Permutation { order: cur.clone() });
    }
}
