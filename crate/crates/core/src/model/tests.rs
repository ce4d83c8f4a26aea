use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::masking::{all_permutations, build_cloze_mask, query_text_mask, Permutation};
use crate::synthdata::{ImageShape, PatchSize};
use crate::textcodec::Charset;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_depth: 1,
        dec_depth: 2,
        ffn_mult: 2,
        image: ImageShape { height: 8, width: 32, channels: 1 },
        patch: PatchSize { height: 4, width: 8 },
        charset: Charset::prefix(6, 4).unwrap(),
        ..ModelConfig::default()
    }
}

fn random_patches(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..cfg.num_patches() * cfg.patch_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(cfg.num_patches(), cfg.patch_dim(), data)
}

/// A model whose weights are large enough that every path visibly matters.
fn loud_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

#[test]
fn default_shapes() {
    let cfg = ModelConfig { d_model: 16, n_heads: 2, enc_depth: 1, ..ModelConfig::default() };
    let model = Model::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let patches = random_patches(&cfg, &mut rng);
    let seq = cfg.charset.encode("abc").unwrap();
    let mask = query_text_mask(&Permutation::identity(3), &[]);
    let trace = model.forward(&patches, &VisualMaskPlan::none(128), &seq, &mask).unwrap();
    assert_eq!(trace.num_layers(), 4);
    for layer in &trace.layers {
        assert_eq!(layer.v.shape(), (128, 32));
        assert_eq!(layer.l.shape(), (4, cfg.vocab_size()));
        assert_eq!(layer.f_v.shape(), (128, 16));
        assert_eq!(layer.f_q.shape(), (4, 16));
        assert_eq!(layer.h_v.shape(), (128, 16));
        assert_eq!(layer.h_q.shape(), (4, 16));
    }
    let plan = VisualMaskPlan::from_masked(128, &(0..96).collect::<Vec<_>>());
    assert_eq!(model.encode_image(&patches, &plan).unwrap().rows(), 128);
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_config();
    let a = Model::new(cfg.clone(), 5).unwrap();
    let b = Model::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patches = random_patches(&cfg, &mut rng);
    let seq = cfg.charset.encode("abca").unwrap().with_masked_positions(&[2]);
    let plan = VisualMaskPlan::from_masked(cfg.num_patches(), &[1, 3]);
    let mask = query_text_mask(&Permutation::new(vec![2, 4, 1, 3]).unwrap(), &[2]);
    assert_eq!(a.forward(&patches, &plan, &seq, &mask).unwrap(), b.forward(&patches, &plan, &seq, &mask).unwrap());
}

#[test]
fn masked_patches_are_invisible() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = cfg.charset.encode("ab").unwrap();
    let mask = query_text_mask(&Permutation::identity(2), &[]);
    for _ in 0..20 {
        let patches = random_patches(&cfg, &mut rng);
        let plan = crate::masking::sample_visual_mask(cfg.num_patches(), 0.5, &mut rng);
        let mut edited = patches.clone();
        for &i in plan.masked() {
            for v in edited.row_mut(i) {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        assert_eq!(model.encode_image(&patches, &plan).unwrap(), model.encode_image(&edited, &plan).unwrap());
        assert_eq!(
            model.forward(&patches, &plan, &seq, &mask).unwrap(),
            model.forward(&edited, &plan, &seq, &mask).unwrap()
        );
    }
}

#[test]
fn masked_rows_are_mask_token_plus_position() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let patches = random_patches(&cfg, &mut rng);
    let plan = VisualMaskPlan::from_masked(cfg.num_patches(), &[0, 5]);
    let f_v = model.encode_image(&patches, &plan).unwrap();
    let tok = model.params.get(model.layout.vis_mask);
    let pos = model.params.get(model.layout.patch_pos);
    for &i in plan.masked() {
        for j in 0..cfg.d_model {
            assert_eq!(f_v.get(i, j), tok.get(0, j) + pos.get(i, j));
        }
    }
    // With nothing masked the mask token is never read.
    let mut other = model.clone();
    other.params.get_mut(other.layout.vis_mask).scale(3.0);
    let none = VisualMaskPlan::none(cfg.num_patches());
    assert_eq!(model.encode_image(&patches, &none).unwrap(), other.encode_image(&patches, &none).unwrap());
}

#[test]
fn text_embedding_rows() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 6);
    let emb = model.params.get(model.layout.tok_emb);
    let pos = model.params.get(model.layout.tok_pos);
    let cs = &cfg.charset;
    let seq = cs.encode("abcd").unwrap().with_masked_positions(&[1, 3]);
    let f_l = model.embed_text(&seq).unwrap();
    assert_eq!(f_l.rows(), 5);
    let expected_ids = [cs.bos(), cs.mask(), seq.ids()[1], cs.mask(), seq.ids()[3]];
    for (r, &id) in expected_ids.iter().enumerate() {
        for j in 0..cfg.d_model {
            assert_eq!(f_l.get(r, j), emb.get(id, j) + pos.get(r, j));
        }
    }
    // Masked rows differ only by their positional terms.
    for j in 0..cfg.d_model {
        let a = f_l.get(1, j) - pos.get(1, j);
        let b = f_l.get(3, j) - pos.get(3, j);
        assert!((a - b).abs() < 1e-15);
    }
    // Equal ids at different positions differ exactly by the positional tables.
    let same = model.embed_text(&cs.encode("aa").unwrap()).unwrap();
    for j in 0..cfg.d_model {
        let diff = same.get(2, j) - same.get(1, j);
        let pdiff = pos.get(2, j) - pos.get(1, j);
        assert!((diff - pdiff).abs() < 1e-15);
    }
    assert!(matches!(model.embed_text(&TokenSeq::new(vec![1; 5])), Err(ModelError::LabelTooLong { .. })));
}

fn rows_changed(a: &Matrix, b: &Matrix) -> Vec<bool> {
    (0..a.rows()).map(|r| a.row(r) != b.row(r)).collect()
}

/// Perturbs context column `col` (1-based character position) to a different
/// character and reports which logit rows change at each layer.
fn perturb_token(model: &Model, patches: &Matrix, seq: &TokenSeq, mask: &AttentionMask, col: usize) -> Vec<Vec<bool>> {
    let cs = &model.config.charset;
    let plan = VisualMaskPlan::none(model.config.num_patches());
    let base = model.forward(patches, &plan, seq, mask).unwrap();
    let mut ids = seq.ids().to_vec();
    ids[col - 1] = 1 + ids[col - 1] % cs.num_chars();
    let other = TokenSeq::new(ids).with_masked_positions(&seq.masked_positions());
    let pert = model.forward(patches, &plan, &other, mask).unwrap();
    base.layers.iter().zip(&pert.layers).map(|(a, b)| rows_changed(&a.l, &b.l)).collect()
}

#[test]
fn leakage_invariance_exhaustive() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let patches = random_patches(&cfg, &mut rng);
    for len in 1..=3 {
        let label: String = (0..len).map(|i| cfg.charset.chars()[i % 6]).collect();
        for perm in all_permutations(len) {
            for subset in 0..(1u32 << len) {
                let masked: Vec<usize> = (1..=len).filter(|p| subset & (1 << (p - 1)) != 0).collect();
                let seq = cfg.charset.encode(&label).unwrap().with_masked_positions(&masked);
                let mask = query_text_mask(&perm, &masked);
                for col in 1..=len {
                    let changed = perturb_token(&model, &patches, &seq, &mask, col);
                    for (layer, rows) in changed.iter().enumerate() {
                        for (q, &c) in rows.iter().enumerate() {
                            if !mask.get(q, col) {
                                assert!(!c, "leak: len {len} perm {:?} masked {masked:?} col {col} row {q} layer {layer}", perm.order());
                            }
                        }
                    }
                    let reachable = (0..mask.rows()).any(|q| mask.get(q, col));
                    assert_eq!(changed.last().unwrap().iter().any(|&c| c), reachable);
                }
            }
        }
    }
}

#[test]
fn literal_carry_leaks_from_the_second_layer() {
    let cfg = ModelConfig { visual_carry: VisualCarry::Literal, ..tiny_config() };
    let model = loud_model(cfg.clone(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let patches = random_patches(&cfg, &mut rng);
    let seq = cfg.charset.encode("abc").unwrap();
    let mask = query_text_mask(&Permutation::identity(3), &[]);
    // Under the causal order only the EOS row may read column 3.
    let changed = perturb_token(&model, &patches, &seq, &mask, 3);
    assert_eq!(changed[0], vec![false, false, false, true]);
    assert!(changed[1][0] && changed[1][1] && changed[1][2]);
}

#[test]
fn all_false_row_falls_back_to_bos() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let patches = random_patches(&cfg, &mut rng);
    let seq = cfg.charset.encode("abc").unwrap();
    let plan = VisualMaskPlan::none(cfg.num_patches());
    let mut empty = AttentionMask::filled(4, 4, true);
    let mut bos_only = empty.clone();
    for c in 0..4 {
        empty.set(1, c, false);
        bos_only.set(1, c, c == 0);
    }
    let a = model.forward(&patches, &plan, &seq, &empty).unwrap();
    let b = model.forward(&patches, &plan, &seq, &bos_only).unwrap();
    assert!(a.layers.iter().all(|l| l.h_q.data().iter().all(|v| v.is_finite())));
    assert_eq!(a, b);
}

#[test]
fn query_update_reads_vision_only_through_its_own_attention() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = cfg.d_model;
    let rand_m = |r: usize, rng: &mut ChaCha8Rng| Matrix::from_vec(r, d, (0..r * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let f_v = rand_m(cfg.num_patches(), &mut rng);
    let f_q = rand_m(3, &mut rng);
    let f_l = rand_m(3, &mut rng);
    let mask = query_text_mask(&Permutation::identity(2), &[]);
    let base = model.mvld_layer(0, &f_v, &f_q, &f_l, &mask).unwrap();
    let zeroed = model.mvld_layer(0, &Matrix::zeros(cfg.num_patches(), d), &f_q, &f_l, &mask).unwrap();
    // H_q never reads the visual stream; F_q does, via the query-to-visual step.
    assert_eq!(base.h_q, zeroed.h_q);
    assert_ne!(base.f_q, zeroed.f_q);
    assert_eq!(base.carry, base.h_v);
    assert!(matches!(
        model.mvld_layer(0, &f_v, &f_q, &f_l, &AttentionMask::filled(2, 3, true)),
        Err(ModelError::MaskShapeMismatch { .. })
    ));
}

#[test]
fn rows_with_equal_context_sets_agree_across_permutations() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let patches = random_patches(&cfg, &mut rng);
    let plan = VisualMaskPlan::none(cfg.num_patches());
    let seq = cfg.charset.encode("abcd").unwrap();
    let identity = query_text_mask(&Permutation::identity(4), &[]);
    let base = model.forward(&patches, &plan, &seq, &identity).unwrap();
    for perm in all_permutations(4) {
        let mask = query_text_mask(&perm, &[]);
        let trace = model.forward(&patches, &plan, &seq, &mask).unwrap();
        for q in 0..5 {
            if mask.row(q) == identity.row(q) {
                assert_eq!(trace.layers[0].l.row(q), base.layers[0].l.row(q));
            }
        }
    }
}

#[test]
fn skipping_the_visual_branch_keeps_logits() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let patches = random_patches(&cfg, &mut rng);
    let plan = VisualMaskPlan::none(cfg.num_patches());
    let seq = cfg.charset.encode("abc").unwrap();
    let masks = [query_text_mask(&Permutation::identity(3), &[]), build_cloze_mask(4, 4)];
    let mut g1 = Graph::new(model.params());
    let with = model.forward_graph(&mut g1, &patches, &plan, &seq, &masks, true).unwrap();
    let mut g2 = Graph::new(model.params());
    let without = model.forward_graph(&mut g2, &patches, &plan, &seq, &masks, false).unwrap();
    for (a, b) in with.iter().zip(&without) {
        for (la, lb) in a.iter().zip(b) {
            assert_eq!(g1.value(la.l), g2.value(lb.l));
            assert!(lb.v.is_none());
        }
    }
}

#[test]
fn separate_heads_per_layer() {
    let cfg = ModelConfig { shared_heads: false, ..tiny_config() };
    let model = Model::new(cfg.clone(), 0).unwrap();
    assert!(model.params().id("head_v0.fc1.w").is_some());
    assert!(model.params().id("head_l1.fc2.b").is_some());
    assert_eq!(model.visual_head_params().len(), 12);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config();
    let model = loud_model(cfg.clone(), 19);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vlrd");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    for ((_, na, a), (_, nb, b)) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
    let side = std::fs::read_to_string(sidecar_path(&path)).unwrap();
    assert!(side.contains("enc.pos 8x16"));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Model::load(&path), Err(ModelError::VersionMismatch { found: 9, .. })));
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Model::load(&path), Err(ModelError::BadMagic)));
}

#[test]
fn shape_errors() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 0).unwrap();
    let plan = VisualMaskPlan::none(cfg.num_patches());
    assert!(matches!(model.encode_image(&Matrix::zeros(3, 32), &plan), Err(ModelError::ShapeMismatch { .. })));
    let patches = Matrix::zeros(cfg.num_patches(), cfg.patch_dim());
    let seq = cfg.charset.encode("ab").unwrap();
    let wrong = AttentionMask::filled(3, 4, true);
    assert!(matches!(model.forward(&patches, &plan, &seq, &wrong), Err(ModelError::MaskShapeMismatch { .. })));
}
