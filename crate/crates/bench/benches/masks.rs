use criterion::{black_box, criterion_group, criterion_main, Criterion};
use textrecon::masking::{all_permutations, query_text_mask, sample_permutations, Permutation};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn masks(c: &mut Criterion) {
    let perm = Permutation::random(25, &mut ChaCha8Rng::seed_from_u64(0));
    c.bench_function("query_text_mask_len25", |b| b.iter(|| query_text_mask(black_box(&perm), &[3, 7, 11])));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("sample_permutations_len8_k6", |b| b.iter(|| sample_permutations(8, 6, &mut rng)));
    c.bench_function("all_permutations_len5", |b| b.iter(|| all_permutations(black_box(5))));
}

criterion_group!(benches, masks);
criterion_main!(benches);
