//! Row-sum and padding-mass violations of every attention map the model emits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlt::contrastive::masking_distribution;
use vlt::dataset::grammar_vocabulary;
use vlt::gradcheck::tiny_model_config;
use vlt::query::global_word_importance;
use vlt::transformer::MultiHeadAttention;
use vlt::{ParamStore, Tape, Tensor, Vlt};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Worst of |row sum - 1|, mass on padded columns and negative entries.
pub fn row_violation(t: &Tensor, valid: &[bool]) -> f64 {
    let (rows, cols) = t.dims2().unwrap();
    assert_eq!(cols, valid.len());
    let mut worst = 0.0f64;
    for r in 0..rows {
        let row = t.row(r);
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        for (&v, &ok) in row.iter().zip(valid) {
            if !ok {
                worst = worst.max(v.abs());
            }
            worst = worst.max(-v);
        }
    }
    worst
}

/// Runs the tiny model on random images and sentences of every length.
/// Returns the worst violation per map: `[A_sd, A_qd, p_m]`.
pub fn model_maps(instances: u64) -> [f64; 3] {
    let cfg = tiny_model_config();
    let vocab = grammar_vocabulary();
    let mut worst = [0.0f64; 3];
    for seed in 0..instances {
        let (model, store) = Vlt::new(&cfg, vocab.len(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        let amplitude = rng.gen_range(0.1..5.0);
        let image = rand_tensor(&mut rng, &[s, s, 3], amplitude);
        let len = 1 + seed as usize % cfg.max_words;
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(3..vocab.len())).collect();
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &store, &image, &tokens).unwrap();
        let valid = &out.lang.word_mask;
        worst[0] = worst[0].max(row_violation(tape.value(out.fused.attention.unwrap()), valid));
        let a_qd = tape.value(out.queries.attention.unwrap());
        worst[1] = worst[1].max(row_violation(a_qd, valid));
        let p = masking_distribution(&global_word_importance(a_qd), out.lang.length).unwrap();
        worst[2] = worst[2].max(row_violation(&Tensor::new([1, p.len()], p).unwrap(), valid));
    }
    worst
}

/// Per-head attention weights of standalone attention blocks.
pub fn attention_rows(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.gen_range(1..4);
        let dim = heads * 2;
        let (nq, nk) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let scale = rng.gen_range(0.1..20.0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", dim, heads).unwrap();
        let mut tape = Tape::inference();
        let q = tape.constant(rand_tensor(&mut rng, &[nq, dim], scale));
        let k = tape.constant(rand_tensor(&mut rng, &[nk, dim], scale));
        let (_, weights) = mha.forward_with_weights(&mut tape, &store, q, k, k).unwrap();
        for w in weights {
            worst = worst.max(row_violation(tape.value(w), &vec![true; nk]));
        }
    }
    worst
}
