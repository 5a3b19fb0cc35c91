//! The model and the importance accumulator against the f64 oracle.

mod common;

use common::{no_hook, Oracle};
use neuralloc::data::{Example, PairId};
use neuralloc::importance::{accumulate_batch, Criterion, ImportanceTable};
use neuralloc::mask::{Mask, SiteKey};
use neuralloc::model::{build_model, Batch, ForwardOptions, ModelConfig, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairs() -> Vec<PairId> {
    vec!["src2cp".parse().unwrap(), "src2rv".parse().unwrap()]
}

/// Tiny model with every parameter (LN and biases included) randomised so
/// that no term of the forward pass is trivially zero or one.
fn scrambled(seed: u64, tie_output: bool) -> TransformerModel {
    let mut cfg = ModelConfig::tiny(pairs());
    cfg.tie_output = tie_output;
    let mut model = build_model(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in model.params.iter_mut() {
        let data: Vec<f32> = p.value.data().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        p.value.set_data(data).unwrap();
    }
    model
}

fn examples() -> Vec<Example> {
    vec![
        Example { src: vec![4, 9, 10, 11, 12], tgt: vec![13, 14, 15] },
        Example { src: vec![5, 16, 17], tgt: vec![18, 19, 20, 21] },
        Example { src: vec![4, 22, 23, 24, 25, 26], tgt: vec![27] },
    ]
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[test]
fn forward_loss_matches_oracle() {
    for (seed, tie) in [(1, false), (2, true), (3, false)] {
        let model = scrambled(seed, tie);
        let batch = Batch { pair: 1, examples: examples() };
        let out = model.forward_train(&batch, ForwardOptions::default()).unwrap();
        let oracle = Oracle::new(&model).mean_loss(&batch.examples, &mut no_hook);
        assert!(rel(out.loss_value() as f64, oracle) < 1e-5, "seed {seed}: {} vs {oracle}", out.loss_value());
    }
}

#[test]
fn masked_forward_matches_oracle_with_zeroed_units() {
    let model = scrambled(4, false);
    let registry = model.registry().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bits: Vec<bool> = (0..registry.len()).map(|_| rng.gen_bool(0.7)).collect();
    let mask = Mask::from_bits(&registry, bits.clone()).unwrap();
    let batch = Batch { pair: 0, examples: examples() };
    let out = model
        .forward_train(&batch, ForwardOptions { mask: Some(&mask), ..Default::default() })
        .unwrap();
    let oracle = Oracle::new(&model).mean_loss(&batch.examples, &mut |_, key: SiteKey, h: &mut [f64]| {
        let g = registry.group(key).unwrap();
        for row in h.chunks_mut(g.width) {
            for (u, v) in row.iter_mut().enumerate() {
                if !bits[g.offset + u] {
                    *v = 0.0;
                }
            }
        }
    });
    assert!(rel(out.loss_value() as f64, oracle) < 1e-5);
}

#[test]
fn taylor_scores_match_finite_difference_oracle() {
    let model = scrambled(5, false);
    let exs = examples();
    let mut table = ImportanceTable::new(Criterion::Te, pairs(), model.registry().clone());
    for pair in 0..2 {
        accumulate_batch(&model, &Batch { pair, examples: exs.clone() }, &mut table).unwrap();
    }
    table.finalize().unwrap();

    let oracle = Oracle::new(&model);
    let registry = model.registry();
    let mut expected = vec![0.0f64; registry.len()];
    let eps = 1e-5;
    for (e, ex) in exs.iter().enumerate() {
        let acts = common::capture(&oracle, ex);
        for g in registry.groups() {
            let h = &acts[&g.key];
            for (idx, &hv) in h.iter().enumerate() {
                let shifted = |delta: f64| {
                    oracle.example_loss(e, ex, &mut |_, key: SiteKey, a: &mut [f64]| {
                        if key == g.key {
                            a[idx] += delta;
                        }
                    })
                };
                let grad = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                expected[g.offset + idx % g.width] += (grad * hv).abs();
            }
        }
    }
    let tokens: usize = exs.iter().map(|e| e.tgt.len() + 1).sum();
    let mut worst = 0.0f64;
    for (i, exp) in expected.iter().enumerate() {
        let exp = exp / tokens as f64;
        for pair in 0..2 {
            let err = (table.score(pair, i) - exp).abs() / exp.abs().max(1e-4);
            worst = worst.max(err);
        }
    }
    assert!(worst < 2e-3, "worst relative error {worst}");
}

#[test]
fn activation_scores_match_oracle_means() {
    let model = scrambled(6, false);
    let exs = examples();
    let mut table = ImportanceTable::new(Criterion::Av, pairs(), model.registry().clone());
    for pair in 0..2 {
        accumulate_batch(&model, &Batch { pair, examples: exs.clone() }, &mut table).unwrap();
    }
    table.finalize().unwrap();
    let oracle = Oracle::new(&model);
    let mut expected = vec![0.0f64; model.registry().len()];
    for ex in &exs {
        for (key, h) in common::capture(&oracle, ex) {
            let g = model.registry().group(key).unwrap();
            for (idx, v) in h.iter().enumerate() {
                expected[g.offset + idx % g.width] += v.abs();
            }
        }
    }
    let tokens: usize = exs.iter().map(|e| e.tgt.len() + 1).sum();
    for (i, exp) in expected.iter().enumerate() {
        let exp = exp / tokens as f64;
        assert!((table.score(0, i) - exp).abs() <= 1e-5 * exp.abs().max(1.0), "neuron {i}");
    }
}
