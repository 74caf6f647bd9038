mod common;

use common::models::{prior_config, C, V};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vardepth::prior::{sample_scale, train_prior, truncated_softmax, Context, Prior, PriorSample, PriorTrainConfig};
use vardepth::tokenizer::{ScaleSchedule, TokenMap};
use vardepth::{Error, Graph, Tensor};

fn random_tokens(seed: u64) -> Vec<TokenMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = ScaleSchedule::desk();
    (1..=10)
        .map(|k| {
            let (h, w) = s.get(k).unwrap();
            TokenMap::new(k, h, w, (0..h * w).map(|_| rng.random_range(0..V)).collect()).unwrap()
        })
        .collect()
}

fn prior(seed: u64) -> Prior {
    Prior::new(prior_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn initial_loss_is_near_uniform() {
    let p = prior(0);
    let cond = Tensor::randn(&[C, 6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let enc = p.project_condition(&cond).unwrap();
    let loss = p.teacher_forcing_loss(&random_tokens(2), &enc).unwrap();
    assert!((loss - (V as f32).ln()).abs() < 0.1, "{loss}");
}

#[test]
fn scale_logits_ignore_later_scales() {
    let p = prior(3);
    let cond = p
        .project_condition(&Tensor::randn(&[C, 6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4)))
        .unwrap();
    let tokens = random_tokens(5);
    let g = Graph::new();
    let b = p.params.bind(&g, false);
    let full = p.logits_var(&b, &tokens, p.encoding_context(&g, &cond).unwrap(), 10).unwrap().value();
    let offsets = ScaleSchedule::desk().offsets();
    for k in 1..=10 {
        let alone = p.predict_scale_logits(&tokens[..k - 1], &cond, k).unwrap();
        let rows = &full.data()[offsets[k - 1] * V..offsets[k] * V];
        for (a, b) in alone.data().iter().zip(rows) {
            assert!((a - b).abs() < 1e-4, "scale {k}: {a} vs {b}");
        }
    }
    assert!(matches!(p.predict_scale_logits(&tokens[..2], &cond, 5), Err(Error::Contract(_))));
}

#[test]
fn condition_and_null_context_differ() {
    let p = prior(6);
    let tokens = random_tokens(7);
    let cond = p
        .project_condition(&Tensor::randn(&[C, 6, 8], 2.0, &mut ChaCha8Rng::seed_from_u64(8)))
        .unwrap();
    let g = Graph::new();
    let b = p.params.bind(&g, false);
    let with = p.logits_var(&b, &tokens, p.encoding_context(&g, &cond).unwrap(), 3).unwrap().value();
    let without = p.logits_var(&b, &tokens, Context::Null, 3).unwrap().value();
    assert_ne!(with.data(), without.data());
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let data: Vec<PriorSample> = (0..4)
        .map(|i| PriorSample {
            tokens: random_tokens(10 + (i % 2)),
            cond: Tensor::randn(&[C, 6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(20 + i)),
        })
        .collect();
    let cfg = PriorTrainConfig {
        phase_a_epochs: 2,
        phase_b_epochs: 40,
        batch_size: 2,
        lr: 3e-3,
        seed: 1,
        ..PriorTrainConfig::default()
    };
    let run = || train_prior(&data[..2], &data, prior_config(), &cfg).unwrap();
    let (p1, log1) = run();
    let (p2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(p1.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(), p2.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
    assert!(log1.iter().take(2).all(|r| r.phase == 0));
    assert_eq!(log1.last().unwrap().phase, 1);
    let first = log1[0].loss;
    let last = log1.last().unwrap().loss;
    assert!(last < 0.8 * first, "{first} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncated_softmax_is_a_distribution(seed in any::<u64>(), top_k in 1usize..=16, temp in 0.1f32..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f32> = (0..16).map(|_| rng.random_range(-6.0f32..6.0)).collect();
        let p = truncated_softmax(&logits, temp, top_k).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(p.iter().filter(|&&q| q > 0.0).count(), top_k);
        // Kept entries are exactly the largest logits.
        let min_kept = (0..16).filter(|&i| p[i] > 0.0).map(|i| logits[i]).fold(f32::INFINITY, f32::min);
        let max_dropped = (0..16).filter(|&i| p[i] == 0.0).map(|i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(min_kept >= max_dropped);
    }

    #[test]
    fn sampling_is_seeded(seed in any::<u64>()) {
        let logits = Tensor::randn(&[6, 16], 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = sample_scale(&logits, 3, (2, 3), 1.0, 16, seed).unwrap();
        let b = sample_scale(&logits, 3, (2, 3), 1.0, 16, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let greedy = sample_scale(&logits, 3, (2, 3), 1.0, 1, seed).unwrap();
        for (row, &i) in logits.data().chunks(16).zip(greedy.indices()) {
            prop_assert!(row.iter().all(|&x| x <= row[i]));
        }
    }
}

#[test]
fn invalid_sampling_settings() {
    assert!(matches!(truncated_softmax(&[0.0; 4], 0.0, 2), Err(Error::Config(_))));
    assert!(matches!(truncated_softmax(&[0.0; 4], 1.0, 5), Err(Error::Config(_))));
}
