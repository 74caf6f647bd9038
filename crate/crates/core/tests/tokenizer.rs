mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vardepth::tokenizer::{lookup, quantize, Codebook, ScaleSchedule, TokenMap, Tokenizer, TokenizerConfig, TokenizerTrainConfig, TokenizerTrainer};
use vardepth::Tensor;

/// Exhaustive scan kept separate from the library: strict `<` in f64 so the
/// first minimum wins.
fn scan(f: &Tensor, z: &Tensor) -> Vec<usize> {
    let (c, n) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    let v = z.shape()[0];
    (0..n)
        .map(|p| {
            let mut best = (f64::INFINITY, usize::MAX);
            for i in 0..v {
                let d: f64 = (0..c)
                    .map(|ch| (f.data()[ch * n + p] as f64 - z.data()[i * c + ch] as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        })
        .collect()
}

fn integer_tensor(shape: &[usize], lo: i32, hi: i32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..=hi) as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_agrees_with_scan(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Small integers make exact ties common.
        let mut z = integer_tensor(&[16, 4], -2, 2, &mut rng);
        z.data_mut()[..4].fill(0.0);
        let f = integer_tensor(&[4, h, w], -2, 2, &mut rng);
        let book = Codebook::new(z.clone()).unwrap();
        let r = quantize(&f, &book, 1).unwrap();
        prop_assert_eq!(r.indices(), &scan(&f, &z)[..]);
    }

    #[test]
    fn lookup_then_quantize_is_identity_on_distinct_rows(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let book = Codebook::random(16, 4, 1.0, &mut rng).unwrap();
        let idx: Vec<usize> = (0..12).map(|_| rng.random_range(0..16)).collect();
        let r = TokenMap::new(4, 3, 4, idx).unwrap();
        let again = quantize(&lookup(&r, &book).unwrap(), &book, 4).unwrap();
        prop_assert_eq!(again, r);
    }
}

fn identity_tokenizer(book: Tensor, seed: u64) -> Tokenizer {
    let (v, c) = (book.shape()[0], book.shape()[1]);
    let cfg = TokenizerConfig {
        widths: [4, 4, 4],
        ..TokenizerConfig::depth(c, v, ScaleSchedule::desk())
    };
    let mut tok = Tokenizer::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    tok.set_identity_theta();
    tok.codebook = Codebook::new(book).unwrap();
    tok
}

/// Every integer vector of `[-b, b]^2`, zero first.
fn lattice_codebook(b: i32) -> Tensor {
    let mut rows = vec![0.0, 0.0];
    for x in -b..=b {
        for y in -b..=b {
            if (x, y) != (0, 0) {
                rows.extend([x as f32, y as f32]);
            }
        }
    }
    Tensor::new(&[rows.len() / 2, 2], rows).unwrap()
}

#[test]
fn codebook_row_latents_reconstruct_exactly() {
    let tok = identity_tokenizer(lattice_codebook(4), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        // One codebook row per latent pixel.
        let f = integer_tensor(&[2, 6, 8], -1, 1, &mut rng);
        let enc = tok.encode_multiscale(&f).unwrap();
        assert_eq!(tok.decode_multiscale(&enc.tokens).unwrap(), f);
        assert_eq!(*enc.residual_norms.last().unwrap(), 0.0);
    }
    // A constant latent is taken entirely by the first scale.
    let f = Tensor::new(&[2, 6, 8], [vec![2.0; 48], vec![-3.0; 48]].concat()).unwrap();
    let enc = tok.encode_multiscale(&f).unwrap();
    assert!(enc.tokens[1..].iter().all(|r| r.indices().iter().all(|&i| i == 0)));
    assert_eq!(tok.decode_multiscale(&enc.tokens).unwrap(), f);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn final_residual_matches_reconstruction_error(seed in any::<u64>(), std in 0.05f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tok = identity_tokenizer(Codebook::random(16, 4, 1.0, &mut rng).unwrap().entries().clone(), seed);
        if seed % 2 == 1 {
            // Learned-looking refinements: no longer the identity.
            tok = Tokenizer::new(tok.config.clone(), &mut rng).unwrap();
        }
        let f = Tensor::randn(&[4, 6, 8], std, &mut rng);
        let enc = tok.encode_multiscale(&f).unwrap();
        let recon = tok.decode_multiscale(&enc.tokens).unwrap();
        let err = f.sub(&recon).unwrap().norm();
        prop_assert!((err - enc.residual_norms[9]).abs() < 1e-5 * (1.0 + err), "{} vs {}", err, enc.residual_norms[9]);

        for k in 1..=10 {
            let (h, w) = tok.schedule().get(k).unwrap();
            let direct = tok.encode_at_scale(&f, k).unwrap();
            let two_step = tok.decode_prefix(&enc.tokens[..k]).unwrap().cell_mean(h, w).unwrap();
            prop_assert_eq!(direct, two_step);
        }
    }
}

#[test]
fn training_lowers_reconstruction_error_and_keeps_row_zero() {
    let mut cfg = vardepth::config::RunConfig::default();
    cfg.data.n_train = 16;
    cfg.data.n_val = 0;
    cfg.data.n_test = 0;
    let [train, _, _] = vardepth::recipe::synthetic_splits(&cfg).unwrap();
    let images: Vec<Tensor> = train.iter().map(|s| s.depth_image.clone()).collect();
    let mut tok = Tokenizer::new(common::models::tokenizer_config(false), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let row0 = tok.codebook.entries().data()[..common::models::C].to_vec();
    let tc = TokenizerTrainConfig {
        epochs: 6,
        batch_size: 4,
        ..TokenizerTrainConfig::default()
    };
    let log = TokenizerTrainer::new(&tok, tc).run(&mut tok, &images, |_| {}).unwrap();
    assert_eq!(log.len(), 7);
    assert!(log[6].mse < log[0].mse, "{:?}", log.iter().map(|s| s.mse).collect::<Vec<_>>());
    assert_eq!(&tok.codebook.entries().data()[..common::models::C], &row0[..]);
    assert!(row0.iter().all(|&v| v == 0.0));
}

#[test]
fn empty_training_set_is_a_config_error() {
    let mut tok = Tokenizer::new(common::models::tokenizer_config(false), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = TokenizerTrainer::new(&tok, TokenizerTrainConfig::default()).run(&mut tok, &[], |_| {}).unwrap_err();
    assert!(matches!(err, vardepth::Error::Config(_)), "{err}");
}
