use proptest::prelude::*;
use vardepth::synth::*;
use vardepth::Tensor;

fn family() -> impl Strategy<Value = SceneFamily> {
    prop_oneof![
        Just(SceneFamily::Indoor),
        Just(SceneFamily::Roadway),
        Just(SceneFamily::Empty)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rendered_values_are_in_range(seed in any::<u64>(), fam in family()) {
        let s = generate_scene(seed, &SceneConfig::new(48, 64, fam)).unwrap();
        prop_assert_eq!(s.rgb.shape(), &[3, 48, 64]);
        prop_assert!(s.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (&d, &ok) in s.depth.data().iter().zip(&s.valid) {
            if ok {
                prop_assert!(d > 0.0 && d as f64 <= FAR_CLIP, "{}", d);
            } else {
                prop_assert_eq!(d, 0.0);
            }
        }
        prop_assert!(s.valid.iter().any(|&v| v));
    }

    #[test]
    fn normalization_round_trips_inside_the_window(seed in any::<u64>(), fam in family()) {
        let s = generate_scene(seed, &SceneConfig::new(48, 64, fam)).unwrap();
        let spec = NormalizationSpec::default();
        let (n, range) = normalize_depth(&s.depth, &s.valid, &spec).unwrap();
        prop_assert!(range.lo < range.hi);
        prop_assert!(n.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = denormalize_depth(&n, range);
        for i in 0..n.numel() {
            let d = s.depth.data()[i] as f64;
            if s.valid[i] && d >= range.lo && d <= range.hi {
                prop_assert!((back.data()[i] as f64 - d).abs() < 1e-4 * d.max(1.0));
            }
            if !s.valid[i] {
                prop_assert_eq!(n.data()[i], 1.0);
            }
        }
    }
}

#[test]
fn every_family_is_reproducible_and_seed_sensitive() {
    for fam in [SceneFamily::Indoor, SceneFamily::Roadway, SceneFamily::Empty] {
        let cfg = SceneConfig::new(48, 64, fam);
        let a = generate_scene(5, &cfg).unwrap();
        assert_eq!(a, generate_scene(5, &cfg).unwrap());
        let b = generate_scene(6, &cfg).unwrap();
        // The empty family is a fixed ground plane.
        assert_eq!(a.depth == b.depth, fam == SceneFamily::Empty, "{fam:?}");
    }
}

#[test]
fn percentiles_land_on_the_window_edges() {
    let depth = Tensor::new(&[1, 101], (0..101).map(|i| 1.0 + i as f32).collect()).unwrap();
    let valid = vec![true; 101];
    let (n, range) = normalize_depth(&depth, &valid, &NormalizationSpec { p_lo: 10.0, p_hi: 90.0 }).unwrap();
    assert_eq!((range.lo, range.hi), (11.0, 91.0));
    assert_eq!(n.data()[10], -1.0);
    assert_eq!(n.data()[90], 1.0);
    assert_eq!(n.data()[0], -1.0);
    assert_eq!(n.data()[100], 1.0);
    assert!((n.data()[50]).abs() < 1e-6);
}

#[test]
fn bad_normalization_inputs() {
    let depth = Tensor::full(&[2, 2], 2.0);
    assert!(normalize_depth(&depth, &[false; 4], &NormalizationSpec::default()).is_err());
    assert!(normalize_depth(&depth, &[true; 3], &NormalizationSpec::default()).is_err());
    assert!(normalize_depth(&depth, &[true; 4], &NormalizationSpec { p_lo: 50.0, p_hi: 50.0 }).is_err());
}

#[test]
fn splits_have_requested_sizes() {
    let s = build_splits(200, 20, 50, 0);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (200, 20, 50));
    assert_ne!(build_splits(3, 0, 0, 1).train, s.train[..3]);
}
