//! Property tests for the invariants each module promises.

use proptest::prelude::*;

use dida_core::attention::{
    attend_with, dida_forward_with, dida_loss, mask_salient_region, soften, vda_signal, AttentionConfig, SignalMode,
};
use dida_core::encoder::{Encoder, EncoderConfig};
use dida_core::scene::{generate_scene, upsample_bilinear, BackgroundMode, DataConfig, BACKGROUND_SPREAD};
use dida_core::train::{grabcut_seeds, iou, Optimizer, OptimizerKind, Seed, SEED_BACKGROUND, SEED_FOREGROUND};
use dida_core::{backward, Tensor};

fn small_encoder(seed: u64) -> Encoder {
    Encoder::new(EncoderConfig {
        input_size: 16,
        conv_widths: vec![4, 6],
        feature_dim: 8,
        seed,
        ..EncoderConfig::default()
    })
    .unwrap()
}

fn small_data(seed: u64, background: BackgroundMode) -> DataConfig {
    DataConfig {
        image_size: 16,
        min_size: 4.0,
        max_size: 7.0,
        background,
        seed,
        ..DataConfig::default()
    }
}

fn cosine_gap(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| (x / na - y / nb).abs()).fold(0.0, f64::max)
}

fn background_mode() -> impl Strategy<Value = BackgroundMode> {
    prop_oneof![Just(BackgroundMode::UniformNoise), Just(BackgroundMode::SmoothGradient)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn first_order_gradients_ignore_build_higher(seed in 0u64..1000, index in 0u64..1000) {
        let encoder = small_encoder(seed);
        let scene = generate_scene(&small_data(seed, BackgroundMode::UniformNoise), index).unwrap();
        let grads = |higher: bool| {
            let params = encoder.variables();
            let f = encoder.forward_with(&params, &scene.image).unwrap().features;
            let loss = f.dot(&f).unwrap();
            backward(&loss, &params, higher).unwrap()
        };
        let (plain, higher) = (grads(false), grads(true));
        for (a, b) in plain.iter().zip(&higher) {
            prop_assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn encoder_forward_is_pure(seed in 0u64..1000, index in 0u64..1000) {
        let encoder = small_encoder(seed);
        let before = encoder.clone();
        let scene = generate_scene(&small_data(seed, BackgroundMode::UniformNoise), index).unwrap();
        let a = encoder.forward(&scene.image).unwrap();
        let b = encoder.forward(&scene.image).unwrap();
        prop_assert_eq!(a.features.data(), b.features.data());
        prop_assert_eq!(a.activations.tensor().data(), b.activations.tensor().data());
        prop_assert_eq!(&encoder, &before);
        prop_assert!(a.features.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn raw_map_is_max_normalized(
        seed in 0u64..1000,
        index in 0u64..1000,
        dot in any::<bool>(),
    ) {
        let encoder = small_encoder(seed);
        let scene = generate_scene(&small_data(seed, BackgroundMode::UniformNoise), index).unwrap();
        let mode = if dot { SignalMode::Dot } else { SignalMode::threshold() };
        let params = encoder.params().to_vec();
        let (map, _) = attend_with(&encoder, &params, &scene, mode, false, AttentionConfig::default()).unwrap();
        let raw = map.raw.data();
        prop_assert!(raw.iter().all(|&m| (0.0..=1.0).contains(&m)));
        let max = raw.iter().copied().fold(0.0, f64::max);
        // Scaling by the reciprocal of the maximum can round one ulp low.
        prop_assert!((max - 1.0).abs() <= f64::EPSILON || raw.iter().all(|&m| m == 0.0), "max {}", max);
        prop_assert!(map.softened.data().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn dida_loss_lies_in_unit_interval(
        pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let loss = dida_loss(&Tensor::from_slice(&a), &Tensor::from_slice(&b)).unwrap().item();
        prop_assert!((0.0..=1.0 + 1e-15).contains(&loss), "loss {}", loss);
        let positive = a.iter().any(|&v| v > 0.0) && b.iter().any(|&v| v > 0.0);
        if positive && cosine_gap(&a, &b) > 1e-6 {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn dida_loss_vanishes_on_proportional_maps(
        a in proptest::collection::vec(0.01f64..1.0, 1..20),
        c in 1e-3f64..1e3,
    ) {
        let b: Vec<f64> = a.iter().map(|v| v * c).collect();
        let loss = dida_loss(&Tensor::from_slice(&a), &Tensor::from_slice(&b)).unwrap().item();
        prop_assert!(loss.abs() < 1e-14, "loss {}", loss);
    }

    #[test]
    fn dida_loss_is_scale_invariant(
        pairs in proptest::collection::vec((0.01f64..1.0, 0.0f64..1.0), 2..20),
        c in 1e-3f64..1e3,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(b.iter().any(|&v| v > 0.0));
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        let target = Tensor::from_slice(&b);
        let base = dida_loss(&Tensor::from_slice(&a), &target).unwrap().item();
        let other = dida_loss(&Tensor::from_slice(&scaled), &target).unwrap().item();
        prop_assert!((base - other).abs() <= 8.0 * f64::EPSILON, "{} vs {}", base, other);
    }

    #[test]
    fn threshold_and_dot_signals_agree_for_unit_features(
        masked in proptest::collection::vec(0.0f64..1.0, 1..16),
    ) {
        let f = Tensor::ones(&[masked.len()]);
        let fm = Tensor::from_slice(&masked);
        let threshold = vda_signal(&f, &fm, SignalMode::Threshold { keep_fraction: 1.0 }).unwrap().item();
        let dot = vda_signal(&f, &fm, SignalMode::Dot).unwrap().item();
        prop_assert_eq!(threshold, dot);
    }

    #[test]
    fn masks_align_with_objects_and_background(
        seed in 0u64..1000,
        index in 0u64..1000,
        background in background_mode(),
    ) {
        let scene = generate_scene(&small_data(seed, background), index).unwrap();
        let side = scene.size();
        let plane = side * side;
        prop_assert!(!scene.objects.is_empty() && scene.objects.len() <= 3);
        for (i, &s) in scene.saliency.data().iter().enumerate() {
            let px: Vec<f64> = (0..3).map(|c| scene.image.data()[c * plane + i]).collect();
            if s == 1.0 {
                prop_assert!(scene.objects.iter().any(|o| o.color.as_slice() == px.as_slice()));
            } else {
                prop_assert_eq!(s, 0.0);
                for (v, m) in px.iter().zip(scene.background.mean) {
                    prop_assert!((v - m).abs() <= BACKGROUND_SPREAD + 1e-12);
                }
            }
        }
        for o in &scene.objects {
            let half = o.size / 2.0;
            for c in [o.center.0, o.center.1] {
                prop_assert!(c - half >= 0.0 && c + half <= side as f64);
            }
        }
    }

    #[test]
    fn scene_generation_is_deterministic(seed in any::<u64>(), index in any::<u64>()) {
        let config = small_data(seed, BackgroundMode::SmoothGradient);
        prop_assert_eq!(generate_scene(&config, index).unwrap(), generate_scene(&config, index).unwrap());
    }

    #[test]
    fn masking_a_scene_changes_its_features(seed in 0u64..1000, index in 0u64..1000) {
        let encoder = small_encoder(seed);
        let scene = generate_scene(&small_data(seed, BackgroundMode::UniformNoise), index).unwrap();
        let (masked, spec) = mask_salient_region(&scene.image, &scene.saliency).unwrap();
        prop_assert!(spec.area() > 0);
        let f = encoder.forward(&scene.image).unwrap().features;
        let fm = encoder.forward(&masked).unwrap().features;
        prop_assert!(f.data().iter().zip(fm.data()).any(|(a, b)| a != b));

        // A uniform image already holds the fill value inside the box.
        let flat = Tensor::full(&[3, 16, 16], 0.5);
        let (refilled, _) = mask_salient_region(&flat, &scene.saliency).unwrap();
        let fa = encoder.forward(&flat).unwrap().features;
        let fb = encoder.forward(&refilled).unwrap().features;
        prop_assert_eq!(fa.data(), fb.data());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        a in proptest::collection::vec(any::<bool>(), 16),
        b in proptest::collection::vec(any::<bool>(), 16),
    ) {
        let t = |v: &[bool]| Tensor::new(&[4, 4], v.iter().map(|&x| f64::from(u8::from(x))).collect()).unwrap();
        let (ta, tb) = (t(&a), t(&b));
        let ab = iou(&ta, &tb).unwrap();
        prop_assert_eq!(ab, iou(&tb, &ta).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&ta, &ta).unwrap(), 1.0);
    }

    #[test]
    fn seeds_follow_map_thresholds(map in proptest::collection::vec(0.0f64..1.0, 4 * 4)) {
        let t = Tensor::new(&[4, 4], map.clone()).unwrap();
        let seeds = grabcut_seeds(&t, SEED_FOREGROUND, SEED_BACKGROUND);
        let fg = map.iter().filter(|&&v| v > SEED_FOREGROUND).count();
        let bg = map.iter().filter(|&&v| v < SEED_BACKGROUND).count();
        prop_assert_eq!(seeds.count(Seed::Foreground), fg);
        prop_assert_eq!(seeds.count(Seed::Background), bg);
        prop_assert_eq!(seeds.count(Seed::Unknown), 16 - fg - bg);
    }

    #[test]
    fn upsampling_preserves_range(map in proptest::collection::vec(0.0f64..1.0, 2 * 2)) {
        let up = upsample_bilinear(&Tensor::new(&[2, 2], map.clone()).unwrap(), 16, 16);
        let (lo, hi) = map.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(up.data().iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters(
        grads in proptest::collection::vec(-5.0f64..5.0, 6),
        adam in any::<bool>(),
    ) {
        let params = vec![Tensor::from_slice(&[0.5, -1.0, 2.0]), Tensor::from_slice(&[3.0, 0.0, -0.25])];
        let grads = vec![Tensor::from_slice(&grads[..3]), Tensor::from_slice(&grads[3..])];
        let kind = if adam { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        let mut opt = Optimizer::new(kind, 0.0, &params);
        let next = opt.step(&params, &grads);
        for (a, b) in params.iter().zip(&next) {
            prop_assert_eq!(a.data(), b.data());
        }
    }
}

#[test]
fn softening_fixes_the_midpoint() {
    let out = soften(&Tensor::scalar(0.5), 16.0, 0.5).unwrap();
    assert_eq!(out.item(), 0.5);
}

#[test]
fn dida_gradient_vanishes_when_map_matches_target() {
    let encoder = small_encoder(3);
    let scene = generate_scene(&small_data(3, BackgroundMode::UniformNoise), 5).unwrap();
    let params = encoder.variables();
    let out = dida_forward_with(&encoder, &params, &scene, AttentionConfig::default()).unwrap();
    let reference = backward(&out.loss, &params, false).unwrap();
    let scale = reference.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 1e-6, "reference gradient {scale} too small to compare against");

    let matched = out.map.softened.detach().mul_const(2.5).unwrap();
    let loss = dida_loss(&out.map.softened, &matched).unwrap();
    assert!(loss.item().abs() < 1e-14);
    let grads = backward(&loss, &params, false).unwrap();
    let worst = grads.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 1e-10 * scale, "stationary gradient {worst} vs reference {scale}");
}

#[test]
fn checkpoint_round_trip_reproduces_maps() {
    let encoder = small_encoder(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    encoder.save(&path).unwrap();
    let loaded = Encoder::load(&path).unwrap();
    assert_eq!(loaded, encoder);
    let scene = generate_scene(&small_data(11, BackgroundMode::UniformNoise), 2).unwrap();
    let params = encoder.params().to_vec();
    let loaded_params = loaded.params().to_vec();
    for mode in [SignalMode::Dot, SignalMode::threshold()] {
        let cfg = AttentionConfig::default();
        let (a, _) = attend_with(&encoder, &params, &scene, mode, false, cfg).unwrap();
        let (b, _) = attend_with(&loaded, &loaded_params, &scene, mode, false, cfg).unwrap();
        assert_eq!(a.raw.data(), b.raw.data());
        assert_eq!(a.softened.data(), b.softened.data());
    }
}
