use proptest::prelude::*;

use zsar_core::backbone_sim::{apply_dual_adapter, DualAdapter, FrameFeatures};
use zsar_core::msm::{motion_stats, sample_streams, saliency_profile};
use zsar_core::numerics::{softmax, RngStream, Tensor};
use zsar_core::text_space::classify;

fn clip(seed: u64, t: usize, scale: f64) -> FrameFeatures {
    let x = RngStream::new(seed, 77).generator().gaussian(&[t, 2, 2, 4], scale);
    FrameFeatures::new(x).unwrap()
}

fn even_frames() -> impl Strategy<Value = usize> {
    (2usize..=8).prop_map(|h| 2 * h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sampled_positions_stay_in_range_and_samples_are_convex(
        seed in any::<u64>(),
        t in even_frames(),
        offsets in prop::collection::vec(-20.0f64..20.0, 32),
    ) {
        let x = clip(seed, t, 1.0);
        let dg = Tensor::vector(offsets[..t].to_vec());
        let dd = Tensor::vector(offsets[16..16 + t].to_vec());
        let s = sample_streams(&x, &dg, &dd).unwrap();
        let frame = 16;
        for (idx, vals) in [(&s.idx_global, &s.x_global), (&s.idx_dynamic, &s.x_dynamic)] {
            for (i, &p) in idx.data().iter().enumerate() {
                prop_assert!(p >= 1.0 && p <= t as f64);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(t);
                for j in 0..frame {
                    let a = x.tensor().data()[(lo - 1) * frame + j];
                    let b = x.tensor().data()[(hi - 1) * frame + j];
                    let v = vals.data()[i * frame + j];
                    prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn saliency_ignores_feature_shift_and_scale(
        seed in any::<u64>(),
        t in even_frames(),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let x = clip(seed, t, 1.0);
        let moved = FrameFeatures::new(x.tensor().map(|v| scale * v + shift)).unwrap();
        let a = saliency_profile(&x, 0.75, 0.25).unwrap();
        let b = saliency_profile(&moved, 0.75, 0.25).unwrap();
        for (p, q) in a.m.data().iter().zip(b.m.data()) {
            prop_assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }

    #[test]
    fn motion_statistics_are_non_negative(seed in any::<u64>(), t in even_frames()) {
        let x = clip(seed, t, 2.0);
        let e = Tensor::new(vec![t, 4], x.tensor().data().chunks(16).flat_map(|f| f[..4].to_vec()).collect()).unwrap();
        let p = motion_stats(&e).unwrap();
        prop_assert!(p.v.data().iter().chain(p.c.data()).all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_initialized_adapter_is_exact_identity(seed in any::<u64>(), n in 1usize..12) {
        let mut s = RngStream::new(seed, 1).generator();
        let adapter = DualAdapter::identity_init(8, &mut s);
        let tokens = s.gaussian(&[n, 8], 3.0);
        prop_assert_eq!(apply_dual_adapter(&adapter, &tokens).unwrap(), tokens);
    }

    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-30.0f64..30.0, 2..10), c in -50.0f64..50.0) {
        let a = softmax(&Tensor::vector(xs.clone()));
        let b = softmax(&Tensor::vector(xs.iter().map(|x| x + c).collect()));
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_ignores_positive_rescaling(seed in any::<u64>(), k in 2usize..6, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut s = RngStream::new(seed, 2).generator();
        let e_v = s.gaussian(&[6], 1.0);
        let classes = s.gaussian(&[k, 6], 1.0);
        let mut rescaled = classes.clone();
        let row = s.below(k);
        for v in &mut rescaled.data_mut()[row * 6..(row + 1) * 6] {
            *v *= b;
        }
        let p = classify(&e_v, &classes).unwrap();
        let q = classify(&e_v.scale(a), &rescaled).unwrap();
        prop_assert_eq!(p.argmax(), q.argmax());
    }
}
