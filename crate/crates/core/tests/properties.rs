//! Property tests over the public surface: message purity and round trips,
//! parameter arithmetic, projection scale invariance, metric symmetries.

use duomark_core::config::RunConfig;
use duomark_core::evaluation::{psnr, ssim, PsnrValue};
use duomark_core::image::ImageBatch;
use duomark_core::message::{make_message, BitMessage};
use duomark_core::models::{init_models, project};
use duomark_core::params::ParameterSet;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use proptest::prelude::*;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.message_length = 4;
    c.model.image_size = [16, 16];
    c.model.latent_dim = 8;
    c.model.projection_dim = 8;
    c.model.enc_channels = 4;
    c.model.enc_blocks = 1;
    c.model.dec_channels = 4;
    c.model.dec_blocks = 2;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn make_message_is_pure(seed in any::<u64>(), n in 1usize..64) {
        let a = make_message(seed, n).unwrap();
        let b = make_message(seed, n).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.bits().iter().all(|&bit| bit <= 1));
    }

    #[test]
    fn bit_message_round_trips(bits in proptest::collection::vec(0u8..=1, 1..64)) {
        let m = BitMessage::new(bits).unwrap();
        let text = m.to_bit_string();
        prop_assert_eq!(BitMessage::from_bit_string(&text).unwrap(), m.clone());
        let json = serde_json::to_vec(&m).unwrap();
        let back: BitMessage = serde_json::from_slice(&json).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn parameter_lerp_endpoints_and_schema(
        vals_a in proptest::collection::vec(-10.0f64..10.0, 6),
        vals_b in proptest::collection::vec(-10.0f64..10.0, 6),
        tau in 0.0f64..=1.0,
    ) {
        let mut a = ParameterSet::<f64>::new();
        let mut b = ParameterSet::<f64>::new();
        a.insert("w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vals_a).unwrap());
        b.insert("w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vals_b).unwrap());
        let mixed = a.lerp(&b, tau).unwrap();
        prop_assert_eq!(mixed.schema(), a.schema());
        prop_assert_eq!(a.lerp(&b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(a.lerp(&b, 0.0).unwrap(), b.clone());
        for ((m, x), y) in mixed.get("w").unwrap().iter()
            .zip(a.get("w").unwrap().iter())
            .zip(b.get("w").unwrap().iter())
        {
            prop_assert!((m - (tau * x + (1.0 - tau) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_scale_invariant(
        seed in any::<u64>(),
        scale in 0.001f64..1000.0,
    ) {
        let cfg = tiny_config();
        let (_, _, head) = init_models::<f64>(&cfg, seed);
        let mut rng_state = seed;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let z = Array2::from_shape_fn((2, 8), |_| next());
        prop_assume!(z.rows().into_iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let p1 = project(&head, &z).unwrap();
        let p2 = project(&head, &z.mapv(|v| v * scale)).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
        for row in p1.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_self_is_one(seed in any::<u64>()) {
        let img_a = duomark_core::data::synthetic_image::<f64>(16, 16, seed, 0);
        let img_b = duomark_core::data::synthetic_image::<f64>(16, 16, seed, 1);
        let mut a = Array4::zeros((1, 3, 16, 16));
        let mut b = Array4::zeros((1, 3, 16, 16));
        a.index_axis_mut(ndarray::Axis(0), 0).assign(&img_a);
        b.index_axis_mut(ndarray::Axis(0), 0).assign(&img_b);
        let a = ImageBatch::new(a).unwrap();
        let b = ImageBatch::new(b).unwrap();
        match (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap()) {
            (PsnrValue::Identical, PsnrValue::Identical) => {}
            (PsnrValue::Db(x), PsnrValue::Db(y)) => prop_assert_eq!(x, y),
            other => prop_assert!(false, "asymmetric psnr {:?}", other),
        }
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_dimension_is_size_agnostic(side in 2usize..5) {
        // Any supported input size pools down to the configured latent dim.
        let cfg = tiny_config();
        let (_, decs, _) = init_models::<f64>(&cfg, 5);
        let hw = side * 8;
        let x = ImageBatch::<f64>::splat(2, hw, hw, 0.4).unwrap();
        let z = duomark_core::models::extract_features(&decs[0], &x).unwrap();
        prop_assert_eq!(z.dim(), (2, 8));
    }
}
