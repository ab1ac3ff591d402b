use ampn_core::config::ModelConfig;
use ampn_core::lpr::blend_final;
use ampn_core::model::Model;
use ampn_core::objectives::{psnr, ssim};
use ampn_core::pyramid::{decompose_tensor, reconstruct_tensor};
use ampn_core::render::adjust_mask_strength;
use ampn_core::tensor::Tensor;
use ampn_core::types::{FocusMask, ImageTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(seed: u64, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn image(seed: u64, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(tensor(seed, [1, 3, h, w], 0.0, 1.0).cast()).unwrap()
}

fn mask(seed: u64, h: usize, w: usize) -> FocusMask {
    FocusMask::new(tensor(seed, [1, 1, h, w], 0.0, 1.0).cast()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pyramid_is_linear(seed in any::<u64>(), levels in 1usize..=3, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let shape = [1, 3, 32, 48];
        let (x, y) = (tensor(seed, shape, -1.0, 1.0), tensor(seed ^ 1, shape, -1.0, 1.0));
        let mixed = x.zip_map(&y, |p, q| a * p + b * q);
        let (px, py, pm) = (
            decompose_tensor(&x, levels).unwrap(),
            decompose_tensor(&y, levels).unwrap(),
            decompose_tensor(&mixed, levels).unwrap(),
        );
        let combine = |s: &Tensor<f64>, t: &Tensor<f64>| s.zip_map(t, |p, q| a * p + b * q);
        prop_assert!(pm.residual.max_abs_diff(&combine(&px.residual, &py.residual)) < 1e-9);
        for k in 0..levels {
            prop_assert!(pm.highfreq[k].max_abs_diff(&combine(&px.highfreq[k], &py.highfreq[k])) < 1e-9);
        }
    }

    #[test]
    fn pyramid_round_trips(seed in any::<u64>(), levels in 1usize..=3, hk in 1usize..=4, wk in 1usize..=4) {
        let x = tensor(seed, [2, 3, 8 * hk, 8 * wk], 0.0, 1.0);
        let back = reconstruct_tensor(&decompose_tensor(&x, levels).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn blend_stays_between_its_inputs(seed in any::<u64>()) {
        let i0 = image(seed, 8, 12);
        let b_int: Tensor<f32> = tensor(seed ^ 2, [1, 3, 8, 12], -0.5, 1.5).cast();
        let m = mask(seed ^ 3, 8, 12);
        let out = blend_final(&i0, &b_int, &m).unwrap();
        for ((o, a), b) in out.tensor().data().iter().zip(i0.tensor().data()).zip(b_int.data()) {
            prop_assert!(*o >= a.min(*b).max(0.0) - 1e-6 && *o <= a.max(*b).min(1.0) + 1e-6);
        }
    }

    #[test]
    fn mask_strength_is_idempotent(seed in any::<u64>(), tau in 0.05f32..=1.0, frac in 0.0f32..1.0) {
        let background = frac * tau;
        let m = mask(seed, 6, 9);
        let once = adjust_mask_strength(&m, background, tau).unwrap();
        let twice = adjust_mask_strength(&once, background, tau).unwrap();
        prop_assert_eq!(&once, &twice);
        for (v, orig) in once.tensor().data().iter().zip(m.tensor().data()) {
            let expected = if *orig >= tau { *orig } else { background };
            prop_assert_eq!(*v, expected);
        }
    }

    #[test]
    fn ssim_and_psnr_are_symmetric(seed in any::<u64>()) {
        let (a, b) = (image(seed, 16, 16), image(seed ^ 5, 16, 16));
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn predicted_masks_are_probabilities(seed in 0u64..1000, hk in 1usize..=2, wk in 1usize..=3) {
        let model = Model::new(&ModelConfig::default(), seed).unwrap();
        let d = ModelConfig::default().divisor();
        let m = model.predict_mask(&image(seed, d * hk, d * wk)).unwrap();
        prop_assert!(m.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let l = ModelConfig::default().pyramid_levels;
        prop_assert_eq!((m.height(), m.width()), (d * hk >> l, d * wk >> l));
    }
}
