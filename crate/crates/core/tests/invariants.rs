mod common;

use common::*;
use gsslam::dynamic_masking::fuse_masks;
use gsslam::geometry::SE3Pose;
use gsslam::losses::{evaluate, LossTargets, LossWeights};
use gsslam::raster::{LabelMap, Mask};
use gsslam::rasterizer::{render_with, RenderSettings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const W: usize = 24;
const H: usize = 20;

fn render(gs: &[gsslam::gaussian_map::Gaussian]) -> gsslam::rasterizer::RenderOutput {
    render_with(
        gs,
        &SE3Pose::identity(),
        &camera(W, H),
        &RenderSettings::default(),
        NUM_CLASSES,
        FEATURE_DIM,
    )
}

fn random_mask(rng: &mut ChaCha8Rng, p: f64) -> Mask {
    Mask::from_vec(W, H, (0..W * H).map(|_| rng.gen_bool(p)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_grows_with_opacity(seed in any::<u64>(), n in 1usize..12, bump in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gs = random_scene(&mut rng, n, (-3.0, 1.0));
        let before = render(&gs);
        let i = rng.gen_range(0..n);
        gs[i].opacity_logit += bump;
        let after = render(&gs);
        for (a, b) in after.alpha.data().iter().zip(before.alpha.data()) {
            prop_assert!(*a >= b - 1e-12, "alpha fell from {b} to {a}");
        }
    }

    #[test]
    fn render_ignores_input_order(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = random_scene(&mut rng, n, (-1.0, 3.0));
        let mut shuffled = gs.clone();
        shuffled.reverse();
        shuffled.rotate_left(rng.gen_range(0..n));
        let (a, b) = (render(&gs), render(&shuffled));
        prop_assert!(max_abs_diff(&a.color, &b.color) <= 1e-12);
        prop_assert!(max_abs_diff(&a.depth, &b.depth) <= 1e-12);
        prop_assert!(max_abs_diff(&a.alpha, &b.alpha) <= 1e-12);
    }

    #[test]
    fn semantic_rows_are_distributions(seed in any::<u64>(), n in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = render(&random_scene(&mut rng, n, (-1.0, 3.0)));
        for i in 0..W * H {
            let row = out.semantic_prob.px(i);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_is_commutative_and_idempotent(seed in any::<u64>(), p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_mask(&mut rng, p), random_mask(&mut rng, 1.0 - p));
        prop_assert_eq!(fuse_masks(&a, &b).unwrap(), fuse_masks(&b, &a).unwrap());
        prop_assert_eq!(fuse_masks(&a, &a).unwrap(), a);
    }

    #[test]
    fn masked_pixels_never_matter(seed in any::<u64>(), p in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = render(&random_scene(&mut rng, 8, (-1.0, 3.0)));
        let mask = random_mask(&mut rng, p);
        prop_assume!(mask.count() < W * H);
        let color = random_image(&mut rng, W, H, 3);
        let depth = random_image(&mut rng, W, H, 1);
        let features = random_image(&mut rng, W, H, FEATURE_DIM);
        let labels = LabelMap::from_vec(W, H, (0..W * H).map(|_| rng.gen_range(0..NUM_CLASSES as u8)).collect()).unwrap();

        let (mut color2, mut depth2, mut features2, mut labels2) = (color.clone(), depth.clone(), features.clone(), labels.clone());
        for (i, m) in mask.data().iter().enumerate() {
            if *m {
                color2.px_mut(i).iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0));
                depth2.px_mut(i)[0] = rng.gen_range(-5.0..5.0);
                features2.px_mut(i).iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0));
                labels2.data_mut()[i] = rng.gen_range(0..NUM_CLASSES as u8);
            }
        }
        let weights = LossWeights::default();
        let t1 = LossTargets { color: &color, depth: &depth, labels: &labels, features: &features };
        let t2 = LossTargets { color: &color2, depth: &depth2, labels: &labels2, features: &features2 };
        let (r1, g1) = evaluate(&out, &t1, &mask, &weights).unwrap();
        let (r2, g2) = evaluate(&out, &t2, &mask, &weights).unwrap();
        prop_assert_eq!(r1, r2);
        prop_assert_eq!(g1, g2);
    }
}
