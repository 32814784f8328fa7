use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lan_core::attention::{directional_encode, lasa_forward, lasa_weights, LasaParams};
use lan_core::config::KvConfig;
use lan_core::data::{
    augment, decode_raw, encode_raw, pack_bayer, unpack_bayer, BayerPattern, Dihedral, ImagePair, RawFrame,
};
use lan_core::infer::{crop_top_left, reflect_pad};
use lan_core::losses::l1_loss;
use lan_core::metrics::{psnr, ssim};
use lan_core::train::TrainConfig;
use lan_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lasa_case(seed: u64, c: usize, h: usize, w: usize) -> (Tensor<f64>, LasaParams<f64>) {
    let mut r = rng(seed);
    let f = Tensor::<f64>::randn(vec![c, h, w], 1.0, &mut r);
    let p = LasaParams::init(c, 2, seed.is_multiple_of(2), &mut r).unwrap();
    (f, p)
}

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::uniform(vec![c, h, w], 0.0, 1.0, &mut rng(seed))
}

fn pattern(i: usize) -> BayerPattern {
    [
        BayerPattern::Rggb,
        BayerPattern::Bggr,
        BayerPattern::Grbg,
        BayerPattern::Gbrg,
    ][i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lasa_commutes_with_flips(seed in any::<u64>(), c in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let (f, p) = lasa_case(seed, c, h, w);
        for axis in [1, 2] {
            let direct = lasa_forward(&f.flip(axis), &p).unwrap();
            let after = lasa_forward(&f, &p).unwrap().flip(axis);
            prop_assert!(direct.max_abs_diff(&after) <= 1e-10);
        }
    }

    #[test]
    fn lasa_commutes_with_rotation_on_squares(seed in any::<u64>(), c in 1usize..5, n in 1usize..9) {
        let (f, p) = lasa_case(seed, c, n, n);
        let direct = lasa_forward(&f.rot90(), &p).unwrap();
        let after = lasa_forward(&f, &p).unwrap().rot90();
        prop_assert!(direct.max_abs_diff(&after) <= 1e-10);
    }

    #[test]
    fn weights_are_rank_one_in_open_unit_interval(seed in any::<u64>(), c in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let (f, p) = lasa_case(seed, c, h, w);
        let a = lasa_weights(&directional_encode(&f).unwrap(), &p).unwrap();
        let outer = Tensor::from_fn(vec![c, h, w], |i| a.ay.at(&[i[0], i[1]]) * a.ax.at(&[i[0], i[2]]));
        prop_assert_eq!(&a.a3d, &outer);
        prop_assert!(a.a3d.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>(), h in 11usize..24, w in 11usize..24) {
        let x = image(seed, 3, h, w);
        let y = image(seed ^ 0x9e37, 3, h, w);
        let a = ssim(&x.unsqueeze0(), &y.unsqueeze0()).unwrap();
        let b = ssim(&y.unsqueeze0(), &x.unsqueeze0()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_ignores_joint_flips(seed in any::<u64>(), h in 1usize..16, w in 1usize..16, axis in 1usize..3) {
        let x = image(seed, 3, h, w);
        let y = image(seed.wrapping_add(1), 3, h, w);
        let a = psnr(&x, &y, 1.0).unwrap();
        let b = psnr(&x.flip(axis), &y.flip(axis), 1.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn augmentation_preserves_l1(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let pair = ImagePair {
            input: image(seed, 3, h, w).cast(),
            gt: image(seed ^ 7, 3, h, w).cast(),
            id: "p".into(),
        };
        let (aug, d) = augment(&pair, seed);
        prop_assert_eq!(aug.input.clone(), d.apply(&pair.input));
        prop_assert_eq!(aug.gt.clone(), d.apply(&pair.gt));
        let before = l1_loss(&pair.input, &pair.gt).unwrap();
        let after = l1_loss(&aug.input, &aug.gt).unwrap();
        prop_assert!((before - after).abs() <= 1e-6);
    }

    #[test]
    fn dihedral_index_round_trips(i in 0usize..8) {
        prop_assert_eq!(Dihedral::from_index(i).index(), i);
    }

    #[test]
    fn bayer_pack_is_a_bijection(seed in any::<u64>(), hh in 1usize..8, hw in 1usize..8, pi in 0usize..4) {
        let mut r = rng(seed);
        let counts = Tensor::<f32>::uniform(vec![1, 2 * hh, 2 * hw], 0.0, 16383.0, &mut r);
        let frame = RawFrame {
            mosaic: Tensor::from_fn(vec![1, 2 * hh, 2 * hw], |i| counts.at(i).round()),
            black_level: 512.0,
            white_level: 16383.0,
            exposure_ratio: 1.0 + (seed % 300) as f64,
            pattern: pattern(pi),
        };
        let packed = pack_bayer(&frame).unwrap();
        prop_assert_eq!(packed.shape(), &[4, hh, hw]);
        prop_assert_eq!(&unpack_bayer(&packed, frame.pattern).unwrap(), &frame.mosaic);
        let back = decode_raw(&encode_raw(&frame).unwrap()).unwrap();
        prop_assert_eq!(back, frame);
    }

    #[test]
    fn train_config_round_trips_through_text(
        epochs in 1usize..500,
        lr_exp in -6i32..-1,
        seed in any::<u64>(),
        lambda2 in 0.0f64..1.0,
        preset in prop::sample::select(vec!["tiny", "desk", "desk-bayer", "paper-rgb"]),
    ) {
        let mut cfg = TrainConfig::preset(preset).unwrap();
        cfg.epochs = epochs;
        cfg.lr = 10f64.powi(lr_exp) * 3.0;
        cfg.seed = seed;
        cfg.model.seed = seed.rotate_left(7);
        cfg.loss.lambda2 = lambda2;
        let text = cfg.to_kv().to_string();
        let back = TrainConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity(seed in any::<u64>(), c in 1usize..4, h in 1usize..20, w in 1usize..20, m in 1usize..9) {
        let t = image(seed, c, h, w);
        let p = reflect_pad(&t, m).unwrap();
        prop_assert_eq!(p.shape()[1] % m, 0);
        prop_assert_eq!(p.shape()[2] % m, 0);
        prop_assert!(p.shape()[1] - h < m && p.shape()[2] - w < m);
        prop_assert_eq!(crop_top_left(&p, h, w), t);
    }
}
