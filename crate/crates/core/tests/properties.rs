use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use structvae::color::{downsample_chroma, rgb_to_ycbcr, ycbcr_to_rgb, Plane, RgbImage};
use structvae::data::pnm::{encode_ppm, parse_pnm};
use structvae::oracle::random_instance;
use structvae::structured::dense::spd_log_det;
use structvae::structured::SparsityPattern;

fn plane(h: usize, w: usize) -> impl Strategy<Value = Plane> {
    prop::collection::vec(0.0f64..=255.0, h * w).prop_map(move |d| Plane::new(h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pattern_rows_are_causal(h in 1usize..9, w in 1usize..9, big in any::<bool>(), dil in 1usize..3) {
        let nf = if big { 5 } else { 3 };
        let p = SparsityPattern::new(h, w, nf, dil).unwrap();
        prop_assert_eq!(p.num_slots(), (nf * nf - 1) / 2 + 1);
        let mut total = 0;
        for i in 0..h * w {
            let cols = p.offsets(i);
            total += cols.len();
            prop_assert_eq!(*cols.last().unwrap(), i);
            prop_assert!(cols.windows(2).all(|c| c[0] < c[1]));
            prop_assert!(cols.len() <= p.num_slots());
        }
        prop_assert_eq!(total, p.nnz());
    }

    #[test]
    fn sparse_log_det_matches_dense(seed in any::<u64>()) {
        let l = random_instance(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let dense = l.to_dense().unwrap();
        let want = spd_log_det(&dense.precision).unwrap();
        prop_assert!((l.log_det_precision() - want).abs() <= 1e-8 * want.abs().max(1.0));
    }

    #[test]
    fn back_substitution_inverts_transpose(seed in any::<u64>()) {
        let l = random_instance(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let n = l.pattern().num_pixels();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let e = l.solve_transpose(&v).unwrap();
        let back = l.apply_transpose(&e).unwrap();
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn color_round_trip_within_one_level(r in plane(4, 4), g in plane(4, 4), b in plane(4, 4)) {
        let rgb = RgbImage::new(r, g, b).unwrap();
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&rgb)).unwrap();
        for (x, y) in [(&rgb.r, &back.r), (&rgb.g, &back.g), (&rgb.b, &back.b)] {
            for (a, c) in x.data.iter().zip(&y.data) {
                prop_assert!((a - c).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn block_mean_preserves_the_mean(p in plane(8, 8), f in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let small = p.block_mean(f).unwrap();
        prop_assert!((small.mean() - p.mean()).abs() < 1e-12);
    }

    #[test]
    fn downsampled_chroma_keeps_luma(r in plane(8, 8), g in plane(8, 8), b in plane(8, 8)) {
        let ycc = rgb_to_ycbcr(&RgbImage::new(r, g, b).unwrap());
        let small = downsample_chroma(&ycc, 4).unwrap();
        prop_assert_eq!(&small.y, &ycc.y);
        prop_assert_eq!(small.cb.height, 2);
    }

    #[test]
    fn ppm_round_trip(px in prop::collection::vec(0u8..=255, 3 * 6)) {
        let chan = |c: usize| Plane::new(2, 3, (0..6).map(|i| px[i * 3 + c] as f64).collect()).unwrap();
        let img = RgbImage::new(chan(0), chan(1), chan(2)).unwrap();
        let parsed = parse_pnm(&encode_ppm(&img)).unwrap();
        prop_assert_eq!(parsed.image, img);
        prop_assert!(!parsed.grayscale);
    }
}
