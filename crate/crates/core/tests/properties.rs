use std::collections::BTreeMap;

use lipsync_core::checkpoint::Checkpoint;
use lipsync_core::data::io::{format_kv, parse_kv};
use lipsync_core::data::{build_umask, mask_frame, Image};
use lipsync_core::evalkit::{pearson, psnr, slope, ssim};
use lipsync_core::nn::ParamStore;
use lipsync_core::pipeline::palindrome_index;
use lipsync_core::Tensor;
use proptest::prelude::*;

fn image(size: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..=1.0, 3 * size * size).prop_map(move |d| Image::from_planar(size, size, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masking_is_idempotent_and_keeps_the_outside(img in image(16)) {
        let m = build_umask(16).unwrap();
        let once = mask_frame(&img, &m).unwrap();
        prop_assert_eq!(&mask_frame(&once, &m).unwrap(), &once);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let want = if m.at(x, y) { 0.0 } else { img.get(c, x, y) };
                    prop_assert_eq!(once.get(c, x, y), want);
                }
            }
        }
    }

    #[test]
    fn image_metrics_are_symmetric_and_bounded(a in image(16), b in image(16)) {
        let (p1, p2) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(p1, p2);
        prop_assert!(p1 <= 100.0);
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
        prop_assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn checkpoints_round_trip(
        arrays in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}", prop::collection::vec(any::<f32>(), 1..40), 1..6),
        meta in prop::collection::btree_map("[a-z.]{1,10}", "[ -~]{0,12}", 0..4),
    ) {
        let mut p = ParamStore::new();
        for (k, v) in &arrays {
            p.insert(k.clone(), Tensor::from_vec(&[v.len()], v.clone()).unwrap());
        }
        let mut c = Checkpoint::new("model", "f00d", p);
        c.config = meta;
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        for (k, v) in &arrays {
            let bits: Vec<u32> = back.params.get(k).unwrap().data().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
        prop_assert_eq!(back.config, c.config);
    }

    #[test]
    fn kv_round_trip(map in prop::collection::btree_map("[a-z][a-z_.]{0,12}", "[!-~]{0,16}", 0..8)) {
        let back: BTreeMap<String, String> = parse_kv(&format_kv(&map)).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn palindrome_stays_in_range_and_steps_by_one(len in 1usize..40, t in 0usize..500) {
        let i = palindrome_index(t, len);
        prop_assert!(i < len);
        if len > 1 {
            let j = palindrome_index(t + 1, len);
            prop_assert_eq!(i.abs_diff(j), 1);
        }
    }

    #[test]
    fn slope_recovers_affine_maps(xs in prop::collection::vec(-5.0f64..5.0, 3..30), a in -3.0f64..3.0, b in -2.0f64..2.0) {
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        prop_assert!((slope(&xs, &ys) - a).abs() < 1e-6);
        if a.abs() > 1e-3 {
            prop_assert!((pearson(&xs, &ys) - a.signum()).abs() < 1e-9);
        }
    }
}
