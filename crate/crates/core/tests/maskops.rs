mod common;

use common::oracle::otsu_oracle;
use common::{random_soft_mask, rng};
use proptest::prelude::*;
use rand::Rng;
use silora::backbone::{ImageGrid, SoftMask};
use silora::error::Error;
use silora::maskops::{binarize, mask_to_rgb, otsu_threshold, rgb_to_mask, OTSU_BINS};

#[test]
fn otsu_matches_exhaustive_search() {
    let mut r = rng(42);
    for _ in 0..300 {
        let m = random_soft_mask(&mut r, 32, 32);
        match otsu_oracle(&m) {
            Some(t) => assert_eq!(otsu_threshold(&m, OTSU_BINS).unwrap(), t),
            None => assert!(matches!(otsu_threshold(&m, OTSU_BINS), Err(Error::Degenerate(_)))),
        }
    }
}

#[test]
fn bimodal_half_and_half() {
    let data: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
    let m = SoftMask::new(8, 8, data.clone()).unwrap();
    let t = otsu_threshold(&m, OTSU_BINS).unwrap();
    assert!(t > 0.1 && t < 0.9);
    let b = binarize(&m, t);
    for (v, bit) in data.iter().zip(b.data()) {
        assert_eq!(*bit == 1, *v == 0.9);
    }
}

#[test]
fn bimodal_ninety_ten() {
    let data: Vec<f32> = (0..100).map(|i| if i < 90 { 0.2 } else { 0.8 }).collect();
    let m = SoftMask::new(10, 10, data.clone()).unwrap();
    let t = otsu_threshold(&m, OTSU_BINS).unwrap();
    assert_eq!(Some(t), otsu_oracle(&m));
    let b = binarize(&m, t);
    assert_eq!(b.data().iter().filter(|&&v| v == 1).count(), 10);
    assert!(b.data()[90..].iter().all(|&v| v == 1));
}

#[test]
fn constant_input_is_degenerate() {
    let m = SoftMask::new(4, 4, vec![0.37; 16]).unwrap();
    assert!(matches!(otsu_threshold(&m, OTSU_BINS), Err(Error::Degenerate(_))));
}

#[test]
fn binarize_examples() {
    let m = SoftMask::new(1, 2, vec![0.3, 0.7]).unwrap();
    assert_eq!(binarize(&m, 0.5).data(), &[0, 1]);
    assert_eq!(binarize(&m, -1.0).data(), &[1, 1]);
    assert_eq!(binarize(&m, 2.0).data(), &[0, 0]);
    // strict inequality
    assert_eq!(binarize(&m, 0.7).data(), &[0, 0]);
}

#[test]
fn codec_examples() {
    let ones = SoftMask::new(2, 2, vec![1.0; 4]).unwrap();
    assert!(mask_to_rgb(&ones).data().iter().all(|&v| v == 1.0));
    let px = SoftMask::new(1, 1, vec![0.4]).unwrap();
    assert_eq!(mask_to_rgb(&px).pixel(0, 0), [0.4, 0.4, 0.4]);
    let y = ImageGrid::new(1, 1, vec![0.0, 0.5, 1.0]).unwrap();
    assert_eq!(rgb_to_mask(&y).data(), &[0.5]);
}

#[test]
fn channel_mean_matches_scalar_loop() {
    let mut r = rng(7);
    let y = ImageGrid::from_fn(9, 11, |_, _| [r.random(), r.random(), r.random()]).unwrap();
    let m = rgb_to_mask(&y);
    for yy in 0..9 {
        for xx in 0..11 {
            let [a, b, c] = y.pixel(yy, xx);
            let mean = ((f64::from(a) + f64::from(b) + f64::from(c)) / 3.0) as f32;
            assert_eq!(m.data()[yy * 11 + xx], mean);
        }
    }
}

fn quantized_mask(seed: u64, max_level: u32) -> SoftMask {
    let mut r = rng(seed);
    let levels: Vec<u32> = (0..3).map(|_| r.random_range(0..max_level)).collect();
    let data = (0..256)
        .map(|_| {
            let k = levels[r.random_range(0..3)] + r.random_range(0..4);
            (2 * k + 1) as f32 / 512.0
        })
        .collect();
    SoftMask::new(16, 16, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn codec_round_trip(seed in any::<u64>()) {
        let m = random_soft_mask(&mut rng(seed), 7, 5);
        prop_assert_eq!(rgb_to_mask(&mask_to_rgb(&m)), m);
    }

    #[test]
    fn binarize_is_monotone(seed in any::<u64>(), t1 in -0.1f32..1.1, dt in 0.0f32..0.5) {
        let m = random_soft_mask(&mut rng(seed), 8, 8);
        let lo = binarize(&m, t1);
        let hi = binarize(&m, t1 + dt);
        for (a, b) in lo.data().iter().zip(hi.data()) {
            prop_assert!(b <= a);
        }
    }

    /// Shifting by whole bins keeps the partition. Values sit at bin centres so
    /// the shift is exact in f32.
    #[test]
    fn otsu_partition_survives_bin_aligned_shift(seed in any::<u64>(), shift in 0u32..64) {
        let m = quantized_mask(seed, 180);
        let shifted = SoftMask::new(16, 16, m.data().iter().map(|v| v + shift as f32 / 256.0).collect()).unwrap();
        match (otsu_threshold(&m, OTSU_BINS), otsu_threshold(&shifted, OTSU_BINS)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(binarize(&m, a), binarize(&shifted, b)),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }
}
