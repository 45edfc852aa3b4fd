//! Mask ↔ 3-channel codec and Otsu binarization of decoded predictions.

use crate::backbone::{BinaryMask, ImageGrid, SoftMask};
use crate::error::{Error, Result};

/// Default histogram resolution for [`otsu_threshold`].
pub const OTSU_BINS: usize = 256;

/// Replicates a single-channel mask into all three channels (`y = m ⊗ 𝟙₃`).
pub fn mask_to_rgb(m: &SoftMask) -> ImageGrid {
    let data = m.data().iter().flat_map(|&v| [v, v, v]).collect();
    // SoftMask values are already validated to lie in [0, 1].
    ImageGrid::new(m.height(), m.width(), data).expect("soft mask values are in range")
}

/// Per-pixel mean of the three channels.
pub fn rgb_to_mask(y: &ImageGrid) -> SoftMask {
    let data = y
        .data()
        .chunks_exact(3)
        .map(|c| ((f64::from(c[0]) + f64::from(c[1]) + f64::from(c[2])) / 3.0) as f32)
        .collect();
    SoftMask::new(y.height(), y.width(), data).expect("mean of in-range channels is in range")
}

/// Histogram bin of a value in `[0, 1]`.
///
/// Bins are right-closed, `(k/bins, (k+1)/bins]`, with 0 folded into the first
/// bin, so that `v > (k+1)/bins` holds exactly for values above bin `k`.
pub fn histogram_bin(v: f32, bins: usize) -> usize {
    let scaled = f64::from(v) * bins as f64;
    let b = scaled.ceil() as isize - 1;
    b.clamp(0, bins as isize - 1) as usize
}

/// Threshold maximizing between-class variance over a `bins`-bucket histogram.
///
/// Returns the upper edge of the last background bin; pixels strictly above it
/// are foreground. Ties resolve to the lowest threshold. Comparisons are done
/// in exact integer arithmetic on bin indices.
pub fn otsu_threshold(m: &SoftMask, bins: usize) -> Result<f32> {
    if bins < 2 {
        return Err(Error::Argument(format!("need at least 2 bins, got {bins}")));
    }
    let mut hist = vec![0u64; bins];
    for &v in m.data() {
        hist[histogram_bin(v, bins)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u128 = hist.iter().enumerate().map(|(k, &c)| k as u128 * u128::from(c)).sum();

    // Between-class variance at split k is (S0·N − S·n0)² / (N² n0 n1); the N²
    // factor is shared, so candidates compare as num/den fractions.
    let mut best: Option<(usize, u128, u128)> = None;
    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    for k in 0..bins - 1 {
        n0 += hist[k];
        s0 += k as u128 * u128::from(hist[k]);
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (s0 * u128::from(total)).abs_diff(total_sum * u128::from(n0));
        let num = diff * diff;
        let den = u128::from(n0) * u128::from(n1);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => wide_gt(num, bd, bn, den),
        };
        if better {
            best = Some((k, num, den));
        }
    }
    match best {
        Some((k, _, _)) => Ok(((k + 1) as f64 / bins as f64) as f32),
        None => Err(Error::Degenerate("all values fall into a single histogram bin".into())),
    }
}

/// `a·b > c·d` for values whose products may exceed 128 bits.
fn wide_gt(a: u128, b: u128, c: u128, d: u128) -> bool {
    let (ah, al) = mul_wide(a, b);
    let (ch, cl) = mul_wide(c, d);
    (ah, al) > (ch, cl)
}

fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    const MASK: u128 = u64::MAX as u128;
    let (a1, a0) = (a >> 64, a & MASK);
    let (b1, b0) = (b >> 64, b & MASK);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let p11 = a1 * b1;
    let mid = (p00 >> 64) + (p01 & MASK) + (p10 & MASK);
    let lo = (p00 & MASK) | (mid << 64);
    let hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

/// Pixel is foreground iff its value is strictly greater than `thr`.
pub fn binarize(m: &SoftMask, thr: f32) -> BinaryMask {
    let data = m.data().iter().map(|&v| u8::from(v > thr)).collect();
    BinaryMask::new(m.height(), m.width(), data).expect("binarized values are 0 or 1")
}
