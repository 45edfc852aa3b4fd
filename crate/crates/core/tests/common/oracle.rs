//! Independent reference implementations used by several test binaries.

use silora::backbone::{BinaryMask, SoftMask};

/// Double loop over pixels; foreground is the positive class.
pub fn confusion_oracle(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (pred.get(y, x), gt.get(y, x)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    (tp, fp, fn_, tn)
}

/// Textbook formulas with the empty-denominator convention.
pub fn metrics_oracle((tp, fp, fn_, tn): (u64, u64, u64, u64)) -> [f64; 7] {
    let pct = |n: u64, d: u64, empty: bool| {
        if d > 0 {
            100.0 * n as f64 / d as f64
        } else if empty {
            100.0
        } else {
            0.0
        }
    };
    let p = pct(tp, tp + fp, tp + fn_ == 0);
    let r = pct(tp, tp + fn_, tp + fp == 0);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let iou_fg = pct(tp, tp + fp + fn_, true);
    let iou_bg = pct(tn, tn + fp + fn_, true);
    [
        pct(tp + tn, tp + fp + fn_ + tn, true),
        p,
        r,
        f1,
        (iou_bg + iou_fg) / 2.0,
        iou_bg,
        iou_fg,
    ]
}

/// Right-closed 256-bin index, derived independently of the library.
fn bin_of(v: f32) -> u128 {
    let k = (f64::from(v) * 256.0).ceil() - 1.0;
    k.clamp(0.0, 255.0) as u128
}

/// Exhaustive Otsu: for each candidate `t = (k+1)/256` split pixels by `v > t`
/// and score the between-class variance of their bin indices as an exact
/// fraction. Lowest threshold wins ties.
pub fn otsu_oracle(m: &SoftMask) -> Option<f32> {
    let bins: Vec<u128> = m.data().iter().map(|&v| bin_of(v)).collect();
    let n = bins.len() as u128;
    let s: u128 = bins.iter().sum();
    let mut best: Option<(f32, u128, u128)> = None;
    for k in 0..256u32 {
        let t = (k + 1) as f32 / 256.0;
        let mut n0 = 0u128;
        let mut s0 = 0u128;
        for (&v, &b) in m.data().iter().zip(&bins) {
            if v <= t {
                n0 += 1;
                s0 += b;
            }
        }
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // σ_B² · N² = (S0·N − S·n0)² / (n0·n1)
        let d = (s0 * n).abs_diff(s * n0);
        let (num, den) = (d * d, n0 * n1);
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}
