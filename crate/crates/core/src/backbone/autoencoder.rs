//! Linear patch autoencoder fitted by principal component analysis.
//!
//! Each `f×f×3` patch maps to one latent token. For a linear autoencoder under
//! squared reconstruction error the optimum is the top principal subspace, so
//! "pretraining" is a closed-form eigendecomposition of the patch covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use super::grid::ImageGrid;
use crate::tensor::Mat;

/// Patch vectors of an image, one row per latent token (row-major token grid).
/// Each row is ordered `(dy, dx, channel)`.
pub(crate) fn extract_patches(x: &ImageGrid, factor: usize) -> Mat {
    let (lh, lw) = (x.height() / factor, x.width() / factor);
    let p = factor * factor * 3;
    let mut out = Mat::zeros(lh * lw, p);
    let data = x.data();
    for i in 0..lh {
        for j in 0..lw {
            let row = out.row_mut(i * lw + j);
            let mut k = 0;
            for dy in 0..factor {
                let y = i * factor + dy;
                let base = (y * x.width() + j * factor) * 3;
                for v in &data[base..base + factor * 3] {
                    row[k] = f64::from(*v);
                    k += 1;
                }
            }
        }
    }
    out
}

/// Inverse of [`extract_patches`]; values are clamped to `[0, 1]`.
pub(crate) fn assemble_patches(patches: &Mat, lh: usize, lw: usize, factor: usize) -> ImageGrid {
    let (h, w) = (lh * factor, lw * factor);
    let mut data = vec![0.0f32; h * w * 3];
    for i in 0..lh {
        for j in 0..lw {
            let row = patches.row(i * lw + j);
            let mut k = 0;
            for dy in 0..factor {
                let y = i * factor + dy;
                let base = (y * w + j * factor) * 3;
                for dst in &mut data[base..base + factor * 3] {
                    *dst = row[k] as f32;
                    k += 1;
                }
            }
        }
    }
    ImageGrid::from_raw_clamped(h, w, data)
}

/// Top-`k` principal directions (`k × P`, rows unit-norm) and the patch mean.
pub(crate) fn fit_pca(corpus: &[Mat], k: usize) -> (Mat, Vec<f64>) {
    let p = corpus[0].cols();
    let n: usize = corpus.iter().map(Mat::rows).sum();
    let mut mean = vec![0.0; p];
    for m in corpus {
        for i in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(p, p);
    let mut centered = vec![0.0; p];
    for m in corpus {
        for i in 0..m.rows() {
            for ((c, v), mu) in centered.iter_mut().zip(m.row(i)).zip(&mean) {
                *c = v - mu;
            }
            for a in 0..p {
                let ca = centered[a];
                for b in a..p {
                    cov[(a, b)] += ca * centered[b];
                }
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut w = Mat::zeros(k, p);
    for (r, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        // Fix the sign so the component sums to a non-negative value.
        let sign = if col.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for (dst, v) in w.row_mut(r).iter_mut().zip(col.iter()) {
            *dst = sign * v;
        }
    }
    (w, mean)
}
