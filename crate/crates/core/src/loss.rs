//! Training losses (L2, interval distortion regularizer, pluggable
//! perceptual term) and evaluation metrics (PSNR, SSIM).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Session, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_perceptual: f64,
    pub beta_dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_perceptual: 0.1, beta_dist: 0.01 }
    }
}

/// Mean squared error over all entries.
pub fn l2_loss<T: Scalar>(sess: &mut Session<T>, pred: TensorId, target: TensorId) -> TensorId {
    assert_eq!(
        sess.tape.shape(pred),
        sess.tape.shape(target),
        "l2 loss shape mismatch"
    );
    let n = sess.tape.shape(pred).iter().product::<usize>();
    let neg = sess.tape.neg(target);
    let diff = sess.tape.add(pred, neg);
    let sq = sess.tape.mul(diff, diff);
    let total = sess.tape.sum_all(sq);
    sess.tape.mul_scalar(total, 1.0 / n as f64)
}

/// Interval distortion regularizer, mean over rays. `weights` is [rays, N]
/// on the tape; `s_mid` and `s_width` are the normalized interval midpoints
/// and widths (constants, one value per sample, ray-normalized to [0,1]).
/// Per ray: sum_ij w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 ds_i, computed in
/// O(N) with exclusive cumulative sums.
pub fn distortion_loss<T: Scalar>(
    sess: &mut Session<T>,
    weights: TensorId,
    s_mid: &[f64],
    s_width: &[f64],
) -> TensorId {
    let shape = sess.tape.shape(weights).to_vec();
    assert_eq!(shape.len(), 2, "distortion weights must be [rays, N]");
    let (rays, n) = (shape[0], shape[1]);
    assert_eq!(s_mid.len(), rays * n, "midpoint count mismatch");
    assert_eq!(s_width.len(), rays * n, "width count mismatch");
    if rays == 0 {
        return sess.tape.scalar(0.0);
    }
    let s = sess.tape.constant(&[rays, n], s_mid.iter().map(|&v| T::from_f64(v)).collect());
    let ds = sess.tape.constant(&[rays, n], s_width.iter().map(|&v| T::from_f64(v)).collect());
    let ws = sess.tape.mul(weights, s);
    let wcum = sess.tape.cumsum_exclusive(weights, 1);
    let wscum = sess.tape.cumsum_exclusive(ws, 1);
    // 2 * sum_i w_i (s_i * Wcum_i - WScum_i) equals the full |s_i - s_j| double sum.
    let s_wcum = sess.tape.mul(s, wcum);
    let neg_wscum = sess.tape.neg(wscum);
    let inner = sess.tape.add(s_wcum, neg_wscum);
    let per = sess.tape.mul(weights, inner);
    let inter_sum = sess.tape.sum_all(per);
    let inter = sess.tape.mul_scalar(inter_sum, 2.0);
    let w2 = sess.tape.mul(weights, weights);
    let w2ds = sess.tape.mul(w2, ds);
    let intra_sum = sess.tape.sum_all(w2ds);
    let intra = sess.tape.mul_scalar(intra_sum, 1.0 / 3.0);
    let total = sess.tape.add(inter, intra);
    sess.tape.mul_scalar(total, 1.0 / rays as f64)
}

/// A pluggable perceptual loss. The default implementation contributes
/// nothing (a trained perceptual network is out of scope).
pub trait PerceptualLoss<T: Scalar> {
    fn loss(&self, sess: &mut Session<T>, pred: TensorId, target: TensorId) -> TensorId;
}

pub struct NoPerceptual;

impl<T: Scalar> PerceptualLoss<T> for NoPerceptual {
    fn loss(&self, sess: &mut Session<T>, _pred: TensorId, _target: TensorId) -> TensorId {
        sess.tape.scalar(0.0)
    }
}

/// L2 + lambda * perceptual + beta * distortion.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    sess: &mut Session<T>,
    pred: TensorId,
    target: TensorId,
    ray_weights: TensorId,
    s_mid: &[f64],
    s_width: &[f64],
    weights: &LossWeights,
    perceptual: &dyn PerceptualLoss<T>,
) -> TensorId {
    assert!(weights.lambda_perceptual >= 0.0 && weights.beta_dist >= 0.0);
    let l2 = l2_loss(sess, pred, target);
    let p = perceptual.loss(sess, pred, target);
    let p_scaled = sess.tape.mul_scalar(p, weights.lambda_perceptual);
    let d = distortion_loss(sess, ray_weights, s_mid, s_width);
    let d_scaled = sess.tape.mul_scalar(d, weights.beta_dist);
    let a = sess.tape.add(l2, p_scaled);
    sess.tape.add(a, d_scaled)
}

/// 10 log10(1 / mse), capped at 99 dB for mse below 1e-10.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr length mismatch");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local structural similarity over valid 11x11 window positions,
/// per channel, averaged over channels. Images are [h*w*3] in [0, 1].
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            width, height, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    assert_eq!(a.len(), width * height * 3, "ssim image size mismatch");
    assert_eq!(a.len(), b.len());
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for wy in 0..=height - SSIM_WINDOW {
            for wx in 0..=width - SSIM_WINDOW {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..SSIM_WINDOW {
                    for x in 0..SSIM_WINDOW {
                        let g = win[y * SSIM_WINDOW + x];
                        let p = ((wy + y) * width + wx + x) * 3 + c;
                        ma += g * a[p];
                        mb += g * b[p];
                    }
                }
                for y in 0..SSIM_WINDOW {
                    for x in 0..SSIM_WINDOW {
                        let g = win[y * SSIM_WINDOW + x];
                        let p = ((wy + y) * width + wx + x) * 3 + c;
                        va += g * (a[p] - ma) * (a[p] - ma);
                        vb += g * (b[p] - mb) * (b[p] - mb);
                        cov += g * (a[p] - ma) * (b[p] - mb);
                    }
                }
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
