//! Shared oracles for the integration tests.

#![allow(dead_code)]

use jcrnet::image::ImageBuffer;
use jcrnet::metrics::{luma, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use rand::Rng;

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageBuffer {
    let px: Vec<f32> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImageBuffer::new(w, h, px).unwrap()
}

/// Direct per-window SSIM with a 2-d Gaussian window and centered moments.
pub fn ssim_reference(x: &ImageBuffer, y: &ImageBuffer) -> f64 {
    let (h, w) = (x.height(), x.width());
    let (a, b) = (luma(x), luma(y));
    let r = SSIM_WINDOW / 2;
    let mut weights = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let (di, dj) = (i as f64 - r as f64, j as f64 - r as f64);
            weights[i * SSIM_WINDOW + j] = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= norm);
    let (mut total, mut count) = (0.0, 0);
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let at = |p: &[f64], i: usize, j: usize| p[(top + i) * w + left + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = weights[i * SSIM_WINDOW + j];
                    ma += g * at(&a, i, j);
                    mb += g * at(&b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = weights[i * SSIM_WINDOW + j];
                    let (da, db) = (at(&a, i, j) - ma, at(&b, i, j) - mb);
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}


/// Zero-padded cross-correlation by direct summation.
pub fn conv_oracle(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, [usize; 2]) {
    let [n, c, h, wd] = xs;
    let [co, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let x_ = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || x_ < 0 || y >= h as isize || x_ >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * c + ci) * k + ki) * k + kj]
                                    * x[((b_ * c + ci) * h + y as usize) * wd + x_ as usize];
                            }
                        }
                    }
                    out[((b_ * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [oh, ow])
}
