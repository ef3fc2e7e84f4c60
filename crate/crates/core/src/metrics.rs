//! Full-reference quality metrics: PSNR and luma SSIM.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::kv::KvMap;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Signal peak used by [`psnr`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Peak {
    /// Compare the `[0, 1]` values directly against peak 1.
    #[default]
    Unit,
    /// Quantize both images to bytes first and use peak 255.
    Byte,
}

fn same_extent(op: &'static str, x: &ImageBuffer, gt: &ImageBuffer) -> Result<()> {
    if (x.width(), x.height()) != (gt.width(), gt.height()) {
        return Err(Error::dim(
            op,
            format!("{}x{} vs {}x{}", x.height(), x.width(), gt.height(), gt.width()),
        ));
    }
    Ok(())
}

/// Mean squared error over every sample, accumulated in `f64`.
pub fn mse(x: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    same_extent("mse", x, gt)?;
    let sum: f64 = x
        .pixels()
        .iter()
        .zip(gt.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / x.pixels().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(x: &ImageBuffer, gt: &ImageBuffer, peak: Peak) -> Result<f64> {
    let (err, peak) = match peak {
        Peak::Unit => (mse(x, gt)?, 1.0f64),
        Peak::Byte => {
            same_extent("psnr", x, gt)?;
            let (a, b) = (x.to_bytes(), gt.to_bytes());
            let sum: f64 = a.iter().zip(&b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
            (sum / a.len() as f64, 255.0)
        }
    };
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// `0.299 R + 0.587 G + 0.114 B`, row-major.
pub fn luma(img: &ImageBuffer) -> Vec<f64> {
    img.pixels()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Normalized 1-d Gaussian taps; the 2-d window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Valid-window separable Gaussian filter.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * plane[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma planes over all fully covered 11x11 windows.
pub fn ssim(x: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    same_extent("ssim", x, gt)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let (a, b) = (luma(x), luma(gt));
    let product = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &taps);
    let mu_b = filter_valid(&b, h, w, &taps);
    let aa = filter_valid(&product(&a, &a), h, w, &taps);
    let bb = filter_valid(&product(&b, &b), h, w, &taps);
    let ab = filter_valid(&product(&a, &b), h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (va, vb, cov) = (aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb);
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Metrics of one image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn measure(name: impl Into<String>, x: &ImageBuffer, gt: &ImageBuffer, peak: Peak) -> Result<Self> {
        Ok(ImageMetrics {
            name: name.into(),
            psnr_db: psnr(x, gt, peak)?,
            ssim: ssim(x, gt)?,
        })
    }
}

/// Per-image metrics and their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

/// Renders a dB value; infinity becomes `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

impl MetricReport {
    pub fn push(&mut self, m: ImageMetrics) {
        self.images.push(m);
    }

    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|m| m.psnr_db).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|m| m.ssim).sum::<f64>() / self.images.len() as f64
    }

    /// Aligned text table with a trailing mean row.
    pub fn render_table(&self) -> String {
        let width = self.images.iter().map(|m| m.name.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>7}\n", "image", "psnr_db", "ssim");
        for m in &self.images {
            let _ = writeln!(out, "{:<width$}  {:>9}  {:>7.4}", m.name, format_db(m.psnr_db), m.ssim);
        }
        if !self.images.is_empty() {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>7.4}",
                "mean",
                format_db(self.mean_psnr()),
                self.mean_ssim()
            );
        }
        out
    }

    /// `image.<name>.psnr=...` lines plus `mean.*` and `count`.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("count", self.images.len());
        for m in &self.images {
            kv.insert(format!("image.{}.psnr", m.name), format_db(m.psnr_db));
            kv.insert(format!("image.{}.ssim", m.name), format!("{:.6}", m.ssim));
        }
        if !self.images.is_empty() {
            kv.insert("mean.psnr", format_db(self.mean_psnr()));
            kv.insert("mean.ssim", format!("{:.6}", self.mean_ssim()));
        }
        kv
    }
}
