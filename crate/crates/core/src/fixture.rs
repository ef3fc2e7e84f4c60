//! Deterministic synthetic low-light pairs for smoke tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Pair};
use crate::error::Result;
use crate::image::ImageBuffer;

/// Exposure model of the darkened half: `low = GAIN * gt^GAMMA`.
pub const GAIN: f64 = 0.35;
pub const GAMMA: f64 = 1.8;

/// A smooth colour field with a few soft-edged discs and stripes, quantized to 8 bits.
pub fn reference_image(index: u64, size: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1c7_0000 + index);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let tilt: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
    let discs: Vec<([f64; 2], f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)],
                rng.gen_range(0.08..0.22),
                std::array::from_fn(|_| rng.gen_range(-0.35..0.35)),
            )
        })
        .collect();
    let freq = rng.gen_range(3.0..7.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let mut bytes = Vec::with_capacity(size * size * 3);
    for i in 0..size {
        for j in 0..size {
            let (v, u) = (i as f64 / size as f64, j as f64 / size as f64);
            let stripe = 0.06 * (2.0 * std::f64::consts::PI * freq * (u * angle.cos() + v * angle.sin())).sin();
            for c in 0..3 {
                let mut val = base[c] + tilt[c][0] * (u - 0.5) + tilt[c][1] * (v - 0.5) + stripe;
                for (center, radius, tint) in &discs {
                    let d = ((u - center[0]).powi(2) + (v - center[1]).powi(2)).sqrt();
                    let edge = 1.0 / (1.0 + ((d - radius) / 0.015).exp());
                    val += tint[c] * edge;
                }
                bytes.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    ImageBuffer::from_bytes(size, size, &bytes).expect("size x size x 3 samples")
}

/// Darkened counterpart of `gt`, quantized to 8 bits.
pub fn darken(gt: &ImageBuffer) -> ImageBuffer {
    let bytes: Vec<u8> = gt
        .pixels()
        .iter()
        .map(|&v| (GAIN * (v as f64).powf(GAMMA) * 255.0).round() as u8)
        .collect();
    ImageBuffer::from_bytes(gt.width(), gt.height(), &bytes).expect("same extent")
}

/// `count` pairs named `0001`, `0002`, ...
pub fn synthetic_dataset(count: usize, size: usize) -> Result<Dataset> {
    let pairs = (0..count)
        .map(|k| {
            let gt = reference_image(k as u64, size);
            Pair::new(format!("{:04}", k + 1), darken(&gt), gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(pairs))
}
