//! PSNR and SSIM of a few synthetic degradations against their reference.
//!
//! ```text
//! cargo run --release --example evaluate_metrics
//! ```

use jcrnet::fixture::{darken, reference_image};
use jcrnet::image::ImageBuffer;
use jcrnet::metrics::{ImageMetrics, MetricReport, Peak};

fn main() -> jcrnet::Result<()> {
    let gt = reference_image(0, 64);
    let shifted = ImageBuffer::new(64, 64, gt.pixels().iter().map(|v| (v + 0.05).min(1.0)).collect())?;
    let noisy = ImageBuffer::new(
        64,
        64,
        gt.pixels().iter().enumerate().map(|(i, v)| (v + if i % 2 == 0 { 0.03 } else { -0.03 }).clamp(0.0, 1.0)).collect(),
    )?;

    let mut report = MetricReport::default();
    for (name, img) in [("identical", &gt), ("shifted", &shifted), ("noisy", &noisy), ("dark", &darken(&gt))] {
        report.push(ImageMetrics::measure(name, img, &gt, Peak::Unit)?);
    }
    print!("{}", report.render_table());
    println!();
    print!("{}", report.to_kv().render());
    Ok(())
}
