//! Enhances one image with a checkpoint and reports PSNR/SSIM against a reference if given.
//!
//! ```text
//! cargo run --release --example enhance_image -- [CKPT] [LOW] [OUT] [GT]
//! ```
//! Defaults use the bundled overfit checkpoint and fixture pair 0001.

use jcrnet::checkpoint::Checkpoint;
use jcrnet::cli::enhance_image;
use jcrnet::image::{load_image, save_image};
use jcrnet::metrics::{psnr, ssim, Peak};
use jcrnet::Jcrnet;

fn main() -> jcrnet::Result<()> {
    let root = env!("CARGO_MANIFEST_DIR");
    let mut args = std::env::args().skip(1);
    let mut next = |default: String| args.next().unwrap_or(default);
    let ckpt = next(format!("{root}/fixtures/overfit.jcrn"));
    let low = next(format!("{root}/fixtures/overfit/low/0001.ppm"));
    let out = next(std::env::temp_dir().join("enhanced.png").display().to_string());
    let gt = next(format!("{root}/fixtures/overfit/high/0001.ppm"));

    let ck = Checkpoint::load(&ckpt)?;
    let model = Jcrnet::new(ck.model_config()?)?;
    let input = load_image(&low)?;
    let y = enhance_image(&model, &ck.params, &input)?;
    save_image(&y, &out)?;
    println!("wrote {out}");

    let reference = load_image(&gt)?;
    println!("input    psnr {:7.3} dB", psnr(&input, &reference, Peak::Unit)?);
    println!("enhanced psnr {:7.3} dB  ssim {:.4}", psnr(&y, &reference, Peak::Unit)?, ssim(&y, &reference)?);
    Ok(())
}
