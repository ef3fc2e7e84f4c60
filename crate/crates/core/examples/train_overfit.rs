//! Overfits the desk model on the synthetic fixture and prints the loss trace and final PSNR.
//!
//! ```text
//! cargo run --release --example train_overfit -- [STEPS]
//! ```

use jcrnet::cli::enhance_image;
use jcrnet::fixture::synthetic_dataset;
use jcrnet::metrics::{psnr, Peak};
use jcrnet::train::{TrainConfig, Trainer};
use jcrnet::{Jcrnet, ModelConfig};

fn main() -> jcrnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("STEPS must be an integer"));
    let data = synthetic_dataset(4, 64)?;
    let model = Jcrnet::new(ModelConfig::desk())?;
    let mut cfg = TrainConfig::default();
    cfg.schedule.total_steps = steps;

    let mut trainer = Trainer::new(&model, model.init_params(cfg.seed), cfg)?;
    let started = std::time::Instant::now();
    trainer.run(&data, |e, _| {
        if e.step % 50 == 0 || e.step + 1 == steps {
            println!("step {:5} lr {:.2e} loss {:.5}", e.step, e.lr, e.loss);
        }
        Ok(())
    })?;
    println!("{steps} steps in {:.1}s", started.elapsed().as_secs_f64());

    for pair in &data.pairs {
        let y = enhance_image(&model, &trainer.params, &pair.low)?;
        println!("{} psnr {:.2} dB", pair.name, psnr(&y, &pair.high, Peak::Unit)?);
    }
    Ok(())
}
