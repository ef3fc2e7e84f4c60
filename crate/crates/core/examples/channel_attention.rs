//! Residual channel attention on random features: per-channel gates and the skip connection.
//!
//! ```text
//! cargo run --release --example channel_attention
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jcrnet::blocks::Rcab;
use jcrnet::{Ctx, Registry, Tape, Tensor};

fn main() -> jcrnet::Result<()> {
    let mut reg = Registry::new();
    let rcab = Rcab::new(&mut reg, "rcab", 16, 4)?;
    let params = reg.initialize(7).cast::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![1, 16, 8, 8], (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &params)?;
    let t = rcab.trace(&ctx, tape.constant(x)?)?;

    let scales = t.scales.value();
    println!("channel gates:");
    for (c, s) in scales.data().iter().enumerate() {
        println!("  {c:2} {s:.4}");
    }
    let change = t.out.value().max_abs_diff(&t.attended.value());
    println!("max |out - attended| = {change:.4} (the skip input)");
    Ok(())
}
