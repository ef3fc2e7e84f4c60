//! Writes the synthetic overfit fixture: `DIR/low/*.ppm` and `DIR/high/*.ppm`.
//!
//! ```text
//! cargo run --release --example make_fixture -- [DIR] [COUNT] [SIZE]
//! ```

use std::path::PathBuf;

use jcrnet::fixture::synthetic_dataset;
use jcrnet::image::save_image;

fn main() -> jcrnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixtures/overfit".into()));
    let count = args.next().map_or(Ok(4), |s| s.parse()).expect("COUNT must be an integer");
    let size = args.next().map_or(Ok(64), |s| s.parse()).expect("SIZE must be an integer");
    let data = synthetic_dataset(count, size)?;
    for half in ["low", "high"] {
        std::fs::create_dir_all(dir.join(half)).map_err(|e| jcrnet::Error::Io {
            path: dir.join(half),
            source: e,
        })?;
    }
    for pair in &data.pairs {
        save_image(&pair.low, dir.join("low").join(format!("{}.ppm", pair.name)))?;
        save_image(&pair.high, dir.join("high").join(format!("{}.ppm", pair.name)))?;
    }
    println!("wrote {} pairs of {size}x{size} to {}", data.len(), dir.display());
    Ok(())
}
