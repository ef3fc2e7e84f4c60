//! Checkpoint save/load round trip, or stripping the training state off an existing file.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! cargo run --release --example checkpoint_roundtrip -- IN.jcrn OUT.jcrn
//! ```

use jcrnet::checkpoint::Checkpoint;
use jcrnet::cli::inspect;
use jcrnet::{Jcrnet, ModelConfig};

fn main() -> jcrnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [input, output] = args.as_slice() {
        let mut ck = Checkpoint::load(input)?;
        let before = ck.to_bytes()?.len();
        ck.state = None;
        ck.save(output)?;
        println!("{input} ({before} bytes) -> {output} ({} bytes, inference only)", ck.to_bytes()?.len());
        return Ok(());
    }

    let model = Jcrnet::new(ModelConfig::tiny())?;
    let ck = Checkpoint::new(&model.cfg, model.init_params(3), None);
    let path = std::env::temp_dir().join("jcrnet-roundtrip.jcrn");
    ck.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let again = loaded.to_bytes()?;
    println!("{}", inspect(&loaded).lines().last().unwrap_or_default());
    println!("byte-identical after reload: {}", again == std::fs::read(&path).expect("just written"));
    match loaded.require_state() {
        Ok(_) => println!("resumable"),
        Err(e) => println!("not resumable: {e}"),
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}
