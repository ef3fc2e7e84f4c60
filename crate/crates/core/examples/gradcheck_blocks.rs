//! Runs the finite-difference gradient check of one block or of all of them.
//!
//! ```text
//! cargo run --release --example gradcheck_blocks -- [MODULE] [SEED]
//! ```

use jcrnet::gradsuite::{run_suite, MODULES};

fn main() -> jcrnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let module = args.next();
    let seed = args.next().map_or(1, |s| s.parse().expect("SEED must be an integer"));
    if module.is_none() {
        println!("cases: {}", MODULES.join(" "));
    }
    let reports = run_suite(module.as_deref(), seed)?;
    for r in &reports {
        println!("{r}");
    }
    let passed = reports.iter().filter(|r| r.report.pass).count();
    println!("{passed} of {} cases passed", reports.len());
    Ok(())
}
