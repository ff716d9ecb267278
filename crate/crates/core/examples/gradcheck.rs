//! Compares every analytic gradient (ops, losses, and whole-model
//! parameter groups) with central finite differences.
//!
//! `cargo run --release --example gradcheck`

use mmrs::gradcheck::run_gradcheck;

fn main() -> mmrs::Result<()> {
    let report = run_gradcheck(0)?;
    for line in report.lines() {
        println!("{line}");
    }
    println!("worst relative error {:.2e}", report.max_rel_err());
    if !report.all_passed() {
        eprintln!("failed: {:?}", report.failures().iter().map(|c| &c.name).collect::<Vec<_>>());
        std::process::exit(3);
    }
    Ok(())
}
