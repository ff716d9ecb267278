//! Generates a paired synthetic scene and writes it in the on-disk layout
//! the CLI reads.
//!
//! `cargo run --release --example synth_scene [out_dir]`

mod common;

use mmrs::training::Dataset;

fn main() -> mmrs::Result<()> {
    let cfg = common::demo_config(7);
    let ds = Dataset::synthetic(&cfg.synth)?;
    let dir = common::out_dir("mmrs-scene");
    ds.save(&dir)?;

    let [a, b] = &ds.cubes;
    println!("modality a: {}x{}x{}", a.height(), a.width(), a.channels());
    println!("modality b: {}x{}x{}", b.height(), b.width(), b.channels());
    let mut counts = vec![0usize; ds.catalog.len()];
    for &l in ds.labels.labels() {
        if l >= 0 {
            counts[l as usize] += 1;
        }
    }
    for (name, n) in ds.catalog.names().iter().zip(&counts) {
        println!("{name:>12}: {n} pixels");
    }
    println!("written to {}", dir.display());
    Ok(())
}
