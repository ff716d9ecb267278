//! Component ablation: the full method against runs with one piece switched
//! off, averaged over seeds.
//!
//! `cargo run --release --example ablation [axis]` where axis is one of
//! components, mask-ratio, diffusion-steps, patch-size.

mod common;

use mmrs::eval::{ablate, AblationAxis};
use mmrs::training::Dataset;

fn main() -> mmrs::Result<()> {
    let axis: AblationAxis = std::env::args().nth(1).unwrap_or_else(|| "components".into()).parse()?;
    let mut base = common::demo_config(0);
    base.pretrain.epochs = 4;
    base.finetune.epochs = 30;
    let synth = base.synth.clone();
    let rows = ablate(&base, axis, &[0, 1], &|seed| {
        let mut p = synth.clone();
        p.seed = seed;
        Dataset::synthetic(&p)
    })?;
    println!("{:<20} {:>8} {:>8} {:>8}", "setting", "OA", "AA", "kappa");
    for r in rows {
        println!(
            "{:<20} {:>8.4} {:>8.4} {:>8.4}  (±{:.4})",
            r.setting, r.oa_mean, r.aa_mean, r.kappa_mean, r.oa_std
        );
    }
    Ok(())
}
