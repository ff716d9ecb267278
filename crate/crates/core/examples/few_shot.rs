//! The whole pipeline: pretrain, fine-tune on a handful of labeled pixels
//! per class, score the held-out pixels.
//!
//! `cargo run --release --example few_shot`

mod common;

use mmrs::pipeline::run_pipeline;
use mmrs::training::Dataset;

fn main() -> mmrs::Result<()> {
    let cfg = common::demo_config(3);
    let ds = Dataset::synthetic(&cfg.synth)?;
    let out = run_pipeline(&ds, &cfg, &mut |_| Ok(()))?;

    let shots: usize = out.prepared.split.shots.iter().map(Vec::len).sum();
    println!("trained on {shots} labeled pixels, scored {}", out.prepared.split.eval.len());
    println!("pretrain loss {:.4} -> {:.4}", out.pretrain[0].loss, out.pretrain.last().unwrap().loss);
    println!("finetune loss {:.4} -> {:.4}", out.finetune[0].loss, out.finetune.last().unwrap().loss);
    let m = &out.metrics;
    println!("OA {:.4}  AA {:.4}  kappa {:.4}", m.oa, m.aa, m.kappa);
    for (name, row) in ds.catalog.names().iter().zip(&m.confusion) {
        println!("{name:>12} {row:?}");
    }
    Ok(())
}
