//! Embeds labeled pixels from both modalities into the shared space and
//! projects them onto two principal axes, one row per point as CSV.
//!
//! `cargo run --release --example features > features.csv`

mod common;

use mmrs::eval::dump_features;
use mmrs::pipeline::run_pipeline;
use mmrs::training::Dataset;

fn main() -> mmrs::Result<()> {
    let cfg = common::demo_config(2);
    let ds = Dataset::synthetic(&cfg.synth)?;
    let out = run_pipeline(&ds, &cfg, &mut |_| Ok(()))?;
    let coords: Vec<_> = out.prepared.split.eval.iter().step_by(4).map(|&(c, _)| c).collect();
    let dump = dump_features(&out.model, &out.prepared, &coords)?;

    println!("row,col,modality,label,pc1,pc2");
    let pcs = dump.pca.unwrap_or_default();
    for (r, p) in dump.rows.iter().zip(pcs) {
        let label = r.label.map_or(String::new(), |l| l.to_string());
        println!("{},{},{},{},{:.5},{:.5}", r.row, r.col, r.modality, label, p[0], p[1]);
    }
    eprintln!("{} embeddings of dimension {}", dump.rows.len(), dump.rows[0].feature.len());
    Ok(())
}
