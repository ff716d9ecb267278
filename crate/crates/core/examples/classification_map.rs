//! Predicts every labeled pixel and writes the result as a colour PPM,
//! next to a ground-truth map for comparison.
//!
//! `cargo run --release --example classification_map [out_dir]`

mod common;

use mmrs::dataio::Coord;
use mmrs::eval::{predict, render_map, save_map};
use mmrs::pipeline::run_pipeline;
use mmrs::training::Dataset;

fn main() -> mmrs::Result<()> {
    let cfg = common::demo_config(5);
    let ds = Dataset::synthetic(&cfg.synth)?;
    let out = run_pipeline(&ds, &cfg, &mut |_| Ok(()))?;
    let (h, w) = (ds.labels.height(), ds.labels.width());

    let coords: Vec<Coord> = (0..h)
        .flat_map(|row| (0..w).map(move |col| Coord { row, col }))
        .filter(|c| ds.labels.get(c.row, c.col).is_some())
        .collect();
    let preds = predict(&out.model, &out.prepared, &coords, &cfg)?;
    let mut grid = vec![None; h * w];
    for (c, p) in coords.iter().zip(preds) {
        grid[c.row * w + c.col] = Some(p);
    }
    let truth: Vec<Option<usize>> = (0..h * w).map(|i| ds.labels.get(i / w, i % w)).collect();

    let dir = common::out_dir("mmrs-map");
    let palette = ds.catalog.palette();
    save_map(&render_map(&grid, h, w, &palette)?, dir.join("predicted.ppm"))?;
    save_map(&render_map(&truth, h, w, &palette)?, dir.join("truth.ppm"))?;
    let agree = grid.iter().zip(&truth).filter(|(p, t)| p.is_some() && p == t).count();
    println!("{agree}/{} pixels agree with the labels", coords.len());
    println!("maps in {}", dir.display());
    Ok(())
}
