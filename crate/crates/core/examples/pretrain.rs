//! Stage 1 on its own: masked diffusion reconstruction of both modalities,
//! then a checkpoint on disk.
//!
//! `cargo run --release --example pretrain [out_dir]`

mod common;

use mmrs::models::{load_checkpoint, save_checkpoint};
use mmrs::pipeline::run_pretrain;
use mmrs::training::{Dataset, Prepared};

fn main() -> mmrs::Result<()> {
    let cfg = common::demo_config(1);
    let data = Prepared::new(&Dataset::synthetic(&cfg.synth)?, &cfg, None)?;
    println!("pool of {} unlabeled patches", data.split.pool.len());

    let (ck, _) = run_pretrain(&cfg, &data, &mut |r| {
        println!("{}", r.to_json_line());
        Ok(())
    })?;

    let path = common::out_dir("mmrs-pretrain").join("pretrain.ck");
    save_checkpoint(&ck, &path)?;
    assert_eq!(load_checkpoint(&path)?, ck);
    println!("checkpoint: {}", path.display());
    Ok(())
}
