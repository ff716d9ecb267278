#![allow(dead_code)]

use std::path::PathBuf;

use mmrs::RunConfig;

/// A scene and model small enough to run in seconds.
pub fn demo_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_json(
        r#"{
  "synth": {"height": 24, "width": 24, "noise": 0.5},
  "split": {"pool": 200},
  "model": {"patch_size": 5, "dim": 16, "heads": 2, "depth": 1, "decoder_dim": 8, "decoder_heads": 2,
            "decoder_depth": 1, "text_dim": 16, "text_heads": 2, "text_depth": 1, "embed_dim": 16,
            "context_len": 16, "time_features": 8},
  "pretrain": {"epochs": 10, "batch_size": 50, "lr": 1e-3},
  "finetune": {"epochs": 60, "lr": 1e-3}
}"#,
    )
    .expect("demo config parses");
    cfg.seed = seed;
    cfg.synth.seed = seed;
    cfg
}

/// First command-line argument, or a directory under the system temp dir.
pub fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join(name));
    std::fs::create_dir_all(&dir).expect("output directory");
    dir
}
