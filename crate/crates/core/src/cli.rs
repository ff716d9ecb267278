//! Command-line front end.
//!
//! Every flag is shorthand for a configuration key: flags are applied on top
//! of the `--config` file (or the defaults) and `--set key=value` pairs are
//! applied last.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::{info, warn};

use crate::config::RunConfig;
use crate::dataio::Coord;
use crate::error::{Error, Result};
use crate::eval::{ablate, predict, render_map, save_map, AblationAxis};
use crate::gradcheck::run_gradcheck;
use crate::models::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::pipeline::{evaluate, run_finetune, run_pretrain};
use crate::training::{Dataset, Prepared, TrainRecord};

#[derive(Parser, Debug)]
#[command(name = "mmrs", version, about = "Few-shot multimodal land-cover classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set mask.ratio=0.5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed [seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all logical cores [runtime.threads]
    #[arg(long)]
    threads: Option<usize>,
    /// Force a single worker thread [runtime.deterministic]
    #[arg(long)]
    deterministic: bool,
    /// error, warn, info, debug or trace [runtime.log_level]
    #[arg(long, value_name = "LEVEL")]
    log_level: Option<String>,
    /// Dataset directory [io.data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Input checkpoint [io.checkpoint]
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Output path [io.out]
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Training log in JSON lines [io.records]
    #[arg(long, value_name = "PATH")]
    records: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired scene (cubes, labels, catalog) to --out;
    /// here --seed sets synth.seed
    Synth {
        #[command(flatten)]
        common: Common,
        /// [synth.classes]
        #[arg(long)]
        classes: Option<usize>,
        /// [synth.height]
        #[arg(long)]
        height: Option<usize>,
        /// [synth.width]
        #[arg(long)]
        width: Option<usize>,
        /// [synth.noise]
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Stage 1: masked-diffusion pretraining; writes a checkpoint to --out
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// [pretrain.epochs]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage 2: few-shot alignment from the --checkpoint encoder; writes a
    /// checkpoint to --out
    Finetune {
        #[command(flatten)]
        common: Common,
        /// [finetune.epochs]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a fine-tuned --checkpoint on the held-out pixels; metrics JSON
    /// goes to --out or standard output
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Classify every labeled pixel with --checkpoint and write a PPM map
    RenderMap {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one ablation axis over several seeds; JSON report to --out or
    /// standard output
    Ablate {
        #[command(flatten)]
        common: Common,
        /// pool_size, components, prompts, mask_ratio or patch_size [ablation.axis]
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated seeds [ablation.seeds]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Finite-difference audit of every gradient; exit 0 iff all pass
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common }
            | Command::RenderMap { common }
            | Command::Ablate { common, .. }
            | Command::Gradcheck { common } => common,
        }
    }

    /// Flags as `key=json` assignments, in application order.
    fn assignments(&self) -> Vec<String> {
        let c = self.common();
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push(format!("{k}={v}"));
        let path = |p: &Path| serde_json::to_string(&p.to_string_lossy()).expect("string");
        if let Some(s) = c.seed {
            let key = if matches!(self, Command::Synth { .. }) { "synth.seed" } else { "seed" };
            put(key, s.to_string());
        }
        if let Some(t) = c.threads {
            put("runtime.threads", t.to_string());
        }
        if c.deterministic {
            put("runtime.deterministic", "true".into());
        }
        if let Some(l) = &c.log_level {
            put("runtime.log_level", serde_json::to_string(l).expect("string"));
        }
        for (k, v) in [("io.data", &c.data), ("io.checkpoint", &c.checkpoint), ("io.out", &c.out), ("io.records", &c.records)] {
            if let Some(p) = v {
                put(k, path(p));
            }
        }
        match self {
            Command::Synth {
                classes,
                height,
                width,
                noise,
                ..
            } => {
                for (k, v) in [("synth.classes", classes), ("synth.height", height), ("synth.width", width)] {
                    if let Some(v) = v {
                        put(k, v.to_string());
                    }
                }
                if let Some(n) = noise {
                    put("synth.noise", n.to_string());
                }
            }
            Command::Pretrain { epochs: Some(e), .. } => put("pretrain.epochs", e.to_string()),
            Command::Finetune { epochs: Some(e), .. } => put("finetune.epochs", e.to_string()),
            Command::Ablate { axis, seeds, .. } => {
                if let Some(a) = axis {
                    put("ablation.axis", serde_json::to_string(a).expect("string"));
                }
                if let Some(s) = seeds {
                    put("ablation.seeds", serde_json::to_string(s).expect("list"));
                }
            }
            _ => {}
        }
        out.extend(c.sets.iter().cloned());
        out
    }
}

fn apply(cfg: &mut RunConfig, assignments: &[String]) -> Result<()> {
    for a in assignments {
        cfg.set(a)?;
    }
    Ok(())
}

fn key_listing() -> String {
    let keys = RunConfig::keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (default shown), settable in --config or with --set:\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

fn command() -> clap::Command {
    let keys = key_listing();
    Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|sc| sc.after_help(keys.clone()))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage or configuration error, 2 data or
/// format error, 3 numerical failure.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match command()
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match build_config(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    init_logging(&cfg.runtime.log_level);
    init_threads(cfg.runtime.effective_threads());
    match dispatch(&cli.command, cfg) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

fn build_config(cmd: &Command) -> Result<RunConfig> {
    let mut cfg = match &cmd.common().config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply(&mut cfg, &cmd.assignments())?;
    Ok(cfg)
}

fn init_logging(level: &str) {
    let filter = level.parse().unwrap_or(log::LevelFilter::Info);
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

fn init_threads(n: usize) {
    let mut b = rayon::ThreadPoolBuilder::new();
    if n > 0 {
        b = b.num_threads(n);
    }
    // a second call in the same process keeps the first pool
    let _ = b.build_global();
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::invalid(format!("--{flag} is required")))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.io.data {
        Some(dir) => Dataset::load(dir),
        None => {
            info!("no --data given: synthesizing a scene from the synth section");
            Dataset::synthetic(&cfg.synth)
        }
    }
}

/// Writes `text` to `path`, or to standard output.
fn emit_text(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
        }
    }
}

type Sink = Box<dyn Write>;

fn record_sink(cfg: &RunConfig) -> Result<Sink> {
    Ok(match &cfg.io.records {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::stdout()),
    })
}

fn train_with_log<R>(
    cfg: &RunConfig,
    f: impl FnOnce(&mut dyn FnMut(&TrainRecord) -> Result<()>) -> Result<R>,
) -> Result<R> {
    let mut sink = record_sink(cfg)?;
    let where_ = cfg.io.records.clone().unwrap_or_else(|| "<stdout>".into());
    let r = f(&mut |rec| writeln!(sink, "{}", rec.to_json_line()).map_err(|e| Error::io(&where_, e)))?;
    sink.flush().map_err(|e| Error::io(&where_, e))?;
    Ok(r)
}

/// Loads the model checkpoint for scoring and, unless a config file was
/// given, adopts the configuration it was trained with.
fn scoring_setup(cmd: &Command, mut cfg: RunConfig) -> Result<(RunConfig, Checkpoint, Model<f32>)> {
    let ck = load_checkpoint(required(&cfg.io.checkpoint, "checkpoint")?)?;
    if ck.manifest.stage != "finetune" {
        warn!("checkpoint stage is `{}`; scores come from an untrained head", ck.manifest.stage);
    }
    if cmd.common().config.is_none() {
        let mut stored: RunConfig =
            serde_json::from_value(ck.manifest.config.clone()).map_err(|e| Error::Config(format!("stored config: {e}")))?;
        stored.io = Default::default();
        stored.runtime = Default::default();
        apply(&mut stored, &cmd.assignments())?;
        cfg = stored;
    }
    cfg.model = ck.manifest.model.clone();
    let model = ck.to_model()?;
    Ok((cfg, ck, model))
}

fn prepared_for(cfg: &RunConfig, ck: &Checkpoint) -> Result<Prepared> {
    let ds = dataset(cfg)?;
    let mut data = Prepared::new(&ds, cfg, Some(&ck.manifest.stats))?;
    if data.channels() != ck.manifest.channels || data.classes() != ck.manifest.classes {
        return Err(Error::invalid("dataset does not match the checkpoint's channels or classes"));
    }
    data.vocab = ck.vocab();
    Ok(data)
}

fn dispatch(cmd: &Command, cfg: RunConfig) -> Result<i32> {
    match cmd {
        Command::Synth { .. } => {
            let out = required(&cfg.io.out, "out")?;
            let ds = Dataset::synthetic(&cfg.synth)?;
            ds.save(out)?;
            info!("wrote synthetic scene to {}", out.display());
        }
        Command::Pretrain { .. } => {
            let out = required(&cfg.io.out, "out")?.clone();
            let ds = dataset(&cfg)?;
            let data = Prepared::new(&ds, &cfg, None)?;
            let (ck, _) = train_with_log(&cfg, |emit| run_pretrain(&cfg, &data, emit))?;
            save_checkpoint(&ck, &out)?;
            info!("wrote pretraining checkpoint to {}", out.display());
        }
        Command::Finetune { .. } => {
            let out = required(&cfg.io.out, "out")?.clone();
            let pretrained = cfg.io.checkpoint.as_ref().map(load_checkpoint).transpose()?;
            let ds = dataset(&cfg)?;
            let stats = pretrained.as_ref().map(|c| c.manifest.stats.as_slice());
            let data = Prepared::new(&ds, &cfg, stats)?;
            let (model, _) = train_with_log(&cfg, |emit| run_finetune(&cfg, &data, pretrained.as_ref(), emit))?;
            let ck = Checkpoint::from_model(&model, "finetune", &data.vocab, &data.stats, cfg.diffusion, serde_json::to_value(&cfg)?);
            save_checkpoint(&ck, &out)?;
            info!("wrote fine-tuned checkpoint to {}", out.display());
        }
        Command::Eval { .. } => {
            let (cfg, ck, model) = scoring_setup(cmd, cfg)?;
            let data = prepared_for(&cfg, &ck)?;
            let report = evaluate(&model, &data, &cfg)?;
            info!("OA {:.4}  AA {:.4}  kappa {:.4}", report.oa, report.aa, report.kappa);
            if !report.zero_support().is_empty() {
                warn!("classes without evaluation support: {:?}", report.zero_support());
            }
            emit_text(cfg.io.out.as_ref(), &report.to_json())?;
        }
        Command::RenderMap { .. } => {
            let (cfg, ck, model) = scoring_setup(cmd, cfg)?;
            let out = required(&cfg.io.out, "out")?;
            let data = prepared_for(&cfg, &ck)?;
            let (h, w) = (data.labels.height(), data.labels.width());
            let coords: Vec<Coord> = (0..h)
                .flat_map(|r| (0..w).map(move |c| Coord::new(r, c)))
                .filter(|c| data.labels.get(c.row, c.col).is_some())
                .collect();
            let preds = predict(&model, &data, &coords, &cfg)?;
            let mut grid = vec![None; h * w];
            for (c, p) in coords.iter().zip(preds) {
                grid[c.row * w + c.col] = Some(p);
            }
            save_map(&render_map(&grid, h, w, &data.catalog.palette())?, out)?;
            info!("wrote {w}x{h} map to {}", out.display());
        }
        Command::Ablate { .. } => {
            let axis: AblationAxis = cfg.ablation.axis.parse()?;
            let fixed = cfg.io.data.as_ref().map(Dataset::load).transpose()?;
            let synth = cfg.synth.clone();
            let rows = ablate(&cfg, axis, &cfg.ablation.seeds, &|_| match &fixed {
                Some(ds) => Ok(ds.clone()),
                None => Dataset::synthetic(&synth),
            })?;
            emit_text(cfg.io.out.as_ref(), &serde_json::to_string_pretty(&rows)?)?;
        }
        Command::Gradcheck { .. } => {
            let report = run_gradcheck(cfg.seed)?;
            for line in report.lines() {
                info!("{line}");
            }
            emit_text(cfg.io.out.as_ref(), &serde_json::to_string_pretty(&report)?)?;
            if !report.all_passed() {
                log::error!("{} gradient checks failed", report.failures().len());
                return Ok(3);
            }
            info!("all {} gradient checks passed", report.checks.len());
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        let m = command().try_get_matches_from(args).unwrap();
        Cli::from_arg_matches(&m).unwrap().command
    }

    #[test]
    fn flags_become_assignments() {
        let c = parse(&["mmrs", "pretrain", "--seed", "4", "--epochs", "3", "--set", "mask.ratio=0.5", "--deterministic"]);
        let cfg = build_config(&c).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.mask.ratio, 0.5);
        assert_eq!(cfg.runtime.effective_threads(), 1);
    }

    #[test]
    fn synth_seed_targets_the_scene() {
        let c = parse(&["mmrs", "synth", "--seed", "7", "--classes", "5", "--out", "x"]);
        let cfg = build_config(&c).unwrap();
        assert_eq!((cfg.synth.seed, cfg.synth.classes, cfg.seed), (7, 5, 0));
        assert_eq!(cfg.io.out, Some(PathBuf::from("x")));
    }

    #[test]
    fn set_wins_over_flags() {
        let c = parse(&["mmrs", "finetune", "--epochs", "3", "--set", "finetune.epochs=9"]);
        assert_eq!(build_config(&c).unwrap().finetune.epochs, 9);
    }

    #[test]
    fn ablate_seeds_are_comma_separated() {
        let c = parse(&["mmrs", "ablate", "--axis", "prompts", "--seeds", "1,2"]);
        let cfg = build_config(&c).unwrap();
        assert_eq!(cfg.ablation.axis, "prompts");
        assert_eq!(cfg.ablation.seeds, vec![1, 2]);
    }

    #[test]
    fn help_lists_every_key() {
        let help = command().render_long_help().to_string();
        for (k, _) in RunConfig::keys() {
            assert!(help.contains(&k), "{k} missing from --help");
        }
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["mmrs"]), 1);
        assert_eq!(run(["mmrs", "nonsense"]), 1);
        assert_eq!(run(["mmrs", "eval", "--set", "nokey=1"]), 1);
        assert_eq!(run(["mmrs", "synth"]), 1);
    }
}
