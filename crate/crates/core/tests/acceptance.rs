//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mmrs::dataio::{Cube, LabelMap, SynthParams};
use mmrs::diffusion::{forward_diffuse, masked_count, posterior_params, sample_mask, DiffusionConfig};
use mmrs::eval::{metrics, render_map, MetricsReport};
use mmrs::gradcheck::run_gradcheck;
use mmrs::losses::{flc_loss, SimilarityBatch};
use mmrs::models::{Checkpoint, Model, ModelConfig};
use mmrs::numerics::{Rng, Tensor};
use mmrs::pipeline::run_pipeline;
use mmrs::training::{Dataset, Prepared};
use mmrs::{Result, RunConfig};

type Outcome = Result<(bool, String)>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Noise level of the harder benchmark used for the pretraining comparison.
const HARD_NOISE: f64 = 2.0;

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let report = run_gradcheck(0)?;
    let secs = t.elapsed().as_secs_f64();
    let few_cases = report
        .checks
        .iter()
        .filter(|c| !c.name.starts_with("model/") && c.cases < 3)
        .count();
    let ok = report.all_passed() && few_cases == 0 && secs < 60.0;
    Ok((
        ok,
        format!(
            "{} checks, max rel err {:.2e}, {} failures, {:.1}s",
            report.checks.len(),
            report.max_rel_err(),
            report.failures().len(),
            secs
        ),
    ))
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let schedule = DiffusionConfig::default().schedule()?;
    let n = 100_000;
    let x0 = 1.5;
    let mut rng = Rng::new(42);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for t in [1, 10, 25, 50] {
        // iterated single-step chain
        let mut chain = vec![x0; n];
        for s in 1..=t {
            let b = schedule.beta(s);
            for v in chain.iter_mut() {
                *v = (1.0 - b).sqrt() * *v + b.sqrt() * rng.normal();
            }
        }
        let eps: Tensor<f64> = rng.gaussian(&[n]);
        let closed = forward_diffuse(&Tensor::full(vec![n], x0), t, &eps, &schedule)?;
        let moments = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / n as f64;
            (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64)
        };
        let (mc, vc) = moments(&chain);
        let (mf, vf) = moments(closed.data());
        let ab: f64 = (1..=t).map(|s| 1.0 - schedule.beta(s)).product();
        let (m_true, v_true) = (ab.sqrt() * x0, 1.0 - ab);
        for (m, v) in [(mc, vc), (mf, vf)] {
            worst_mean = worst_mean.max((m - m_true).abs() / m_true.abs());
            worst_var = worst_var.max((v - v_true).abs() / v_true);
        }
    }
    let x0t = Tensor::new(vec![3], vec![0.3, -1.2, 2.0])?;
    let xt = Tensor::new(vec![3], vec![5.0, 7.0, -9.0])?;
    let (mu, var) = posterior_params(&x0t, &xt, 1, &schedule)?;
    let collapse = mu.data() == x0t.data() && var == 0.0;
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst_mean <= 0.01 && worst_var <= 0.02 && collapse && secs < 30.0,
        format!(
            "mean err {:.3}%, variance err {:.3}%, t=1 collapse {}, {:.1}s",
            100.0 * worst_mean,
            100.0 * worst_var,
            collapse,
            secs
        ),
    ))
}

fn criterion_3() -> Outcome {
    let mut rng = Rng::new(3);
    let mut bad = 0;
    for _ in 0..1000 {
        let p = 1 + rng.below(200);
        let rho = rng.uniform() * 0.999;
        let plan = sample_mask(p, rho, &mut rng)?;
        let mut seen = vec![0u8; p];
        plan.visible().iter().chain(plan.masked()).for_each(|&i| seen[i] += 1);
        let expected = (rho * p as f64).floor() as usize;
        if plan.masked().len() != expected || seen.iter().any(|&c| c != 1) {
            bad += 1;
        }
    }
    let plan = sample_mask(121, 0.7, &mut rng)?;
    let split = (plan.masked().len(), plan.visible().len());
    Ok((
        bad == 0 && split == (84, 37) && masked_count(121, 0.7) == 84,
        format!("{bad} bad plans of 1000; P=121 ratio 0.7 -> {}/{}", split.0, split.1),
    ))
}

fn criterion_4() -> Outcome {
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let batch = SimilarityBatch {
        images: vec![eye.clone()],
        texts: eye.clone(),
        tau: 1.0,
        classes: vec![0, 1],
    };
    let l2 = flc_loss(&batch)?;
    let want = (1.0 + (-1.0f64).exp()).ln();
    let one = Tensor::new(vec![1, 2], vec![0.6, 0.8])?;
    let l1 = flc_loss(&SimilarityBatch {
        images: vec![one.clone()],
        texts: one,
        tau: 0.07,
        classes: vec![3],
    })?;
    let mut rng = Rng::new(4);
    let mut unit = |n: usize, d: usize| {
        let t: Tensor<f64> = rng.gaussian(&[n, d]);
        let data = (0..n)
            .flat_map(|i| {
                let r = t.row(i);
                let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![n, d], data).unwrap()
    };
    let (a, b) = (unit(5, 4), unit(5, 4));
    let fwd = flc_loss(&SimilarityBatch {
        images: vec![a.clone()],
        texts: b.clone(),
        tau: 0.3,
        classes: (0..5).collect(),
    })?;
    let swapped = flc_loss(&SimilarityBatch {
        images: vec![b],
        texts: a,
        tau: 0.3,
        classes: (0..5).collect(),
    })?;
    Ok((
        (l2 - want).abs() <= 1e-6 && l1 == 0.0 && fwd == swapped,
        format!("N=2 {l2:.9} (want {want:.9}), N=1 {l1}, swap diff {:e}", (fwd - swapped).abs()),
    ))
}

/// Independent double-loop reference for OA, AA and kappa.
fn reference_metrics(c: &[Vec<u64>]) -> (f64, f64, f64) {
    let k = c.len();
    let mut n = 0.0;
    let mut diag = 0.0;
    let mut recalls = Vec::new();
    for i in 0..k {
        let mut row = 0.0;
        for j in 0..k {
            n += c[i][j] as f64;
            row += c[i][j] as f64;
        }
        diag += c[i][i] as f64;
        if row > 0.0 {
            recalls.push(c[i][i] as f64 / row);
        }
    }
    let mut pe = 0.0;
    for i in 0..k {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..k {
            row += c[i][j] as f64;
            col += c[j][i] as f64;
        }
        pe += row * col;
    }
    pe /= n * n;
    let po = diag / n;
    let kappa = if pe >= 1.0 { 1.0 } else { (po - pe) / (1.0 - pe) };
    (po, recalls.iter().sum::<f64>() / recalls.len() as f64, kappa)
}

fn criterion_5() -> Outcome {
    let fixed = MetricsReport::from_confusion(vec![vec![40, 10], vec![10, 40]])?;
    let exact = fixed.oa == 0.8 && fixed.aa == 0.8 && (fixed.kappa - 0.6).abs() < 1e-15;
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = 2 + rng.below(7);
        let n = 1 + rng.below(300);
        let truths: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let preds: Vec<usize> = truths
            .iter()
            .map(|&t| if rng.uniform() < 0.6 { t } else { rng.below(k) })
            .collect();
        let r = metrics(&preds, &truths, k)?;
        let (oa, aa, kappa) = reference_metrics(&r.confusion);
        let mut c = vec![vec![0u64; k]; k];
        truths.iter().zip(&preds).for_each(|(&t, &p)| c[t][p] += 1);
        if c != r.confusion {
            return Ok((false, "confusion matrix disagrees with the reference count".into()));
        }
        worst = worst.max((r.oa - oa).abs()).max((r.aa - aa).abs()).max((r.kappa - kappa).abs());
    }
    Ok((
        exact && worst <= 1e-12,
        format!(
            "fixture OA {} AA {} kappa {:.15}; max deviation over 1000 random matrices {worst:.1e}",
            fixed.oa, fixed.aa, fixed.kappa
        ),
    ))
}

/// Model and schedule used for the desk-scale runs: the default training
/// recipe with a narrower transformer so a run fits a laptop CPU budget.
fn desk_config(seed: u64, noise: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.synth = SynthParams {
        classes: 4,
        height: 48,
        width: 48,
        channels_a: 16,
        channels_b: 1,
        noise,
        seed,
        ..SynthParams::default()
    };
    cfg.split.pool = 700;
    cfg.split.shots = 2;
    cfg.pretrain.epochs = 100;
    cfg.finetune.epochs = 150;
    cfg.model = ModelConfig {
        patch_size: 5,
        dim: 32,
        heads: 4,
        depth: 2,
        mlp_ratio: 2,
        decoder_dim: 16,
        decoder_heads: 2,
        decoder_depth: 1,
        text_dim: 32,
        text_heads: 4,
        text_depth: 1,
        embed_dim: 32,
        context_len: 16,
        time_features: 16,
    };
    cfg
}

fn run_oa(cfg: &RunConfig) -> Result<(f64, f64)> {
    let t = Instant::now();
    let ds = Dataset::synthetic(&cfg.synth)?;
    let out = run_pipeline(&ds, cfg, &mut |_| Ok(()))?;
    Ok((out.metrics.oa, t.elapsed().as_secs_f64()))
}

fn criterion_6() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (oa, secs) = run_oa(&desk_config(seed, SynthParams::default().noise))?;
        ok &= oa >= 0.90 && secs < 600.0;
        parts.push(format!("{oa:.3} ({secs:.0}s)"));
    }
    Ok((ok, format!("held-out OA per seed: {}", parts.join(", "))))
}

fn criterion_7() -> Outcome {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in SEEDS {
        let cfg = desk_config(seed, HARD_NOISE);
        with.push(run_oa(&cfg)?.0);
        let mut ablated = cfg.clone();
        ablated.components.unsupervised = false;
        without.push(run_oa(&ablated)?.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Ok((
        a > b && (0.7..=0.95).contains(&a),
        format!(
            "noise {HARD_NOISE}: with pretraining {a:.4} [{}], without {b:.4} [{}]",
            fmt(&with),
            fmt(&without)
        ),
    ))
}

const SMALL: &str = r#"{
  "synth": {"height": 24, "width": 24},
  "split": {"pool": 80},
  "model": {"patch_size": 5, "dim": 16, "heads": 2, "depth": 1, "decoder_dim": 8, "decoder_heads": 1,
            "decoder_depth": 1, "text_dim": 16, "text_heads": 2, "text_depth": 1, "embed_dim": 16, "time_features": 8},
  "pretrain": {"epochs": 3, "batch_size": 32},
  "finetune": {"epochs": 10, "lr": 1e-3},
  "eval_batch": 37
}"#;

fn cli_run(dir: &Path) -> Result<Vec<u8>> {
    let bin = env!("CARGO_BIN_EXE_mmrs");
    let steps: [&[&str]; 4] = [
        &["synth", "--config", "c.json", "--out", "scene"],
        &["pretrain", "--config", "c.json", "--data", "scene", "--out", "pre.ck", "--records", "pre.jsonl"],
        &["finetune", "--config", "c.json", "--data", "scene", "--checkpoint", "pre.ck", "--out", "ft.ck", "--records", "ft.jsonl"],
        &["eval", "--data", "scene", "--checkpoint", "ft.ck", "--out", "metrics.json"],
    ];
    std::fs::write(dir.join("c.json"), SMALL).map_err(|e| mmrs::Error::InvalidArgument(e.to_string()))?;
    for args in steps {
        let st = Command::new(bin)
            .current_dir(dir)
            .args(args)
            .args(["--deterministic", "--seed", "11", "--log-level", "warn"])
            .status()
            .expect("binary runs");
        if !st.success() {
            return Err(mmrs::Error::InvalidArgument(format!("`{}` exited with {st}", args[0])));
        }
    }
    Ok(std::fs::read(dir.join("metrics.json")).expect("metrics written"))
}

fn criterion_8() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, mb) = (cli_run(a.path())?, cli_run(b.path())?);
    let ck_same = std::fs::read(a.path().join("ft.ck")).ok() == std::fs::read(b.path().join("ft.ck")).ok();
    Ok((ma == mb && ck_same, format!("metrics JSON identical: {}, checkpoints identical: {ck_same}", ma == mb)))
}

fn criterion_9() -> Outcome {
    let mut rng = Rng::new(9);
    let mut ok = true;
    for _ in 0..20 {
        let (h, w, c) = (1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(6));
        // arbitrary finite bit patterns, subnormals and signed zeros included
        let values: Vec<f32> = (0..h * w * c)
            .map(|_| loop {
                let v = f32::from_bits(rng.below(1 << 32) as u32);
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let cube = Cube::new(h, w, c, values)?;
        let back = Cube::from_bytes(&cube.to_bytes())?;
        ok &= back.values().iter().map(|v| v.to_bits()).eq(cube.values().iter().map(|v| v.to_bits()));
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.below(6) as i32 - 1).collect())?;
        ok &= LabelMap::from_bytes(&labels.to_bytes())? == labels;
    }
    let ds = Dataset::synthetic(&SynthParams {
        height: 12,
        width: 12,
        ..SynthParams::default()
    })?;
    let mut cfg = RunConfig::default();
    cfg.split.pool = 30;
    cfg.model = desk_config(0, 0.1).model;
    let data = Prepared::new(&ds, &cfg, None)?;
    let model = Model::<f32>::new(&cfg.model, data.channels(), data.vocab.len(), data.vocab.eos(), data.classes(), 1)?;
    let ck = Checkpoint::from_model(&model, "pretrain", &data.vocab, &data.stats, cfg.diffusion, serde_json::to_value(&cfg)?);
    let bytes = ck.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    ok &= back.to_bytes()? == bytes && back == ck;
    let palette = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];
    let fixtures: [(&str, usize, usize, Vec<Option<usize>>); 3] = [
        ("map_2x2.ppm", 2, 2, vec![Some(0), None, Some(2), Some(1)]),
        ("map_3x1.ppm", 1, 3, vec![Some(1), Some(1), None]),
        ("map_1x2.ppm", 2, 1, vec![None, Some(0)]),
    ];
    let mut maps = 0;
    for (name, h, w, grid) in fixtures {
        let want = std::fs::read(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).expect("fixture");
        if render_map(&grid, h, w, &palette)? == want {
            maps += 1;
        }
    }
    Ok((
        ok && maps == 3,
        format!("cube/label/checkpoint round trips lossless: {ok}; {maps}/3 map fixtures byte-exact"),
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", criterion_1),
        ("diffusion correctness", criterion_2),
        ("masking contract", criterion_3),
        ("contrastive oracle", criterion_4),
        ("metrics oracle", criterion_5),
        ("end-to-end desk-scale run", criterion_6),
        ("pretraining benefit", criterion_7),
        ("determinism", criterion_8),
        ("format fidelity", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("{} criterion {}: {name} - {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
