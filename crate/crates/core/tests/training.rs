use mmrs::dataio::{Coord, SynthParams};
use mmrs::diffusion::{sample_mask, sample_reverse_from_noise, Denoiser, MaskPlan};
use mmrs::eval::predict;
use mmrs::models::{Modality, Model, ModelConfig, ModelDenoiser};
use mmrs::numerics::{Rng, Tensor};
use mmrs::pipeline::{run_finetune, run_pretrain};
use mmrs::training::{init_pretrain_model, Dataset, Prepared, TrainRecord};
use mmrs::RunConfig;

fn small(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.synth = SynthParams {
        height: 24,
        width: 24,
        seed,
        ..SynthParams::default()
    };
    c.split.pool = 200;
    c.model = ModelConfig {
        patch_size: 5,
        dim: 16,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        decoder_dim: 8,
        decoder_heads: 2,
        decoder_depth: 1,
        text_dim: 16,
        text_heads: 2,
        text_depth: 1,
        embed_dim: 16,
        context_len: 16,
        time_features: 8,
    };
    c.pretrain.epochs = 12;
    c.pretrain.batch_size = 50;
    c.pretrain.lr = 1e-3;
    c.finetune.epochs = 150;
    c.finetune.lr = 1e-3;
    c
}

fn prepared(cfg: &RunConfig) -> Prepared {
    Prepared::new(&Dataset::synthetic(&cfg.synth).unwrap(), cfg, None).unwrap()
}

fn pretrain_records(cfg: &RunConfig) -> Vec<TrainRecord> {
    run_pretrain(cfg, &prepared(cfg), &mut |_| Ok(())).unwrap().1
}

#[test]
fn pretraining_loss_decreases_for_every_seed() {
    for seed in 0..5 {
        let r = pretrain_records(&small(seed));
        assert!(r.last().unwrap().loss < r[0].loss, "seed {seed}: {:?}", r.iter().map(|x| x.loss).collect::<Vec<_>>());
    }
}

#[test]
fn records_are_ordered_and_reproducible() {
    let cfg = small(3);
    let a = pretrain_records(&cfg);
    let b = pretrain_records(&cfg);
    assert_eq!(a, b);
    for w in a.windows(2) {
        assert!(w[1].epoch == w[0].epoch + 1 && w[1].step > w[0].step);
    }
    assert_eq!(a.last().unwrap().step, 12 * 4);
}

/// Decoder output for every token of `x0` given its visible rows at step `t`
/// (noise-free, so only meaningful for small `t`).
fn decode(model: &Model<f64>, m: Modality, x0: &Tensor<f64>, plan: &MaskPlan, t: usize) -> Tensor<f64> {
    let c = x0.shape()[1];
    let vis: Vec<f64> = plan.visible().iter().flat_map(|&q| x0.row(q).to_vec()).collect();
    let vis = Tensor::new(vec![plan.visible().len(), c], vis).unwrap();
    ModelDenoiser { model, modality: m }.predict_x0(&vis, t, plan).unwrap()
}

fn second_moment(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>() / t.data().len() as f64
}

#[test]
fn initial_loss_matches_an_untrained_reconstruction() {
    let mut cfg = small(1);
    cfg.mask.ratio = 0.0;
    cfg.diffusion.steps = 1;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.lr = 0.0;
    let data = prepared(&cfg);
    let r = run_pretrain(&cfg, &data, &mut |_| Ok(())).unwrap().1;
    // an untrained decoder is uncorrelated with its target, so the loss is
    // close to E[x^2] + E[y^2] summed over both modalities
    let model: Model<f64> = init_pretrain_model(&cfg, &data).unwrap();
    let pool = data.pool_samples().unwrap();
    let mut rng = Rng::new(0);
    let mut baseline = 0.0;
    for m in [Modality::A, Modality::B] {
        let (mut sx, mut sy) = (0.0, 0.0);
        for s in &pool {
            let x0 = model.patch_tensor(&s.patches[m.index()], m).unwrap().cast::<f64>();
            let plan = sample_mask(model.grid(), 0.0, &mut rng).unwrap();
            sx += second_moment(&x0);
            sy += second_moment(&decode(&model, m, &x0, &plan, 1));
        }
        baseline += (sx + sy) / pool.len() as f64;
    }
    let ratio = r[0].loss / baseline;
    assert!((0.85..1.15).contains(&ratio), "init loss {} vs baseline {baseline}", r[0].loss);
    cfg.pretrain.lr = 1e-3;
    cfg.pretrain.epochs = 8;
    let r = run_pretrain(&cfg, &data, &mut |_| Ok(())).unwrap().1;
    assert!(r.last().unwrap().loss < 0.8 * r[0].loss);
}

#[test]
fn fine_tuning_fits_the_shots() {
    let cfg = small(2);
    let data = prepared(&cfg);
    let (ck, _) = run_pretrain(&cfg, &data, &mut |_| Ok(())).unwrap();
    let (model, recs) = run_finetune(&cfg, &data, Some(&ck), &mut |_| Ok(())).unwrap();
    assert_eq!(recs.len(), 150);
    let mut coords = Vec::new();
    let mut truths = Vec::new();
    for (k, shots) in data.split.shots.iter().enumerate() {
        for &c in shots {
            coords.push(c);
            truths.push(k);
        }
    }
    let preds = predict(&model, &data, &coords, &cfg).unwrap();
    let hits = preds.iter().zip(&truths).filter(|(p, t)| p == t).count();
    assert!(hits as f64 / truths.len() as f64 >= 0.95, "{preds:?} vs {truths:?}");
}

#[test]
fn every_ablation_toggle_runs() {
    let mut base = small(4);
    base.pretrain.epochs = 2;
    base.finetune.epochs = 3;
    let data = prepared(&base);
    for toggle in ["text", "diffusion", "mask", "unsupervised"] {
        let mut cfg = base.clone();
        cfg.set(&format!("components.{toggle}=false")).unwrap();
        let ck = cfg.components.unsupervised.then(|| run_pretrain(&cfg, &data, &mut |_| Ok(())).unwrap().0);
        let (model, recs) = run_finetune(&cfg, &data, ck.as_ref(), &mut |_| Ok(())).unwrap();
        assert!(recs.iter().all(|r| r.loss.is_finite()), "{toggle}");
        let coords: Vec<Coord> = data.split.eval.iter().take(20).map(|&(c, _)| c).collect();
        assert!(predict(&model, &data, &coords, &cfg).unwrap().iter().all(|&p| p < 4));
    }
}

#[test]
fn pretrained_decoder_beats_the_pool_mean() {
    let mut cfg = small(5);
    cfg.pretrain.epochs = 30;
    let data = prepared(&cfg);
    let (ck, _) = run_pretrain(&cfg, &data, &mut |_| Ok(())).unwrap();
    let model: Model<f64> = ck.to_model().unwrap();
    let pool = data.pool_samples().unwrap();
    let c = data.channels()[0];
    let mut mean = vec![0.0; c];
    let mut count = 0.0;
    for s in &pool {
        for px in s.patches[0].values.chunks(c) {
            mean.iter_mut().zip(px).for_each(|(m, &v)| *m += v as f64);
            count += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut rng = Rng::new(77);
    let (mut err_model, mut err_mean, mut n) = (0.0, 0.0, 0.0);
    for s in pool.iter().take(40) {
        let x0 = model.patch_tensor(&s.patches[0], Modality::A).unwrap().cast::<f64>();
        let plan = sample_mask(model.grid(), cfg.mask.ratio, &mut rng).unwrap();
        let out = decode(&model, Modality::A, &x0, &plan, 1);
        for &q in plan.masked() {
            for j in 0..c {
                let truth = x0.row(q)[j];
                err_model += (out.row(q)[j] - truth).powi(2);
                err_mean += (mean[j] - truth).powi(2);
                n += 1.0;
            }
        }
    }
    let (mse_model, mse_mean) = (err_model / n, err_mean / n);
    assert!(mse_model < mse_mean, "decoder MSE {mse_model} vs pool mean {mse_mean}");
}

#[test]
fn reverse_sampling_walks_every_step() {
    let mut cfg = small(6);
    cfg.pretrain.epochs = 2;
    let data = prepared(&cfg);
    let (ck, _) = run_pretrain(&cfg, &data, &mut |_| Ok(())).unwrap();
    let model: Model<f64> = ck.to_model().unwrap();
    let schedule = cfg.diffusion.schedule().unwrap();
    let c = data.channels()[0];
    let mut rng = Rng::new(3);
    let plan = sample_mask(model.grid(), cfg.mask.ratio, &mut rng).unwrap();
    let mut den = ModelDenoiser {
        model: &model,
        modality: Modality::A,
    };
    let out = sample_reverse_from_noise(&mut den, &schedule, &plan, c, &mut rng).unwrap();
    assert_eq!(out.reconstruction.shape(), [plan.total(), c]);
    assert!(out.reconstruction.data().iter().all(|v| v.is_finite()));
    let ts: Vec<usize> = out.steps.iter().map(|s| s.t).collect();
    assert_eq!(ts, (2..=schedule.steps()).rev().collect::<Vec<_>>());
    for s in &out.steps {
        assert!(s.variance > 0.0 && s.variance < 1.0);
        assert_eq!(s.mean.shape(), [plan.visible().len(), c]);
    }
}
