use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::data::{streams, Prepared};
use super::optim::{lr_at, Adam};
use crate::config::RunConfig;
use crate::diffusion::{forward_diffuse, sample_mask, MaskPlan};
use crate::error::{Error, Result};
use crate::losses::{classifier_loss_graph, flc_loss_graph, umd_loss_graph};
use crate::models::{Bound, Model, Modality, ParamId, ParamSet};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: String,
    pub epoch: usize,
    /// Optimizer steps taken so far in this stage.
    pub step: u64,
    /// Mean loss over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
}

impl TrainRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

fn collect_grads<T: Real>(ps: &ParamSet<T>, g: &Graph<T>, p: &Bound, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
    let mut grads = g.backward(loss)?;
    Ok(ps.ids().filter_map(|id| grads.take(p[id]).map(|t| (id, t))).collect())
}

fn loss_value<T: Real>(g: &Graph<T>, loss: Var, step: u64) -> Result<f64> {
    let v = g.value(loss).data()[0].f64();
    if !v.is_finite() {
        return Err(Error::NumericalAbort {
            step,
            reason: format!("loss became {v}"),
        });
    }
    Ok(v)
}

fn rows_of<T: Real>(full: &Tensor<T>, rows: &[usize]) -> Vec<T> {
    rows.iter().flat_map(|&r| full.row(r).iter().copied()).collect()
}

/// Stage 1: masked-diffusion reconstruction of both modalities through the
/// shared encoder. `emit` receives one record per epoch.
pub fn pretrain<T: Real>(
    cfg: &RunConfig,
    data: &Prepared,
    model: &mut Model<T>,
    emit: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    let pool = data.pool_samples()?;
    if pool.is_empty() {
        return Err(Error::invalid("pretraining pool is empty"));
    }
    let pc = &cfg.pretrain;
    let bs = pc.batch_size.min(pool.len());
    let schedule = cfg.diffusion.schedule()?;
    let ratio = if cfg.components.mask { cfg.mask.ratio } else { 0.0 };
    let grid = model.grid();
    let tensors: Vec<[Tensor<T>; 2]> = pool
        .iter()
        .map(|s| Ok([model.patch_tensor(&s.patches[0], Modality::A)?, model.patch_tensor(&s.patches[1], Modality::B)?]))
        .collect::<Result<_>>()?;
    let mut rng = Rng::new(cfg.seed).fork(streams::PRETRAIN);
    let mut opt = Adam::new(pc.weight_decay);
    let mut records = Vec::with_capacity(pc.epochs);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..pc.epochs {
        let lr = lr_at(pc.schedule, epoch, pc.epochs, pc.lr);
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(bs) {
            if pc.drop_last && batch.len() < bs {
                continue;
            }
            let b = batch.len();
            let plans: Vec<MaskPlan> = (0..b).map(|_| sample_mask(grid, ratio, &mut rng)).collect::<Result<_>>()?;
            let steps: Vec<usize> = (0..b)
                .map(|_| if cfg.components.diffusion { 1 + rng.below(schedule.steps()) } else { 0 })
                .collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let mut total: Option<Var> = None;
            for m in Modality::BOTH {
                let c = model.channels[m.index()];
                let mut noisy = Vec::new();
                let mut target = Vec::with_capacity(b * grid * c);
                let mut masked_rows = Vec::new();
                for (i, &s) in batch.iter().enumerate() {
                    let x0 = &tensors[s][m.index()];
                    let vis = Tensor::new(vec![plans[i].visible().len(), c], rows_of(x0, plans[i].visible()))?;
                    let xt = if steps[i] > 0 {
                        let eps = rng.gaussian(vis.shape());
                        forward_diffuse(&vis, steps[i], &eps, &schedule)?
                    } else {
                        vis
                    };
                    noisy.extend(xt.into_data());
                    target.extend_from_slice(x0.data());
                    masked_rows.extend(plans[i].masked().iter().map(|&q| i * grid + q));
                }
                let nv = plans[0].visible().len();
                let x = g.constant(Tensor::new(vec![b * nv, c], noisy)?);
                let x0 = g.constant(Tensor::new(vec![b * grid, c], target)?);
                let refs: Vec<&MaskPlan> = plans.iter().collect();
                let recon = model.reconstruct(&mut g, &p, x, &refs, &steps, m)?;
                let rows = (cfg.loss.masked_only && !masked_rows.is_empty()).then_some(masked_rows.as_slice());
                let l = umd_loss_graph(&mut g, recon, x0, rows)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let loss = total.expect("two modalities");
            let value = loss_value(&g, loss, opt.steps() + 1)?;
            let grads = collect_grads(&model.params, &g, &p, loss)?;
            opt.update(&mut model.params, &grads, lr)?;
            sum += value;
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("no complete pretraining batch; disable drop_last or shrink the batch"));
        }
        let rec = TrainRecord {
            stage: "pretrain".into(),
            epoch: epoch + 1,
            step: opt.steps(),
            loss: sum / count as f64,
            lr,
        };
        info!("pretrain epoch {} loss {:.6}", rec.epoch, rec.loss);
        emit(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Fresh fine-tuning model: new head, text encoder and temperature, with the
/// encoder taken from `pretrained` when pretraining is enabled.
pub fn init_finetune_model<T: Real, U: Real>(
    cfg: &RunConfig,
    data: &Prepared,
    pretrained: Option<&ParamSet<U>>,
) -> Result<Model<T>> {
    let seed = Rng::new(cfg.seed).fork(streams::FINETUNE_INIT).seed();
    let mut model = Model::new(&cfg.model, data.channels(), data.vocab.len(), data.vocab.eos(), data.classes(), seed)?;
    match (pretrained, cfg.components.unsupervised) {
        (Some(ps), true) => {
            let n = model.params.load_matching(ps, "encoder.")?;
            if n == 0 {
                return Err(Error::invalid("checkpoint holds no encoder parameters"));
            }
        }
        (Some(_), false) => warn!("pretraining disabled: ignoring the supplied checkpoint"),
        (None, true) => warn!("no pretrained encoder supplied: fine-tuning from random weights"),
        (None, false) => {}
    }
    Ok(model)
}

/// Initial model for stage 1.
pub fn init_pretrain_model<T: Real>(cfg: &RunConfig, data: &Prepared) -> Result<Model<T>> {
    let seed = Rng::new(cfg.seed).fork(streams::PRETRAIN_INIT).seed();
    Model::new(&cfg.model, data.channels(), data.vocab.len(), data.vocab.eos(), data.classes(), seed)
}

/// Stage 2: few-shot contrastive alignment of image and class-prompt
/// embeddings (or a linear classifier when the text branch is off).
pub fn finetune<T: Real>(
    cfg: &RunConfig,
    data: &Prepared,
    model: &mut Model<T>,
    emit: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    let fc = &cfg.finetune;
    let k = data.classes();
    let shots = data.shot_samples()?;
    let shot_tensors: Vec<Vec<[Tensor<T>; 2]>> = shots
        .iter()
        .map(|cls| {
            cls.iter()
                .map(|s| Ok([model.patch_tensor(&s.patches[0], Modality::A)?, model.patch_tensor(&s.patches[1], Modality::B)?]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let prompts: Vec<Vec<Vec<usize>>> = (0..k)
        .map(|c| {
            data.catalog
                .prompts(c, cfg.prompt)?
                .iter()
                .map(|s| data.vocab.tokenize(s))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let per_step = k.min(fc.batch_cap);
    let steps_per_epoch = if fc.steps_per_epoch == 0 { data.split.shots_per_class() } else { fc.steps_per_epoch };
    let mut rng = Rng::new(cfg.seed).fork(streams::FINETUNE);
    let mut opt = Adam::new(fc.weight_decay);
    let mut records = Vec::with_capacity(fc.epochs);
    for epoch in 0..fc.epochs {
        let lr = lr_at(fc.schedule, epoch, fc.epochs, fc.lr);
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let mut classes = if per_step == k { (0..k).collect() } else { rng.choose(k, per_step) };
            classes.sort_unstable();
            let picks: Vec<usize> = classes.iter().map(|&c| rng.below(shot_tensors[c].len())).collect();
            let texts: Vec<Vec<usize>> = classes
                .iter()
                .map(|&c| prompts[c][rng.below(prompts[c].len())].clone())
                .collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let xs = Modality::BOTH.map(|m| {
                let data: Vec<T> = classes
                    .iter()
                    .zip(&picks)
                    .flat_map(|(&c, &i)| shot_tensors[c][i][m.index()].data().iter().copied())
                    .collect();
                Tensor::new(vec![per_step * model.grid(), model.channels[m.index()]], data)
            });
            let [xa, xb] = xs;
            let xa = g.constant(xa?);
            let xb = g.constant(xb?);
            let images: Vec<Var> = if cfg.loss.fusion {
                vec![model.embed_fused(&mut g, &p, [xa, xb], per_step)?]
            } else {
                vec![
                    model.embed_images(&mut g, &p, xa, per_step, Modality::A)?,
                    model.embed_images(&mut g, &p, xb, per_step, Modality::B)?,
                ]
            };
            let loss = if cfg.components.text {
                let z_txt = model.text.forward(&mut g, &p, &texts)?;
                flc_loss_graph(&mut g, &images, z_txt, p[model.temperature.id])?
            } else {
                let logits = images
                    .iter()
                    .map(|&z| model.classifier.forward(&mut g, &p, z))
                    .collect::<Result<Vec<_>>>()?;
                classifier_loss_graph(&mut g, &logits, &classes)?
            };
            let value = loss_value(&g, loss, opt.steps() + 1)?;
            let grads = collect_grads(&model.params, &g, &p, loss)?;
            opt.update(&mut model.params, &grads, lr)?;
            model.temperature.clamp(&mut model.params);
            sum += value;
        }
        let rec = TrainRecord {
            stage: "finetune".into(),
            epoch: epoch + 1,
            step: opt.steps(),
            loss: sum / steps_per_epoch.max(1) as f64,
            lr,
        };
        info!("finetune epoch {} loss {:.6}", rec.epoch, rec.loss);
        emit(&rec)?;
        records.push(rec);
    }
    Ok(records)
}
