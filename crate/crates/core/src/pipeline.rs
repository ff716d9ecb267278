//! End-to-end runs: prepare, pretrain, fine-tune, evaluate.

use crate::config::RunConfig;
use crate::eval::{metrics, predict, MetricsReport};
use crate::error::Result;
use crate::models::{Checkpoint, Model};
use crate::numerics::Real;
use crate::training::{finetune, init_finetune_model, init_pretrain_model, pretrain, Dataset, Prepared, TrainRecord};

pub struct RunOutput {
    pub metrics: MetricsReport,
    pub pretrain: Vec<TrainRecord>,
    pub finetune: Vec<TrainRecord>,
    pub model: Model<f32>,
    /// Stage-1 checkpoint, when pretraining ran.
    pub checkpoint: Option<Checkpoint>,
    pub prepared: Prepared,
}

/// Held-out metrics over the split's evaluation pixels.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Prepared, cfg: &RunConfig) -> Result<MetricsReport> {
    let coords: Vec<_> = data.split.eval.iter().map(|&(c, _)| c).collect();
    let truths: Vec<usize> = data.split.eval.iter().map(|&(_, k)| k).collect();
    let preds = predict(model, data, &coords, cfg)?;
    metrics(&preds, &truths, data.classes())
}

/// Stage-1 pretraining of a fresh model, returned as a checkpoint.
pub fn run_pretrain(
    cfg: &RunConfig,
    data: &Prepared,
    emit: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<(Checkpoint, Vec<TrainRecord>)> {
    let mut model: Model<f32> = init_pretrain_model(cfg, data)?;
    let records = pretrain(cfg, data, &mut model, emit)?;
    let ck = Checkpoint::from_model(&model, "pretrain", &data.vocab, &data.stats, cfg.diffusion, serde_json::to_value(cfg)?);
    Ok((ck, records))
}

/// Stage-2 fine-tuning from an optional stage-1 checkpoint.
pub fn run_finetune(
    cfg: &RunConfig,
    data: &Prepared,
    pretrained: Option<&Checkpoint>,
    emit: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<(Model<f32>, Vec<TrainRecord>)> {
    let ps = pretrained.map(|c| c.param_set::<f32>());
    let mut model: Model<f32> = init_finetune_model(cfg, data, ps.as_ref())?;
    let records = finetune(cfg, data, &mut model, emit)?;
    Ok((model, records))
}

/// The whole pipeline on one dataset.
pub fn run_pipeline(ds: &Dataset, cfg: &RunConfig, emit: &mut dyn FnMut(&TrainRecord) -> Result<()>) -> Result<RunOutput> {
    cfg.validate()?;
    let data = Prepared::new(ds, cfg, None)?;
    let (checkpoint, pre) = if cfg.components.unsupervised {
        let (ck, r) = run_pretrain(cfg, &data, emit)?;
        (Some(ck), r)
    } else {
        (None, Vec::new())
    };
    let (model, fine) = run_finetune(cfg, &data, checkpoint.as_ref(), emit)?;
    let report = evaluate(&model, &data, cfg)?;
    Ok(RunOutput {
        metrics: report,
        pretrain: pre,
        finetune: fine,
        model,
        checkpoint,
        prepared: data,
    })
}
