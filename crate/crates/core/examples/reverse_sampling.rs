//! Runs the reverse diffusion chain of a pretrained model on one patch:
//! visible pixels start from noise, masked pixels are filled in by the
//! decoder at every step.
//!
//! `cargo run --release --example reverse_sampling`

mod common;

use mmrs::diffusion::{sample_mask, sample_reverse_from_noise};
use mmrs::models::{Modality, Model, ModelDenoiser};
use mmrs::numerics::Rng;
use mmrs::pipeline::run_pretrain;
use mmrs::training::{Dataset, Prepared};

fn main() -> mmrs::Result<()> {
    let mut cfg = common::demo_config(4);
    cfg.pretrain.epochs = 20;
    let data = Prepared::new(&Dataset::synthetic(&cfg.synth)?, &cfg, None)?;
    let (ck, _) = run_pretrain(&cfg, &data, &mut |_| Ok(()))?;
    let model: Model<f64> = ck.to_model()?;
    let schedule = cfg.diffusion.schedule()?;

    let mut rng = Rng::new(11);
    let plan = sample_mask(model.grid(), cfg.mask.ratio, &mut rng)?;
    let sample = &data.pool_samples()?[0];
    let x0 = model.patch_tensor(&sample.patches[0], Modality::A)?.cast::<f64>();
    let mut den = ModelDenoiser {
        model: &model,
        modality: Modality::A,
    };
    let out = sample_reverse_from_noise(&mut den, &schedule, &plan, data.channels()[0], &mut rng)?;

    for s in out.steps.iter().step_by(10) {
        println!("t={:>3}  posterior variance {:.5}", s.t, s.variance);
    }
    let err = |rows: &[usize]| {
        let mut e = 0.0;
        for &q in rows {
            e += out.reconstruction.row(q).iter().zip(x0.row(q)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        e / (rows.len() * x0.shape()[1]) as f64
    };
    println!("{} visible, {} masked tokens", plan.visible().len(), plan.masked().len());
    println!("MSE visible {:.4}  masked {:.4}", err(plan.visible()), err(plan.masked()));
    Ok(())
}
