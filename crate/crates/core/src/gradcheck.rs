//! Finite-difference audit of every differentiable op, both training losses
//! and the full model.
//!
//! Each check feeds random inputs through a graph, contracts the output with
//! a fixed random weight tensor to get a scalar, and compares the backward
//! gradient of every input against central differences.

use serde::Serialize;

use crate::diffusion::{forward_diffuse, sample_mask, DiffusionConfig, MaskPlan};
use crate::error::{Error, Result};
use crate::losses::{classifier_loss_graph, flc_loss_graph, umd_loss_graph};
use crate::models::{Bound, Model, ModelConfig, Modality, ParamId};
use crate::numerics::{finite_difference_gradient, relative_error, Graph, Real, Rng, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-3;

/// Outcome of one named check over all of its cases.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradReport {
    pub checks: Vec<CheckResult>,
}

impl GradReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{:<44} cases {:>3}  max rel err {:.3e}  (tol {:.0e})  {}",
                    c.name,
                    c.cases,
                    c.max_rel_err,
                    c.tol,
                    if c.passed() { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Weighted-sum scalar of `build(inputs)`; the weights are drawn once.
fn contracted(g: &mut Graph<f64>, out: Var, weights: &mut Option<Tensor<f64>>, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| rng.gaussian(&shape)).clone();
    if w.shape() != shape.as_slice() {
        return Err(Error::shape("gradcheck", &[w.shape(), &shape]));
    }
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Largest relative error over all inputs of one case.
pub fn check_case(inputs: &[Tensor<f64>], build: &Build, h: f64, rng: &mut Rng) -> Result<f64> {
    let mut weights = None;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = contracted(&mut g, out, &mut weights, rng)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = match grads.get(vars[i]) {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; x.len()],
        };
        let numeric = finite_difference_gradient(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.input(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &vars)?;
                let loss = contracted(&mut g, out, &mut weights.clone(), rng)?;
                Ok(g.value(loss).data()[0])
            },
            x,
            h,
        )?;
        worst = worst.max(relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

fn op_check(name: &str, cases: &[Vec<Vec<usize>>], build: &Build, h: f64, rng: &mut Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for shapes in cases {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.gaussian(s)).collect();
        worst = worst.max(check_case(&inputs, build, h, rng)?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        cases: cases.len(),
        max_rel_err: worst,
        tol: TOL_F64,
    })
}

fn s(shapes: &[&[usize]]) -> Vec<Vec<usize>> {
    shapes.iter().map(|x| x.to_vec()).collect()
}

/// Every graph op on three or more random shapes.
pub fn op_checks(h: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let unary: [&[usize]; 3] = [&[3, 4], &[2, 3, 5], &[7]];
    let rows: [&[usize]; 3] = [&[3, 4], &[2, 3, 5], &[1, 6]];
    let mut push = |name: &str, cases: Vec<Vec<Vec<usize>>>, build: &Build| -> Result<()> {
        out.push(op_check(name, &cases, build, h, rng)?);
        Ok(())
    };
    push(
        "matmul",
        vec![s(&[&[2, 3], &[3, 4]]), s(&[&[3, 2, 4], &[4, 2]]), s(&[&[1, 5], &[5, 3]])],
        &|g, v| g.matmul(v[0], v[1]),
    )?;
    push(
        "batch_matmul",
        vec![s(&[&[2, 3, 4], &[2, 4, 2]]), s(&[&[1, 2, 2], &[1, 2, 5]]), s(&[&[3, 1, 3], &[3, 3, 3]])],
        &|g, v| g.batch_matmul(v[0], v[1], false),
    )?;
    push(
        "batch_matmul_trans_b",
        vec![s(&[&[2, 3, 4], &[2, 2, 4]]), s(&[&[1, 2, 2], &[1, 5, 2]]), s(&[&[3, 1, 3], &[3, 3, 3]])],
        &|g, v| g.batch_matmul(v[0], v[1], true),
    )?;
    let same: Vec<Vec<Vec<usize>>> = unary.iter().map(|&x| s(&[x, x])).collect();
    push("add", same.clone(), &|g, v| g.add(v[0], v[1]))?;
    push("sub", same.clone(), &|g, v| g.sub(v[0], v[1]))?;
    push("mul", same.clone(), &|g, v| g.mul(v[0], v[1]))?;
    push("mse", same, &|g, v| g.mse(v[0], v[1]))?;
    let bc = vec![
        s(&[&[3, 4], &[4]]),
        s(&[&[2, 3, 5], &[3, 5]]),
        s(&[&[2, 3], &[1]]),
        s(&[&[4, 2], &[4, 2]]),
    ];
    push("add_bcast", bc.clone(), &|g, v| g.add_bcast(v[0], v[1]))?;
    push("mul_bcast", bc, &|g, v| g.mul_bcast(v[0], v[1]))?;
    let un: Vec<Vec<Vec<usize>>> = unary.iter().map(|&x| s(&[x])).collect();
    let rw: Vec<Vec<Vec<usize>>> = rows.iter().map(|&x| s(&[x])).collect();
    push("scale", un.clone(), &|g, v| Ok(g.scale(v[0], -1.7)))?;
    push("exp", un.clone(), &|g, v| Ok(g.exp(v[0])))?;
    push("gelu", un.clone(), &|g, v| Ok(g.gelu(v[0])))?;
    push("sum", un.clone(), &|g, v| Ok(g.sum(v[0])))?;
    push("mean", un.clone(), &|g, v| Ok(g.mean(v[0])))?;
    push("softmax", rw.clone(), &|g, v| Ok(g.softmax(v[0])))?;
    push("log_softmax", rw.clone(), &|g, v| Ok(g.log_softmax(v[0])))?;
    push("layer_norm", rw.clone(), &|g, v| Ok(g.layer_norm(v[0])))?;
    push("l2_normalize", rw, &|g, v| g.l2_normalize(v[0]))?;
    push(
        "reshape",
        vec![s(&[&[3, 4]]), s(&[&[2, 3, 5]]), s(&[&[6]])],
        &|g, v| {
            let n = g.value(v[0]).len();
            g.reshape(v[0], &[n / 2, 2])
        },
    )?;
    push(
        "permute",
        vec![s(&[&[2, 3, 4]]), s(&[&[2, 3, 2, 2]]), s(&[&[1, 2, 3, 2]])],
        &|g, v| {
            let perm: Vec<usize> = if g.shape(v[0]).len() == 3 { vec![2, 0, 1] } else { vec![0, 2, 1, 3] };
            g.permute(v[0], &perm)
        },
    )?;
    push(
        "transpose2",
        vec![s(&[&[2, 3]]), s(&[&[4, 1]]), s(&[&[3, 3]])],
        &|g, v| g.transpose2(v[0]),
    )?;
    push(
        "gather_rows",
        vec![s(&[&[4, 3]]), s(&[&[2, 3, 2]]), s(&[&[5, 1]])],
        &|g, v| g.gather_rows(v[0], &[1, 0, 1, 3]),
    )?;
    push(
        "concat_rows",
        vec![s(&[&[2, 3], &[1, 3]]), s(&[&[1, 2, 2], &[3, 2, 2]]), s(&[&[4, 1], &[4, 1]])],
        &|g, v| g.concat(&[v[0], v[1]], 0),
    )?;
    push(
        "concat_last",
        vec![s(&[&[2, 3], &[2, 1]]), s(&[&[2, 2, 2], &[2, 2, 3]]), s(&[&[1, 4], &[1, 4]])],
        &|g, v| {
            let axis = g.shape(v[0]).len() - 1;
            g.concat(&[v[0], v[1]], axis)
        },
    )?;
    push(
        "cross_entropy",
        vec![s(&[&[3, 4]]), s(&[&[3, 2]]), s(&[&[3, 7]])],
        &|g, v| g.cross_entropy(v[0], &[1, 0, 1]),
    )?;
    Ok(out)
}

/// The reconstruction and contrastive losses (plus the classifier fallback)
/// against their inputs.
pub fn loss_checks(h: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let recon = vec![s(&[&[4, 3], &[4, 3]]), s(&[&[9, 2], &[9, 2]]), s(&[&[6, 1], &[6, 1]])];
    out.push(op_check("loss: reconstruction", &recon, &|g, v| umd_loss_graph(g, v[0], v[1], None), h, rng)?);
    out.push(op_check(
        "loss: reconstruction (masked rows)",
        &recon,
        &|g, v| umd_loss_graph(g, v[0], v[1], Some(&[0, 2, 3])),
        h,
        rng,
    )?);
    let normed = |g: &mut Graph<f64>, x: Var| g.l2_normalize(x);
    out.push(op_check(
        "loss: contrastive (one modality)",
        &[s(&[&[3, 4], &[3, 4], &[1]]), s(&[&[2, 2], &[2, 2], &[1]]), s(&[&[5, 3], &[5, 3], &[1]])],
        &|g, v| {
            let a = normed(g, v[0])?;
            let t = normed(g, v[1])?;
            flc_loss_graph(g, &[a], t, v[2])
        },
        h,
        rng,
    )?);
    out.push(op_check(
        "loss: contrastive (two modalities)",
        &[
            s(&[&[3, 4], &[3, 4], &[3, 4], &[1]]),
            s(&[&[2, 3], &[2, 3], &[2, 3], &[1]]),
            s(&[&[4, 2], &[4, 2], &[4, 2], &[1]]),
        ],
        &|g, v| {
            let a = normed(g, v[0])?;
            let b = normed(g, v[1])?;
            let t = normed(g, v[2])?;
            flc_loss_graph(g, &[a, b], t, v[3])
        },
        h,
        rng,
    )?);
    out.push(op_check(
        "loss: classifier",
        &[s(&[&[3, 4], &[3, 4]]), s(&[&[3, 3], &[3, 3]]), s(&[&[3, 5], &[3, 5]])],
        &|g, v| classifier_loss_graph(g, &[v[0], v[1]], &[2, 0, 1]),
        h,
        rng,
    )?);
    Ok(out)
}

/// Which end-to-end objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Reconstruction,
    Contrastive,
    Classifier,
}

/// Fixed inputs of one end-to-end evaluation.
pub struct Fixture {
    pub batch: usize,
    pub images: [Tensor<f64>; 2],
    pub noisy: [Tensor<f64>; 2],
    pub plans: Vec<MaskPlan>,
    pub steps: Vec<usize>,
    pub prompts: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl Fixture {
    /// Random patches, masks, diffusion steps and prompts for `model`.
    pub fn random(model: &Model<f64>, batch: usize, ratio: f64, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let grid = model.grid();
        let schedule = DiffusionConfig {
            steps: 10,
            ..Default::default()
        }
        .schedule()?;
        let plans: Vec<MaskPlan> = (0..batch).map(|_| sample_mask(grid, ratio, &mut rng)).collect::<Result<_>>()?;
        let steps: Vec<usize> = (0..batch).map(|i| if i == 0 { 0 } else { 1 + rng.below(10) }).collect();
        let images = model.channels.map(|c| rng.gaussian(&[batch * grid, c]));
        let mut noisy = Vec::new();
        for (m, x) in images.iter().enumerate() {
            let c = model.channels[m];
            let mut data = Vec::new();
            for (i, plan) in plans.iter().enumerate() {
                let vis: Vec<f64> = plan.visible().iter().flat_map(|&q| x.row(i * grid + q).to_vec()).collect();
                let vis = Tensor::new(vec![plan.visible().len(), c], vis)?;
                let t = if steps[i] > 0 {
                    forward_diffuse(&vis, steps[i], &rng.gaussian(vis.shape()), &schedule)?
                } else {
                    vis
                };
                data.extend(t.into_data());
            }
            let nv = plans[0].visible().len();
            noisy.push(Tensor::new(vec![batch * nv, c], data)?);
        }
        let noisy: [Tensor<f64>; 2] = noisy.try_into().expect("two modalities");
        let eos = model.text.eos;
        let prompts = (0..batch)
            .map(|_| {
                let len = 2 + rng.below(model.text.context - 2);
                let mut ids: Vec<usize> =
                    (0..len - 1).map(|_| loop {
                        let t = rng.below(model.text.vocab);
                        if t != eos {
                            break t;
                        }
                    }).collect();
                ids.push(eos);
                ids.resize(model.text.context, 0);
                ids
            })
            .collect();
        let targets = (0..batch).map(|i| i % model.classes).collect();
        Ok(Self {
            batch,
            images,
            noisy,
            plans,
            steps,
            prompts,
            targets,
        })
    }
}

fn objective<T: Real>(model: &Model<T>, g: &mut Graph<T>, p: &Bound, fx: &Fixture, obj: Objective) -> Result<Var> {
    let b = fx.batch;
    match obj {
        Objective::Reconstruction => {
            let grid = model.grid();
            let plans: Vec<&MaskPlan> = fx.plans.iter().collect();
            let mut total: Option<Var> = None;
            for m in Modality::BOTH {
                let x = g.constant(fx.noisy[m.index()].cast());
                let x0 = g.constant(fx.images[m.index()].cast());
                let recon = model.reconstruct(g, p, x, &plans, &fx.steps, m)?;
                let rows: Vec<usize> = fx
                    .plans
                    .iter()
                    .enumerate()
                    .flat_map(|(i, q)| q.masked().iter().map(move |&r| i * grid + r))
                    .collect();
                let l = umd_loss_graph(g, recon, x0, (!rows.is_empty()).then_some(rows.as_slice()))?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("two modalities"))
        }
        Objective::Contrastive | Objective::Classifier => {
            let xa = g.constant(fx.images[0].cast());
            let xb = g.constant(fx.images[1].cast());
            let za = model.embed_images(g, p, xa, b, Modality::A)?;
            let zb = model.embed_images(g, p, xb, b, Modality::B)?;
            if obj == Objective::Contrastive {
                let zt = model.text.forward(g, p, &fx.prompts)?;
                flc_loss_graph(g, &[za, zb], zt, p[model.temperature.id])
            } else {
                let la = model.classifier.forward(g, p, za)?;
                let lb = model.classifier.forward(g, p, zb)?;
                classifier_loss_graph(g, &[la, lb], &fx.targets)
            }
        }
    }
}

/// Loss value and every parameter gradient (`None` where the loss does not
/// reach the parameter).
pub fn model_gradients<T: Real>(model: &Model<T>, fx: &Fixture, obj: Objective) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let loss = objective(model, &mut g, &p, fx, obj)?;
    let value = g.value(loss).data()[0].f64();
    let mut grads = g.backward(loss)?;
    Ok((value, model.params.ids().map(|id| grads.take(p[id])).collect()))
}

fn model_loss(model: &Model<f64>, fx: &Fixture, obj: Objective) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let loss = objective(model, &mut g, &p, fx, obj)?;
    Ok(g.value(loss).data()[0])
}

/// Parameter group of a parameter name: its first two dotted components.
pub fn group_of(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

/// Compares the gradient of `obj` for every parameter group the objective
/// reaches against central differences of the f64 model. The analytic side
/// runs in `T`, so `T = f32` checks the single-precision path.
pub fn model_checks<T: Real>(
    label: &str,
    model: &Model<f64>,
    fx: &Fixture,
    obj: Objective,
    h: f64,
    tol: f64,
) -> Result<Vec<CheckResult>> {
    let low: Model<T> = Model {
        config: model.config.clone(),
        channels: model.channels,
        classes: model.classes,
        params: model.params.cast(),
        encoder: model.encoder.clone(),
        decoders: model.decoders.clone(),
        text: model.text.clone(),
        head: model.head.clone(),
        temperature: model.temperature.clone(),
        classifier: model.classifier.clone(),
    };
    let (_, grads) = model_gradients(&low, fx, obj)?;
    let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
    for (id, name, _) in model.params.iter() {
        if grads[id.index()].is_none() {
            continue;
        }
        let gname = group_of(name);
        match groups.iter_mut().find(|(n, _)| *n == gname) {
            Some((_, ids)) => ids.push(id),
            None => groups.push((gname, vec![id])),
        }
    }
    if groups.is_empty() {
        return Err(Error::invalid(format!("{label}: objective reaches no parameters")));
    }
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (gname, ids) in groups {
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for id in ids {
            analytic.extend(grads[id.index()].as_ref().expect("reached").to_f64_vec());
            for i in 0..model.params.get(id).len() {
                let orig = model.params.get(id).data()[i];
                probe.params.get_mut(id).data_mut()[i] = orig + h;
                let plus = model_loss(&probe, fx, obj)?;
                probe.params.get_mut(id).data_mut()[i] = orig - h;
                let minus = model_loss(&probe, fx, obj)?;
                probe.params.get_mut(id).data_mut()[i] = orig;
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
        out.push(CheckResult {
            name: format!("{label} {gname}"),
            cases: 1,
            max_rel_err: relative_error(&analytic, &numeric),
            tol,
        });
    }
    Ok(out)
}

/// Smallest configuration that exercises every component: one-pixel
/// patches, so each image is a class token plus a single pixel token.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        patch_size: 1,
        dim: 4,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        decoder_dim: 4,
        decoder_heads: 2,
        decoder_depth: 1,
        text_dim: 4,
        text_heads: 2,
        text_depth: 1,
        embed_dim: 3,
        context_len: 4,
        time_features: 4,
    }
}

/// Toy configuration with 3×3 patches so masking is exercised.
pub fn masked_toy_config() -> ModelConfig {
    ModelConfig {
        patch_size: 3,
        ..toy_config()
    }
}

/// End-to-end checks on the toy models: every parameter group under each
/// objective, in double precision and (at the looser tolerance) single.
pub fn end_to_end_checks(h: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let toy = Model::<f64>::new(&toy_config(), [3, 2], 6, 2, 3, seed)?;
    let fx = Fixture::random(&toy, 3, 0.0, seed ^ 0x5eed)?;
    let masked = Model::<f64>::new(&masked_toy_config(), [2, 1], 6, 2, 3, seed + 1)?;
    let mfx = Fixture::random(&masked, 2, 0.5, seed ^ 0xface)?;
    for (obj, tag) in [
        (Objective::Reconstruction, "reconstruction"),
        (Objective::Contrastive, "contrastive"),
        (Objective::Classifier, "classifier"),
    ] {
        out.extend(model_checks::<f64>(&format!("model/{tag} f64"), &toy, &fx, obj, h, TOL_F64)?);
        out.extend(model_checks::<f32>(&format!("model/{tag} f32"), &toy, &fx, obj, h, TOL_F32)?);
    }
    out.extend(model_checks::<f64>(
        "model/masked reconstruction f64",
        &masked,
        &mfx,
        Objective::Reconstruction,
        h,
        TOL_F64,
    )?);
    Ok(out)
}

/// The whole suite.
pub fn run_gradcheck(seed: u64) -> Result<GradReport> {
    let h = DEFAULT_STEP;
    let mut checks = op_checks(h, seed)?;
    checks.extend(loss_checks(h, seed + 1)?);
    checks.extend(end_to_end_checks(h, seed + 2)?);
    Ok(GradReport { checks })
}
