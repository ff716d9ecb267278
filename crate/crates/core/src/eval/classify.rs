use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataio::{ClassCatalog, Coord, PromptTemplate, Vocab};
use crate::error::{Error, Result};
use crate::models::{Model, Modality};
use crate::numerics::{Graph, Real, Tensor};
use crate::training::Prepared;

/// Per class: embed every prompt, average, re-normalise. `[K, E]`.
pub fn class_text_embeddings<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    catalog: &ClassCatalog,
    template: PromptTemplate,
) -> Result<Tensor<T>> {
    let k = catalog.len();
    let e = model.config.embed_dim;
    let mut out = Vec::with_capacity(k * e);
    for c in 0..k {
        let prompts = catalog.prompts(c, template)?;
        if prompts.is_empty() {
            return Err(Error::invalid(format!("class {c} has no prompts")));
        }
        let ids = prompts.iter().map(|p| vocab.tokenize(p)).collect::<Result<Vec<_>>>()?;
        let z = model.embed_texts(&ids)?;
        let mut mean = vec![0.0f64; e];
        for r in 0..z.rows() {
            for (m, &v) in mean.iter_mut().zip(z.row(r)) {
                *m += v.f64();
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::NonFinite(format!("class {c} prompt embeddings cancel out")));
        }
        out.extend(mean.iter().map(|v| T::of(v / norm)));
    }
    Tensor::new(vec![k, e], out)
}

/// Argmax with ties going to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity of each modality embedding to each class embedding,
/// averaged over modalities, then argmax.
pub fn classify<T: Real>(images: &[&[T]], classes: &Tensor<T>) -> usize {
    argmax(&class_scores(images, classes))
}

pub fn class_scores<T: Real>(images: &[&[T]], classes: &Tensor<T>) -> Vec<f64> {
    let k = classes.rows();
    let mut scores = vec![0.0; k];
    for z in images {
        for (c, s) in scores.iter_mut().enumerate() {
            *s += z.iter().zip(classes.row(c)).map(|(a, b)| a.f64() * b.f64()).sum::<f64>();
        }
    }
    scores.iter_mut().for_each(|s| *s /= images.len() as f64);
    scores
}

/// Predicted class of every coordinate, scored in batches of
/// `cfg.eval_batch` (in parallel when threads allow). Batches are
/// independent, so the result does not depend on the thread count.
pub fn predict<T: Real>(model: &Model<T>, data: &Prepared, coords: &[Coord], cfg: &RunConfig) -> Result<Vec<usize>> {
    let text = if cfg.components.text {
        Some(class_text_embeddings(model, &data.vocab, &data.catalog, cfg.prompt)?)
    } else {
        None
    };
    let chunks: Vec<&[Coord]> = coords.chunks(cfg.eval_batch).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| predict_chunk(model, data, chunk, cfg, text.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

fn predict_chunk<T: Real>(
    model: &Model<T>,
    data: &Prepared,
    coords: &[Coord],
    cfg: &RunConfig,
    text: Option<&Tensor<T>>,
) -> Result<Vec<usize>> {
    let samples = coords.iter().map(|&c| data.sample(c, None)).collect::<Result<Vec<_>>>()?;
    let b = samples.len();
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let xs = Modality::BOTH.map(|m| {
        let patches: Vec<_> = samples.iter().map(|s| &s.patches[m.index()]).collect();
        model.stack_patches(&patches, m)
    });
    let [xa, xb] = xs;
    let xa = g.constant(xa?);
    let xb = g.constant(xb?);
    let zs = if cfg.loss.fusion {
        vec![model.embed_fused(&mut g, &p, [xa, xb], b)?]
    } else {
        vec![
            model.embed_images(&mut g, &p, xa, b, Modality::A)?,
            model.embed_images(&mut g, &p, xb, b, Modality::B)?,
        ]
    };
    match text {
        Some(classes) => Ok((0..b)
            .map(|i| {
                let rows: Vec<&[T]> = zs.iter().map(|&z| g.value(z).row(i)).collect();
                classify(&rows, classes)
            })
            .collect()),
        None => {
            let logits = zs
                .iter()
                .map(|&z| model.classifier.forward(&mut g, &p, z))
                .collect::<Result<Vec<_>>>()?;
            Ok((0..b)
                .map(|i| {
                    let k = model.classes;
                    let mut s = vec![0.0; k];
                    for &l in &logits {
                        for (a, v) in s.iter_mut().zip(g.value(l).row(i)) {
                            *a += v.f64();
                        }
                    }
                    argmax(&s)
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_always_wins() {
        let classes = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(classify::<f64>(&[&[0.0, 1.0]], &classes), 0);
    }

    #[test]
    fn matching_embedding_is_chosen() {
        let classes = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let z = [0.6, 0.8];
        assert_eq!(classify::<f64>(&[&z, &z], &classes), 2);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn invariant_to_positive_scaling() {
        let classes = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let z = [0.5, 0.7];
        let s = class_scores::<f64>(&[&z], &classes);
        for tau in [0.01, 0.07, 1.0, 50.0] {
            let scaled: Vec<f64> = s.iter().map(|v| v / tau).collect();
            assert_eq!(argmax(&scaled), argmax(&s));
        }
    }
}
