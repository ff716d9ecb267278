//! Restoration loss and the bidirectional contrastive loss, as plain
//! functions over tensors and as graph builders for training.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_in_place, Graph, Real, Tensor, Var};

const UNIT_TOL: f64 = 1e-6;

/// Mean squared error over all elements.
pub fn umd_loss<T: Real>(x_hat: &Tensor<T>, x0: &Tensor<T>) -> Result<f64> {
    if x_hat.shape() != x0.shape() {
        return Err(Error::shape("umd_loss", &[x_hat.shape(), x0.shape()]));
    }
    let s: f64 = x_hat
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(s / x0.len() as f64)
}

/// `softmax(z · Z_i / τ)` over the rows of `zs`.
pub fn similarity_probs(z: &[f64], zs: &Tensor<f64>, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if zs.shape().len() != 2 || zs.shape()[1] != z.len() {
        return Err(Error::shape("similarity_probs", &[&[z.len()], zs.shape()]));
    }
    let mut logits: Vec<f64> = (0..zs.rows())
        .map(|i| zs.row(i).iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// One contrastive batch: per-modality image embeddings `[N, E]` paired
/// row-by-row with text embeddings `[N, E]` of distinct classes.
#[derive(Clone, Debug)]
pub struct SimilarityBatch {
    pub images: Vec<Tensor<f64>>,
    pub texts: Tensor<f64>,
    pub tau: f64,
    pub classes: Vec<usize>,
}

fn check_unit_rows(t: &Tensor<f64>, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

impl SimilarityBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.texts.rows();
        if n == 0 || self.images.is_empty() {
            return Err(Error::invalid("empty similarity batch"));
        }
        if self.classes.len() != n {
            return Err(Error::invalid("one class id per text row is required"));
        }
        let mut seen = self.classes.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate class texts in a contrastive batch"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        check_unit_rows(&self.texts, "text embedding")?;
        for img in &self.images {
            if img.shape() != self.texts.shape() {
                return Err(Error::shape("flc_loss", &[img.shape(), self.texts.shape()]));
            }
            check_unit_rows(img, "image embedding")?;
        }
        Ok(())
    }
}

/// Symmetric cross-entropy of `G / τ` against the identity, averaged over
/// modalities.
pub fn flc_loss(batch: &SimilarityBatch) -> Result<f64> {
    batch.validate()?;
    let n = batch.texts.rows();
    let mut total = 0.0;
    for img in &batch.images {
        let g: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| img.row(i).iter().zip(batch.texts.row(j)).map(|(a, b)| a * b).sum::<f64>() / batch.tau)
                    .collect()
            })
            .collect();
        let mut rows = 0.0;
        let mut cols = 0.0;
        for i in 0..n {
            rows += log_sum_exp(&g[i]) - g[i][i];
            let col: Vec<f64> = (0..n).map(|j| g[j][i]).collect();
            cols += log_sum_exp(&col) - g[i][i];
        }
        total += 0.5 * (rows + cols) / n as f64;
    }
    Ok(total / batch.images.len() as f64)
}

/// Graph form of [`umd_loss`]. When `rows` is given, only those rows of the
/// `[rows, C]` views enter the mean.
pub fn umd_loss_graph<T: Real>(g: &mut Graph<T>, x_hat: Var, x0: Var, rows: Option<&[usize]>) -> Result<Var> {
    match rows {
        Some(idx) => {
            let a = g.gather_rows(x_hat, idx)?;
            let b = g.gather_rows(x0, idx)?;
            g.mse(a, b)
        }
        None => g.mse(x_hat, x0),
    }
}

/// Graph form of [`flc_loss`] with the temperature held as `log(1/τ)` in the
/// one-element `logit_scale`.
pub fn flc_loss_graph<T: Real>(g: &mut Graph<T>, images: &[Var], texts: Var, logit_scale: Var) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::invalid("no image embeddings"));
    }
    let n = g.shape(texts)[0];
    let targets: Vec<usize> = (0..n).collect();
    let scale = g.exp(logit_scale);
    let tt = g.transpose2(texts)?;
    let mut terms = Vec::with_capacity(images.len());
    for &img in images {
        if g.shape(img) != g.shape(texts) {
            return Err(Error::shape("flc_loss", &[g.shape(img), g.shape(texts)]));
        }
        let sim = g.matmul(img, tt)?;
        let logits = g.mul_bcast(sim, scale)?;
        let r = g.cross_entropy(logits, &targets)?;
        let lt = g.transpose2(logits)?;
        let c = g.cross_entropy(lt, &targets)?;
        let s = g.add(r, c)?;
        terms.push(g.scale(s, 0.5));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / images.len() as f64))
}

/// Mean cross-entropy of a linear classifier's logits, used when the text
/// branch is disabled.
pub fn classifier_loss_graph<T: Real>(g: &mut Graph<T>, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::invalid("no classifier logits"));
    }
    let mut acc = g.cross_entropy(logits[0], targets)?;
    for &l in &logits[1..] {
        let c = g.cross_entropy(l, targets)?;
        acc = g.add(acc, c)?;
    }
    Ok(g.scale(acc, 1.0 / logits.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn eye2() -> Tensor<f64> {
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn unit_rows(rng: &mut Rng, n: usize, e: usize) -> Tensor<f64> {
        let mut t: Tensor<f64> = rng.gaussian(&[n, e]);
        for row in t.data_mut().chunks_exact_mut(e) {
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    #[test]
    fn umd_examples() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(umd_loss(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.3);
        assert!((umd_loss(&y, &x).unwrap() - 0.09).abs() < 1e-12);
        let z = Tensor::<f64>::zeros(vec![3, 2]);
        assert!(umd_loss(&z, &x).is_err());
    }

    #[test]
    fn umd_matches_double_loop() {
        let mut rng = Rng::new(4);
        let a: Tensor<f64> = rng.gaussian(&[3, 2]);
        let b: Tensor<f64> = rng.gaussian(&[3, 2]);
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                let d = a.data()[i * 2 + j] - b.data()[i * 2 + j];
                s += d * d;
            }
        }
        assert!((umd_loss(&a, &b).unwrap() - s / 6.0).abs() < 1e-12);
    }

    #[test]
    fn probs_examples() {
        let one = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(similarity_probs(&[1.0, 0.0], &one, 0.5).unwrap(), vec![1.0]);
        let p = similarity_probs(&[1.0, 0.0], &eye2(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let p = similarity_probs(&[1.0, 0.0], &eye2(), 1e3).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-3));
        assert!(similarity_probs(&[1.0, 0.0], &eye2(), 0.0).is_err());
    }

    #[test]
    fn flc_closed_forms() {
        let batch = SimilarityBatch {
            images: vec![eye2()],
            texts: eye2(),
            tau: 1.0,
            classes: vec![0, 1],
        };
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((flc_loss(&batch).unwrap() - want).abs() < 1e-12);
        let one = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let single = SimilarityBatch {
            images: vec![one.clone()],
            texts: one,
            tau: 0.07,
            classes: vec![3],
        };
        assert_eq!(flc_loss(&single).unwrap(), 0.0);
    }

    #[test]
    fn flc_rejects_duplicate_classes() {
        let batch = SimilarityBatch {
            images: vec![eye2()],
            texts: eye2(),
            tau: 1.0,
            classes: vec![1, 1],
        };
        assert!(flc_loss(&batch).is_err());
    }

    #[test]
    fn flc_decreases_with_temperature_when_pairs_dominate() {
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let tau = 1.0 - k as f64 * 0.0475;
            let batch = SimilarityBatch {
                images: vec![eye2()],
                texts: eye2(),
                tau,
                classes: vec![0, 1],
            };
            let l = flc_loss(&batch).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn graph_forms_agree_with_plain_forms() {
        let mut rng = Rng::new(21);
        let imgs = [unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 3, 4)];
        let txt = unit_rows(&mut rng, 3, 4);
        let tau = 0.3;
        let want = flc_loss(&SimilarityBatch {
            images: imgs.to_vec(),
            texts: txt.clone(),
            tau,
            classes: vec![0, 1, 2],
        })
        .unwrap();
        let mut g = Graph::new();
        let iv: Vec<Var> = imgs.iter().map(|t| g.constant(t.clone())).collect();
        let tv = g.constant(txt);
        let ls = g.constant(Tensor::full(vec![1], (1.0 / tau).ln()));
        let l = flc_loss_graph(&mut g, &iv, tv, ls).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn flc_symmetric_and_permutation_invariant(seed in 0u64..500, n in 1usize..5) {
            let mut rng = Rng::new(seed);
            let img = unit_rows(&mut rng, n, 3);
            let txt = unit_rows(&mut rng, n, 3);
            let classes: Vec<usize> = (0..n).collect();
            let base = flc_loss(&SimilarityBatch { images: vec![img.clone()], texts: txt.clone(), tau: 0.5, classes: classes.clone() }).unwrap();
            let swapped = flc_loss(&SimilarityBatch { images: vec![txt.clone()], texts: img.clone(), tau: 0.5, classes: classes.clone() }).unwrap();
            prop_assert_eq!(base, swapped);
            let perm: Vec<usize> = (0..n).rev().collect();
            let pi = Tensor::from_fn(vec![n, 3], |k| img.data()[perm[k / 3] * 3 + k % 3]);
            let pt = Tensor::from_fn(vec![n, 3], |k| txt.data()[perm[k / 3] * 3 + k % 3]);
            let permuted = flc_loss(&SimilarityBatch { images: vec![pi], texts: pt, tau: 0.5, classes }).unwrap();
            prop_assert!((base - permuted).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn probs_sum_to_one_and_shift_invariant(seed in 0u64..500, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let zs = unit_rows(&mut rng, n, 4);
            let z = unit_rows(&mut rng, 1, 4);
            let p = similarity_probs(z.data(), &zs, 0.2).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let mut shifted: Vec<f64> = (0..n)
                .map(|i| zs.row(i).iter().zip(z.data()).map(|(a, b)| a * b).sum::<f64>() / 0.2 + 17.5)
                .collect();
            softmax_in_place(&mut shifted);
            for (a, b) in p.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
