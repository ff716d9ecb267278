//! Causal transformer text encoder with end-of-sequence pooling.

use super::layers::{Linear, Trunk};
use super::params::{normal, Bound, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token: ParamId,
    pub pos: ParamId,
    pub trunk: Trunk,
    pub proj: Linear,
    pub vocab: usize,
    pub context: usize,
    pub dim: usize,
    pub eos: usize,
}

/// Additive `[n, n]` bias blocking attention to later positions.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(vec![n, n], |i| {
        if i % n > i / n {
            T::of(MASKED)
        } else {
            T::zero()
        }
    })
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut Rng,
        vocab: usize,
        context: usize,
        eos: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
        embed: usize,
    ) -> Result<Self> {
        Ok(Self {
            token: ps.add("text.token", normal(rng, &[vocab, dim], 0.02)),
            pos: ps.add("text.pos", normal(rng, &[context, dim], 0.01)),
            trunk: Trunk::new(ps, rng, "text.trunk", dim, heads, depth, mlp_ratio)?,
            proj: Linear::new(ps, rng, "text.proj", dim, embed, false),
            vocab,
            context,
            dim,
            eos,
        })
    }

    /// Unit-norm embeddings `[n, embed]` of `n` padded id sequences.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ids: &[Vec<usize>]) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::invalid("no prompts to encode"));
        }
        let l = self.context;
        let mut eos_rows = Vec::with_capacity(n);
        for (i, seq) in ids.iter().enumerate() {
            if seq.len() != l {
                return Err(Error::invalid(format!("prompt has {} ids, context is {l}", seq.len())));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.vocab) {
                return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab)));
            }
            let hits: Vec<usize> = (0..l).filter(|&j| seq[j] == self.eos).collect();
            if hits.len() != 1 {
                return Err(Error::invalid(format!("prompt has {} <eos> tokens, expected 1", hits.len())));
            }
            eos_rows.push(i * l + hits[0]);
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let tok = g.gather_rows(p[self.token], &flat)?;
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
        let pos = g.gather_rows(p[self.pos], &pos_idx)?;
        let h = g.add(tok, pos)?;
        let h = g.reshape(h, &[n, l, self.dim])?;
        let mask = g.constant(causal_mask(l));
        let h = self.trunk.forward(g, p, h, Some(mask))?;
        let pooled = g.gather_rows(h, &eos_rows)?;
        let v = self.proj.forward(g, p, pooled)?;
        g.l2_normalize(v)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.token, self.pos];
        v.extend(self.trunk.params());
        v.extend(self.proj.params());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Vocab;

    fn setup() -> (ParamSet<f64>, TextEncoder, Vocab) {
        let vocab = Vocab::build(&["a patch of a grass.", "a patch of a water."], 10).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(9);
        let enc = TextEncoder::new(&mut ps, &mut rng, vocab.len(), 10, vocab.eos(), 8, 2, 2, 2, 4).unwrap();
        (ps, enc, vocab)
    }

    fn embed(ps: &ParamSet<f64>, enc: &TextEncoder, ids: Vec<Vec<usize>>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let z = enc.forward(&mut g, &p, &ids)?;
        Ok(g.value(z).clone())
    }

    #[test]
    fn outputs_are_unit_norm_and_distinct() {
        let (ps, enc, vocab) = setup();
        let a = vocab.tokenize("a patch of a grass.").unwrap();
        let b = vocab.tokenize("a patch of a water.").unwrap();
        let z = embed(&ps, &enc, vec![a, b]).unwrap();
        for r in 0..2 {
            let n: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let cos: f64 = z.row(0).iter().zip(z.row(1)).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0 - 1e-9);
    }

    #[test]
    fn tokens_after_eos_do_not_matter() {
        let (ps, enc, vocab) = setup();
        let a = vocab.tokenize("a patch of a grass.").unwrap();
        let mut b = a.clone();
        let e = vocab.eos_position(&a).unwrap();
        for t in b.iter_mut().skip(e + 1) {
            *t = vocab.id("water");
        }
        let za = embed(&ps, &enc, vec![a]).unwrap();
        let zb = embed(&ps, &enc, vec![b]).unwrap();
        assert!(za.max_abs_diff(&zb) < 1e-12);
    }

    #[test]
    fn missing_eos_is_an_error() {
        let (ps, enc, vocab) = setup();
        let mut a = vocab.tokenize("a patch of a grass.").unwrap();
        let e = vocab.eos_position(&a).unwrap();
        a[e] = vocab.pad();
        assert!(embed(&ps, &enc, vec![a]).is_err());
    }
}
