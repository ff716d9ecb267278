//! Modality-shared image encoder.

use super::layers::{Linear, Trunk};
use super::params::{normal, Bound, ParamId, ParamSet};
use super::Modality;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

/// Sinusoidal features of a timestep: `[sin(t w_0), .., cos(t w_0), ..]`
/// with `w_i = 10000^(-2i/f)`.
pub fn timestep_features(t: usize, f: usize) -> Vec<f64> {
    let half = f / 2;
    let mut out = vec![0.0; f];
    for i in 0..half {
        let w = 10000f64.powf(-2.0 * i as f64 / f as f64);
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

/// Encoder output for a batch of `b` samples.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[b, dim]`
    pub cls: Var,
    /// `[b * visible, dim]`, sample-major.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub embed: [Linear; 2],
    pub cls: ParamId,
    pub pos: ParamId,
    pub time: Linear,
    pub trunk: Trunk,
    pub dim: usize,
    pub grid: usize,
    pub time_features: usize,
}

impl SharedEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut Rng,
        channels: [usize; 2],
        grid: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
        time_features: usize,
    ) -> Result<Self> {
        if time_features < 2 || time_features % 2 != 0 {
            return Err(Error::invalid("time feature count must be even and at least 2"));
        }
        let embed = [
            Linear::new(ps, rng, "encoder.embed_a", channels[0], dim, true),
            Linear::new(ps, rng, "encoder.embed_b", channels[1], dim, true),
        ];
        let cls = ps.add("encoder.cls", normal(rng, &[1, dim], 0.02));
        let pos = ps.add("encoder.pos", normal(rng, &[grid, dim], 0.02));
        let time = Linear::new(ps, rng, "encoder.time", time_features, dim, true);
        let trunk = Trunk::new(ps, rng, "encoder.trunk", dim, heads, depth, mlp_ratio)?;
        Ok(Self {
            embed,
            cls,
            pos,
            time,
            trunk,
            dim,
            grid,
            time_features,
        })
    }

    pub fn channels(&self, m: Modality) -> usize {
        self.embed[m.index()].in_dim
    }

    /// Per-pixel token embedding `x: [n, C_m] -> [n, dim]`.
    pub fn tokenize<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, m: Modality) -> Result<Var> {
        let s = g.shape(x);
        let c = self.channels(m);
        if s.len() != 2 || s[1] != c {
            return Err(Error::shape("tokenize_patch", &[s, &[c]]));
        }
        self.embed[m.index()].forward(g, p, x)
    }

    /// Encodes `b = positions.len()` samples. `x` holds the visible pixels
    /// `[b * nv, C_m]` sample-major, `positions[i]` their grid indices and
    /// `steps[i]` the diffusion step (0 for the noiseless pass).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        positions: &[Vec<usize>],
        steps: &[usize],
        m: Modality,
    ) -> Result<Encoded> {
        let b = positions.len();
        if b == 0 || steps.len() != b {
            return Err(Error::invalid(format!(
                "encoder batch has {b} position lists and {} steps",
                steps.len()
            )));
        }
        let nv = positions[0].len();
        if nv == 0 || positions.iter().any(|v| v.len() != nv) {
            return Err(Error::invalid("every sample must have the same nonzero visible count"));
        }
        if let Some(&bad) = positions.iter().flatten().find(|&&q| q >= self.grid) {
            return Err(Error::invalid(format!("position {bad} outside the {}-token grid", self.grid)));
        }
        if g.shape(x) != [b * nv, self.channels(m)] {
            return Err(Error::shape("encode_image", &[g.shape(x), &[b * nv, self.channels(m)]]));
        }
        let d = self.dim;
        let tok = self.tokenize(g, p, x, m)?;
        let flat: Vec<usize> = positions.iter().flatten().copied().collect();
        let pos = g.gather_rows(p[self.pos], &flat)?;

        let f = self.time_features;
        let basis: Vec<f64> = steps.iter().flat_map(|&t| timestep_features(t, f)).collect();
        let basis = g.constant(Tensor::from_f64(vec![b, f], &basis)?);
        let temb = self.time.forward(g, p, basis)?;
        let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(nv)).collect();
        let temb_tok = g.gather_rows(temb, &rep)?;

        let tok = g.add(tok, pos)?;
        let tok = g.add(tok, temb_tok)?;
        let tok = g.reshape(tok, &[b, nv, d])?;
        let cls = g.gather_rows(p[self.cls], &vec![0; b])?;
        let cls = g.add(cls, temb)?;
        let cls = g.reshape(cls, &[b, 1, d])?;
        let seq = g.concat(&[cls, tok], 1)?;

        let h = self.trunk.forward(g, p, seq, None)?;
        let n = nv + 1;
        let cls_idx: Vec<usize> = (0..b).map(|i| i * n).collect();
        let tok_idx: Vec<usize> = (0..b).flat_map(|i| (1..n).map(move |j| i * n + j)).collect();
        let cls = g.gather_rows(h, &cls_idx)?;
        let tokens = g.gather_rows(h, &tok_idx)?;
        Ok(Encoded { cls, tokens })
    }

    /// Parameters touched when encoding modality `m`.
    pub fn path_params(&self, m: Modality) -> Vec<ParamId> {
        let mut v = self.embed[m.index()].params();
        v.push(self.cls);
        v.push(self.pos);
        v.extend(self.time.params());
        v.extend(self.trunk.params());
        v
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.embed[0].params();
        v.extend(self.path_params(Modality::B));
        v
    }
}
