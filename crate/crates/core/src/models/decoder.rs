//! Lightweight per-modality reconstruction decoder.

use super::layers::{Linear, Trunk};
use super::params::{normal, Bound, ParamId, ParamSet};
use crate::diffusion::MaskPlan;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Decoder {
    pub proj: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub trunk: Trunk,
    pub head: Linear,
    pub dim: usize,
    pub grid: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        enc_dim: usize,
        grid: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, rng, &format!("{name}.proj"), enc_dim, dim, true),
            mask_token: ps.add(format!("{name}.mask_token"), Tensor::zeros(vec![1, dim])),
            pos: ps.add(format!("{name}.pos"), normal(rng, &[grid, dim], 0.02)),
            trunk: Trunk::new(ps, rng, &format!("{name}.trunk"), dim, heads, depth, mlp_ratio)?,
            head: Linear::new(ps, rng, &format!("{name}.head"), dim, channels, true),
            dim,
            grid,
        })
    }

    /// Reconstructs the full grid of every sample. `tokens` are the encoder's
    /// visible features `[b * nv, enc_dim]` in the order of each plan's
    /// visible list. Returns `[b * grid, channels]` in grid order.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var, plans: &[&MaskPlan]) -> Result<Var> {
        let b = plans.len();
        if b == 0 {
            return Err(Error::invalid("decoder batch is empty"));
        }
        let nv = plans[0].visible().len();
        let nm = plans[0].masked().len();
        for plan in plans {
            if plan.total() != self.grid {
                return Err(Error::invalid(format!(
                    "mask plan covers {} tokens, decoder grid has {}",
                    plan.total(),
                    self.grid
                )));
            }
            if plan.visible().len() != nv {
                return Err(Error::invalid("every sample must have the same visible count"));
            }
            MaskPlan::new(plan.total(), plan.visible().to_vec(), plan.masked().to_vec())?;
        }
        if g.shape(tokens)[0] != b * nv {
            return Err(Error::shape("decode_modality", &[g.shape(tokens), &[b * nv]]));
        }
        let vis = self.proj.forward(g, p, tokens)?;
        let all = if nm > 0 {
            let m = g.gather_rows(p[self.mask_token], &vec![0; b * nm])?;
            g.concat(&[vis, m], 0)?
        } else {
            vis
        };
        let mut order = vec![0; b * self.grid];
        for (i, plan) in plans.iter().enumerate() {
            for (j, &q) in plan.visible().iter().enumerate() {
                order[i * self.grid + q] = i * nv + j;
            }
            for (j, &q) in plan.masked().iter().enumerate() {
                order[i * self.grid + q] = b * nv + i * nm + j;
            }
        }
        let grid_tokens = g.gather_rows(all, &order)?;
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..self.grid).collect();
        let pos = g.gather_rows(p[self.pos], &pos_idx)?;
        let h = g.add(grid_tokens, pos)?;
        let h = g.reshape(h, &[b, self.grid, self.dim])?;
        let h = self.trunk.forward(g, p, h, None)?;
        let h = g.reshape(h, &[b * self.grid, self.dim])?;
        self.head.forward(g, p, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.proj.params();
        v.push(self.mask_token);
        v.push(self.pos);
        v.extend(self.trunk.params());
        v.extend(self.head.params());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample_mask;

    fn setup() -> (ParamSet<f64>, Decoder) {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(5);
        let dec = Decoder::new(&mut ps, &mut rng, "dec", 6, 9, 4, 2, 1, 2, 3).unwrap();
        (ps, dec)
    }

    fn run(ps: &ParamSet<f64>, dec: &Decoder, plans: &[&MaskPlan]) -> Result<Tensor<f64>> {
        let nv = plans[0].visible().len();
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let mut rng = Rng::new(1);
        let x = g.constant(rng.gaussian(&[plans.len() * nv, 6]));
        let out = dec.forward(&mut g, &p, x, plans)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn unmasked_plan_covers_the_grid() {
        let (ps, dec) = setup();
        let plan = MaskPlan::unmasked(9);
        assert_eq!(run(&ps, &dec, &[&plan]).unwrap().shape(), &[9, 3]);
    }

    #[test]
    fn output_shape_for_any_partition() {
        let (ps, dec) = setup();
        let mut rng = Rng::new(2);
        let a = sample_mask(9, 0.5, &mut rng).unwrap();
        let b = sample_mask(9, 0.5, &mut rng).unwrap();
        assert_eq!(run(&ps, &dec, &[&a, &b]).unwrap().shape(), &[18, 3]);
    }

    #[test]
    fn mask_token_is_one_shared_zero_vector() {
        let (ps, dec) = setup();
        let t = ps.get(dec.mask_token);
        assert_eq!(t.shape(), &[1, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert_eq!(ps.count_with_prefix("dec.mask_token"), 4);
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let (ps, dec) = setup();
        let plan = MaskPlan::unmasked(4);
        assert!(run(&ps, &dec, &[&plan]).is_err());
    }
}
