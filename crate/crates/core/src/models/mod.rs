//! Shared image encoder, per-modality decoders, text encoder, projection
//! head, temperature and checkpoints.

mod checkpoint;
mod decoder;
mod encoder;
mod heads;
mod layers;
mod params;
mod text;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamEntry, CHECKPOINT_VERSION};
pub use decoder::Decoder;
pub use encoder::{timestep_features, Encoded, SharedEncoder};
pub use heads::{Temperature, TAU_INIT, TAU_MAX, TAU_MIN};
pub use layers::{Attention, Block, LayerNorm, Linear, Trunk};
pub use params::{Bound, ParamId, ParamSet};
pub use text::{causal_mask, TextEncoder};

use crate::dataio::Patch;
use crate::diffusion::{Denoiser, MaskPlan};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

/// The two paired input modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::A, Modality::B];

    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::B => 1,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_depth: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_depth: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub time_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 11,
            dim: 128,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            decoder_dim: 64,
            decoder_heads: 4,
            decoder_depth: 2,
            text_dim: 128,
            text_heads: 4,
            text_depth: 2,
            embed_dim: 64,
            context_len: 32,
            time_features: 32,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(Error::Config(format!("model.patch_size must be odd, got {}", self.patch_size)));
        }
        for (name, d, h) in [
            ("model.dim", self.dim, self.heads),
            ("model.decoder_dim", self.decoder_dim, self.decoder_heads),
            ("model.text_dim", self.text_dim, self.text_heads),
        ] {
            if h == 0 || d == 0 || d % h != 0 {
                return Err(Error::Config(format!("{name}={d} must be a positive multiple of its head count {h}")));
            }
        }
        if self.embed_dim == 0 || self.context_len < 3 || self.time_features < 2 || self.time_features % 2 != 0 {
            return Err(Error::Config(
                "model.embed_dim > 0, model.context_len >= 3 and an even model.time_features >= 2 are required".into(),
            ));
        }
        Ok(())
    }
}

/// Everything learnable, in one parameter set.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub channels: [usize; 2],
    pub classes: usize,
    pub params: ParamSet<T>,
    pub encoder: SharedEncoder,
    pub decoders: [Decoder; 2],
    pub text: TextEncoder,
    pub head: Linear,
    pub temperature: Temperature,
    pub classifier: Linear,
}

impl<T: Real> Model<T> {
    /// Builds a randomly initialised model. Each component draws from its own
    /// stream of `seed`, so e.g. the projection head does not depend on the
    /// encoder's size.
    pub fn new(
        config: &ModelConfig,
        channels: [usize; 2],
        vocab_len: usize,
        eos: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if channels.contains(&0) || classes < 1 {
            return Err(Error::invalid("channel and class counts must be positive"));
        }
        let c = config;
        let root = Rng::new(seed);
        let mut ps = ParamSet::new();
        let encoder = SharedEncoder::new(
            &mut ps,
            &mut root.fork(1),
            channels,
            c.grid(),
            c.dim,
            c.heads,
            c.depth,
            c.mlp_ratio,
            c.time_features,
        )?;
        let dec = |ps: &mut ParamSet<T>, stream, name, ch| {
            Decoder::new(
                ps,
                &mut root.fork(stream),
                name,
                c.dim,
                c.grid(),
                c.decoder_dim,
                c.decoder_heads,
                c.decoder_depth,
                c.mlp_ratio,
                ch,
            )
        };
        let decoders = [
            dec(&mut ps, 2, "decoder_a", channels[0])?,
            dec(&mut ps, 3, "decoder_b", channels[1])?,
        ];
        let text = TextEncoder::new(
            &mut ps,
            &mut root.fork(4),
            vocab_len,
            c.context_len,
            eos,
            c.text_dim,
            c.text_heads,
            c.text_depth,
            c.mlp_ratio,
            c.embed_dim,
        )?;
        let head = Linear::new(&mut ps, &mut root.fork(5), "head", c.dim, c.embed_dim, false);
        let temperature = Temperature::new(&mut ps, "logit_scale");
        let classifier = Linear::new(&mut ps, &mut root.fork(6), "classifier", c.embed_dim, classes, true);
        Ok(Self {
            config: config.clone(),
            channels,
            classes,
            params: ps,
            encoder,
            decoders,
            text,
            head,
            temperature,
            classifier,
        })
    }

    pub fn grid(&self) -> usize {
        self.config.grid()
    }

    /// `[P, C_m]` tensor of a patch, checked against the modality's width.
    pub fn patch_tensor(&self, patch: &Patch, m: Modality) -> Result<Tensor<T>> {
        let c = self.channels[m.index()];
        if patch.channels != c || patch.tokens() != self.grid() {
            return Err(Error::shape(
                "patch_tensor",
                &[&[patch.tokens(), patch.channels], &[self.grid(), c]],
            ));
        }
        Ok(Tensor::from_fn(vec![patch.tokens(), c], |i| T::of(patch.values[i] as f64)))
    }

    /// Stacks patches into `[n * P, C_m]`.
    pub fn stack_patches(&self, patches: &[&Patch], m: Modality) -> Result<Tensor<T>> {
        let c = self.channels[m.index()];
        let mut data = Vec::with_capacity(patches.len() * self.grid() * c);
        for patch in patches {
            data.extend(self.patch_tensor(patch, m)?.into_data());
        }
        Tensor::new(vec![patches.len() * self.grid(), c], data)
    }

    /// Per-pixel token embeddings of one patch, `[P, dim]`.
    pub fn tokenize_patch(&self, patch: &Patch, m: Modality) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(self.patch_tensor(patch, m)?);
        let y = self.encoder.tokenize(&mut g, &p, x, m)?;
        Ok(g.value(y).clone())
    }

    /// Unit-norm image embeddings `[b, E]` of `b` full patches stacked in
    /// `x: [b * P, C_m]`, encoded at `t = 0` without masking.
    pub fn embed_images(&self, g: &mut Graph<T>, p: &Bound, x: Var, b: usize, m: Modality) -> Result<Var> {
        let v = self.image_features(g, p, x, b, m)?;
        g.l2_normalize(v)
    }

    /// Projected class features `[b, E]` before normalisation.
    pub fn image_features(&self, g: &mut Graph<T>, p: &Bound, x: Var, b: usize, m: Modality) -> Result<Var> {
        let positions = vec![(0..self.grid()).collect::<Vec<_>>(); b];
        let e = self.encoder.forward(g, p, x, &positions, &vec![0; b], m)?;
        self.head.forward(g, p, e.cls)
    }

    /// Unit-norm embedding of both modalities averaged before normalisation.
    pub fn embed_fused(&self, g: &mut Graph<T>, p: &Bound, xs: [Var; 2], b: usize) -> Result<Var> {
        let va = self.image_features(g, p, xs[0], b, Modality::A)?;
        let vb = self.image_features(g, p, xs[1], b, Modality::B)?;
        let s = g.add(va, vb)?;
        let s = g.scale(s, 0.5);
        g.l2_normalize(s)
    }

    /// Reconstruction `[b * P, C_m]` of the samples whose visible pixels
    /// (already diffused to `steps`) are stacked in `x`.
    pub fn reconstruct(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        plans: &[&MaskPlan],
        steps: &[usize],
        m: Modality,
    ) -> Result<Var> {
        let positions: Vec<Vec<usize>> = plans.iter().map(|q| q.visible().to_vec()).collect();
        let e = self.encoder.forward(g, p, x, &positions, steps, m)?;
        self.decoders[m.index()].forward(g, p, e.tokens, plans)
    }

    /// Inference embedding of patches, `[n, E]`.
    pub fn embed_patches(&self, patches: &[&Patch], m: Modality) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(self.stack_patches(patches, m)?);
        let z = self.embed_images(&mut g, &p, x, patches.len(), m)?;
        Ok(g.value(z).clone())
    }

    /// Inference embedding of tokenised prompts, `[n, E]`.
    pub fn embed_texts(&self, ids: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let z = self.text.forward(&mut g, &p, ids)?;
        Ok(g.value(z).clone())
    }

    pub fn tau(&self) -> f64 {
        self.temperature.tau(&self.params)
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.count_with_prefix("encoder.")
    }

    pub fn decoder_param_count(&self, m: Modality) -> usize {
        self.params.count_with_prefix(["decoder_a.", "decoder_b."][m.index()])
    }
}

/// One modality of a model used as the x₀-predictor of reverse sampling.
pub struct ModelDenoiser<'a, T: Real> {
    pub model: &'a Model<T>,
    pub modality: Modality,
}

impl<T: Real> Denoiser for ModelDenoiser<'_, T> {
    fn predict_x0(&mut self, x_t: &Tensor<f64>, t: usize, plan: &MaskPlan) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let p = self.model.params.bind_frozen(&mut g);
        let x = g.constant(x_t.cast());
        let y = self.model.reconstruct(&mut g, &p, x, &[plan], &[t], self.modality)?;
        Ok(g.value(y).cast())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            patch_size: 3,
            dim: 8,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            decoder_dim: 4,
            decoder_heads: 2,
            decoder_depth: 1,
            text_dim: 8,
            text_heads: 2,
            text_depth: 1,
            embed_dim: 4,
            context_len: 8,
            time_features: 4,
        }
    }

    fn patch(size: usize, channels: usize, seed: u64) -> Patch {
        let mut rng = Rng::new(seed);
        Patch {
            size,
            channels,
            values: (0..size * size * channels).map(|_| rng.normal() as f32).collect(),
        }
    }

    #[test]
    fn default_decoders_are_lighter_than_encoder() {
        let m = Model::<f32>::new(&ModelConfig::default(), [16, 1], 20, 2, 4, 0).unwrap();
        for md in Modality::BOTH {
            assert!(m.decoder_param_count(md) < m.encoder_param_count());
        }
    }

    #[test]
    fn tokenize_counts() {
        let mut cfg = tiny_config();
        let m = Model::<f64>::new(&cfg, [2, 1], 10, 2, 2, 1).unwrap();
        assert_eq!(m.tokenize_patch(&patch(3, 2, 0), Modality::A).unwrap().shape(), &[9, 8]);
        cfg.patch_size = 1;
        let m = Model::<f64>::new(&cfg, [2, 1], 10, 2, 2, 1).unwrap();
        assert_eq!(m.tokenize_patch(&patch(1, 2, 0), Modality::A).unwrap().shape(), &[1, 8]);
        cfg.patch_size = 11;
        let m = Model::<f64>::new(&cfg, [2, 1], 10, 2, 2, 1).unwrap();
        assert_eq!(m.tokenize_patch(&patch(11, 2, 0), Modality::A).unwrap().shape(), &[121, 8]);
        assert!(m.tokenize_patch(&patch(11, 3, 0), Modality::A).is_err());
    }

    #[test]
    fn zero_patch_with_zero_bias_gives_zero_tokens() {
        let m = Model::<f64>::new(&tiny_config(), [2, 1], 10, 2, 2, 1).unwrap();
        let zero = Patch {
            size: 3,
            channels: 2,
            values: vec![0.0; 18],
        };
        let t = m.tokenize_patch(&zero, Modality::A).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_embedding_is_unit_and_scale_invariant() {
        let mut m = Model::<f64>::new(&tiny_config(), [2, 1], 10, 2, 2, 4).unwrap();
        let ps = [patch(3, 2, 1), patch(3, 2, 2)];
        let refs: Vec<&Patch> = ps.iter().collect();
        let z = m.embed_patches(&refs, Modality::A).unwrap();
        for r in 0..2 {
            let n: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let w = m.head.w;
        m.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v *= 3.7);
        let z2 = m.embed_patches(&refs, Modality::A).unwrap();
        assert!(z.max_abs_diff(&z2) < 1e-5);
    }

    #[test]
    fn component_init_is_independent_of_other_sizes() {
        let a = Model::<f64>::new(&tiny_config(), [2, 1], 10, 2, 2, 4).unwrap();
        let mut cfg = tiny_config();
        cfg.text_depth = 2;
        let b = Model::<f64>::new(&cfg, [2, 1], 10, 2, 2, 4).unwrap();
        assert_eq!(a.params.get(a.head.w), b.params.get(b.head.w));
    }
}
