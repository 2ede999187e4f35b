//! The GRAPE networks: trainable embedding matrix, mapping network, AdaIN
//! generator, style encoder and multi-head discriminator.

mod attention;
mod blocks;
mod discriminator;
mod generator;
mod mapping;
mod style_encoder;

pub use attention::{Attention, AttentionConfig};
pub use blocks::{AdainLayer, AdainResBlk, NormFreeResBlk, ResBlk, ADAIN_EPS};
pub use discriminator::Discriminator;
pub use generator::Generator;
pub use mapping::MappingNetwork;
pub use style_encoder::StyleEncoder;

use crate::autodiff::{Scalar, Tape, Var};
use crate::nn::{Binding, ParamId, ParamSet};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Input image side (must be divisible by 8; three 2x down/up stages).
    pub img_size: usize,
    pub channels: usize,
    /// Number of perturbations P (discriminator heads, embedding rows).
    pub num_perturbations: usize,
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Style code dimension S.
    pub style_dim: usize,
    /// Channel width after the stem convolution; doubles at each downsample
    /// up to `max_width`.
    pub base_width: usize,
    pub max_width: usize,
    /// Hidden width of the 3-layer mapping MLP.
    pub map_hidden: usize,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    /// CPU-tractable defaults used by the desk preset.
    pub fn desk() -> Self {
        ModelConfig {
            img_size: 32,
            channels: 2,
            num_perturbations: 13,
            embed_dim: 32,
            style_dim: 16,
            base_width: 4,
            max_width: 16,
            map_hidden: 64,
            attention: AttentionConfig::default(),
        }
    }

    /// Full-scale configuration matching the original experiment shapes.
    pub fn paper() -> Self {
        ModelConfig {
            img_size: 96,
            channels: 4,
            num_perturbations: 107,
            embed_dim: 500,
            style_dim: 64,
            base_width: 32,
            max_width: 256,
            map_hidden: 512,
            attention: AttentionConfig::default(),
        }
    }

    /// Miniature double-precision configuration for gradient audits.
    pub fn miniature() -> Self {
        ModelConfig {
            img_size: 8,
            channels: 2,
            num_perturbations: 3,
            embed_dim: 4,
            style_dim: 4,
            base_width: 2,
            max_width: 4,
            map_hidden: 6,
            attention: AttentionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size % 8 != 0 || self.img_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "img_size {} must be a positive multiple of 8",
                self.img_size
            )));
        }
        if self.channels == 0 || self.num_perturbations == 0 {
            return Err(Error::InvalidArgument("channels and num_perturbations must be positive".into()));
        }
        self.attention.validate(self.embed_dim)?;
        Ok(())
    }

    /// Channel widths at the stem and after each of the three downsamples.
    pub fn widths(&self) -> [usize; 4] {
        let mut w = [0; 4];
        w[0] = self.base_width;
        for i in 1..4 {
            w[i] = (w[i - 1] * 2).min(self.max_width);
        }
        w
    }
}

/// All GRAPE networks plus the embedding matrix, with parameters stored in a
/// [`ParamSet`].
pub struct GrapeModel {
    pub cfg: ModelConfig,
    /// Trainable P x d embedding matrix M.
    pub embedding: ParamId,
    pub attention: Attention,
    pub mapping: MappingNetwork,
    pub generator: Generator,
    pub style_encoder: StyleEncoder,
    pub discriminator: Discriminator,
}

impl GrapeModel {
    /// Build with He-initialized weights and a standard-normal embedding
    /// matrix, deterministically from `seed`.
    pub fn new<F: Scalar>(cfg: &ModelConfig, ps: &mut ParamSet<F>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = ps.add(
            "embedding.m",
            crate::nn::std_normal(&mut rng, &[cfg.num_perturbations, cfg.embed_dim]),
        );
        let attention = Attention::new(ps, &cfg.attention, cfg.embed_dim, &mut rng);
        let mapping = MappingNetwork::new(ps, cfg.embed_dim, cfg.map_hidden, cfg.style_dim, &mut rng);
        let generator = Generator::new(ps, cfg, &mut rng);
        let style_encoder = StyleEncoder::new(ps, cfg, &mut rng);
        let discriminator = Discriminator::new(ps, cfg, &mut rng);
        Ok(GrapeModel {
            cfg: cfg.clone(),
            embedding,
            attention,
            mapping,
            generator,
            style_encoder,
            discriminator,
        })
    }

    /// Embedding rows for target indices, passed through the (optional)
    /// attention block and gathered: the mapping network input M_z.
    pub fn embed_targets<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, z: &[usize]) -> Var {
        let m = bind.var(self.embedding);
        let m = self.attention.attend(tape, bind, m);
        tape.gather_rows(m, z)
    }

    /// Style codes s = F(M_z) for target indices.
    pub fn style_for_targets<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &Binding,
        z: &[usize],
    ) -> Var {
        let mz = self.embed_targets(tape, bind, z);
        self.mapping.forward(tape, bind, mz)
    }

    pub fn check_image_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.channels || shape[2] != self.cfg.img_size || shape[3] != self.cfg.img_size {
            return Err(Error::Shape(format!(
                "expected [N, {}, {}, {}] image batch, got {:?}",
                self.cfg.channels, self.cfg.img_size, self.cfg.img_size, shape
            )));
        }
        Ok(())
    }

    /// G(x, s): shape-checked generation.
    pub fn generate<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var, s: Var) -> Result<Var> {
        self.check_image_shape(tape.value(x).shape())?;
        let sshape = tape.value(s).shape().to_vec();
        if sshape.len() != 2 || sshape[1] != self.cfg.style_dim {
            return Err(Error::Shape(format!(
                "expected [N, {}] style codes, got {:?}",
                self.cfg.style_dim, sshape
            )));
        }
        Ok(self.generator.forward(tape, bind, x, s))
    }

    /// D(x): per-perturbation logits, length P.
    pub fn discriminate<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var) -> Result<Var> {
        self.check_image_shape(tape.value(x).shape())?;
        Ok(self.discriminator.forward(tape, bind, x, None).0)
    }

    /// E(x): one style code per sample, label-free.
    pub fn encode_style<F: Scalar>(&self, tape: &mut Tape<F>, bind: &Binding, x: Var) -> Result<Var> {
        self.check_image_shape(tape.value(x).shape())?;
        Ok(self.style_encoder.forward(tape, bind, x))
    }

    pub fn params_embedding(&self) -> Vec<ParamId> {
        vec![self.embedding]
    }

    pub fn params_mapping(&self) -> Vec<ParamId> {
        let mut p = self.mapping.params();
        p.extend(self.attention.params());
        p
    }

    pub fn params_generator(&self) -> Vec<ParamId> {
        self.generator.params()
    }

    pub fn params_style_encoder(&self) -> Vec<ParamId> {
        self.style_encoder.params()
    }

    pub fn params_discriminator(&self) -> Vec<ParamId> {
        self.discriminator.params()
    }

    /// Everything updated on the generator-side step: M, F (+attention), G, E.
    pub fn params_generator_side(&self) -> Vec<ParamId> {
        let mut p = self.params_embedding();
        p.extend(self.params_mapping());
        p.extend(self.params_generator());
        p.extend(self.params_style_encoder());
        p
    }
}

/// Adaptive instance normalization: per channel,
/// `(x - mu) / (sigma + eps) * style_std + style_mean` with instance
/// statistics over the spatial dimensions.
pub fn adain<F: Scalar>(tape: &mut Tape<F>, content: Var, style_mean: Var, style_std: Var) -> Var {
    let normed = tape.instance_norm(content, F::from_f64(ADAIN_EPS));
    tape.scale_shift(normed, style_std, style_mean)
}

/// Select one logit per sample: component `y_n` of row `n`.
pub fn select_head<F: Scalar>(tape: &mut Tape<F>, logits: Var, y: &[usize]) -> Result<Var> {
    let p = tape.value(logits).shape()[1];
    if let Some(&bad) = y.iter().find(|&&i| i >= p) {
        return Err(Error::InvalidArgument(format!(
            "perturbation index {bad} out of range (P = {p})"
        )));
    }
    Ok(tape.select_col(logits, y))
}
