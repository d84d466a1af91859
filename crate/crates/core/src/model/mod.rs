//! Model assembly: encoder and decoder configurations, construction, and
//! parameter counting by enumeration of the declared parameter tensors.

pub mod decoder;
pub mod encoder;
pub mod mae;

use rand::Rng;

use crate::attention::{AdaLnMlp, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::render::RendererMlp;
use crate::tensor::{ParamStore, Scalar};

pub use decoder::{vm_matrix_indices, vm_vector_indices, Decoder};
pub use encoder::{sincos_pos_embed_2d, Encoder};
pub use mae::{choose_mask, mae_pretrain_step, masked_count, MaeHead};

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mask_ratio: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide image {}x{}",
                p, self.image_width, self.image_height
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be divisible by 4 for the positional embedding",
                self.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        Ok(())
    }

    pub fn feature_token_count(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub vm_resolution: usize,
    pub vm_channels: usize,
    pub decoder_patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decoder_patch == 0 || self.vm_resolution % self.decoder_patch != 0 {
            return Err(Error::Config(format!(
                "decoder patch {} does not divide VM resolution {}",
                self.decoder_patch, self.vm_resolution
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be divisible by 4 for the conditioning width",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// 3 (R/q)^2 matrix tokens plus 3 (R/q) vector tokens.
    pub fn output_token_count(&self) -> usize {
        let g = self.vm_resolution / self.decoder_patch;
        3 * g * g + 3 * g
    }

    pub fn matrix_head_width(&self) -> usize {
        self.decoder_patch * self.decoder_patch * self.vm_channels
    }

    pub fn vector_head_width(&self) -> usize {
        self.decoder_patch * self.vm_channels
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub renderer_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Paper-scale configuration (160x90 images, ViT-B encoder, R=48 field).
    pub fn paper() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: 90,
                image_width: 160,
                patch_size: 5,
                depth: 12,
                heads: 12,
                embed_dim: 768,
                mask_ratio: 0.75,
            },
            decoder: DecoderConfig {
                vm_resolution: 48,
                vm_channels: 32,
                decoder_patch: 3,
                depth: 12,
                heads: 16,
                embed_dim: 768,
            },
            renderer_hidden: crate::render::RENDERER_HIDDEN,
        }
    }

    /// Desk-scale default preserving every structural ratio (48x48 inputs).
    pub fn toy() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: 48,
                image_width: 48,
                patch_size: 4,
                depth: 4,
                heads: 4,
                embed_dim: 128,
                mask_ratio: 0.75,
            },
            decoder: DecoderConfig {
                vm_resolution: 24,
                vm_channels: 16,
                decoder_patch: 3,
                depth: 4,
                heads: 4,
                embed_dim: 128,
            },
            renderer_hidden: crate::render::RENDERER_HIDDEN,
        }
    }

    /// Smallest meaningful dimensions, used for 64-bit gradient checks.
    pub fn gradcheck_toy() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: 8,
                image_width: 8,
                patch_size: 2,
                depth: 2,
                heads: 2,
                embed_dim: 16,
                mask_ratio: 0.75,
            },
            decoder: DecoderConfig {
                vm_resolution: 6,
                vm_channels: 2,
                decoder_patch: 3,
                depth: 2,
                heads: 2,
                embed_dim: 16,
            },
            renderer_hidden: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub renderer: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.renderer
    }
}

/// Exact parameter counts by enumerating declared parameter tensors of each
/// component, without allocating the model.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCounts {
    let ec = &cfg.encoder;
    let e = ec.embed_dim;
    let p = ec.patch_size;
    let encoder = Linear::param_count(p * p * 3, e)
        + e // class token
        + ec.depth * TransformerBlock::param_count(e, false, false)
        + 2 * e; // final layer norm
    let dc = &cfg.decoder;
    let e = dc.embed_dim;
    let n_out = dc.output_token_count();
    let decoder = n_out * e
        + (n_out + 1) * e // learnable positional embeddings (incl. class slot)
        + dc.depth * TransformerBlock::param_count(e, true, true)
        + AdaLnMlp::param_count(e, e / 4, decoder::ADALN_SITES_PER_BLOCK * dc.depth)
        + 2 * e // final layer norm
        + Linear::param_count(e, dc.matrix_head_width())
        + Linear::param_count(e, dc.vector_head_width());
    let renderer = RendererMlp::param_count(dc.vm_channels, cfg.renderer_hidden);
    ParamCounts { encoder, decoder, renderer }
}

/// The full trainable model: encoder, decoder, and renderer MLP sharing one
/// parameter store.
pub struct NvistModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub renderer: RendererMlp,
    pub cfg: ModelConfig,
}

impl NvistModel {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> NvistModel {
        cfg.validate().expect("invalid model config");
        assert_eq!(
            cfg.encoder.embed_dim, cfg.decoder.embed_dim,
            "encoder and decoder widths must match for cross-attention"
        );
        let encoder = Encoder::new(store, &cfg.encoder, rng);
        let decoder = Decoder::new(store, &cfg.decoder, rng);
        let renderer = RendererMlp::new(store, "renderer", cfg.decoder.vm_channels, cfg.renderer_hidden, rng);
        NvistModel { encoder, decoder, renderer, cfg: cfg.clone() }
    }
}
