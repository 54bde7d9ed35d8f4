//! Learned filterbank encoder/decoder, oracle latent masking and the TDCN
//! separator.
//!
//! Latent tensors are laid out `[batch, bases, frames]`. When several
//! sources share one tensor they are stacked along the channel axis as
//! `[batch, sources · bases, frames]`, source-major, which is also the
//! memory layout of `[batch · sources, bases, frames]`.

mod codec;
mod system;
mod tdcn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

pub use codec::{Decoder, DecoderCtx, Encoder, EncoderCtx};
pub use system::System;
pub use tdcn::{SepOutput, Tdcn, TdcnCtx};

/// Version of the model manifest layout written next to checkpoints.
pub const MODEL_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_bases: usize,
    pub kernel: usize,
    pub hop: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_bases: 32,
            kernel: 21,
            hop: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bases == 0 {
            return Err(Error::Config("num_bases must be positive".into()));
        }
        if self.kernel == 0 || self.hop == 0 || self.hop > self.kernel {
            return Err(Error::Config(format!(
                "need 1 ≤ hop ≤ kernel, got hop {} kernel {}",
                self.hop, self.kernel
            )));
        }
        Ok(())
    }

    /// Number of latent frames for a waveform of `len` samples.
    pub fn frames(&self, len: usize) -> Option<usize> {
        len.checked_sub(self.kernel).map(|r| r / self.hop + 1)
    }
}

/// What the separator's last layer produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Nonnegative latent estimates (ReLU head).
    #[default]
    Latent,
    /// Softmax masks over sources, multiplied with the mixture latent.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorConfig {
    pub bottleneck: usize,
    pub block_channels: usize,
    pub kernel: usize,
    pub num_blocks: usize,
    pub num_repeats: usize,
    pub output: OutputMode,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            bottleneck: 64,
            block_channels: 128,
            kernel: 3,
            num_blocks: 8,
            num_repeats: 1,
            output: OutputMode::Latent,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.block_channels == 0 || self.num_blocks == 0 || self.num_repeats == 0 {
            return Err(Error::Config("separator sizes must all be ≥ 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("separator kernel must be odd, got {}", self.kernel)));
        }
        if self.num_blocks > 16 {
            return Err(Error::Config("num_blocks above 16 gives dilations beyond 2^15".into()));
        }
        Ok(())
    }

    /// Receptive field in latent frames.
    pub fn receptive_field_frames(&self) -> usize {
        let per_repeat: usize = (0..self.num_blocks).map(|b| (self.kernel - 1) << b).sum();
        1 + self.num_repeats * per_repeat
    }

    /// Receptive field in seconds once composed with the encoder framing.
    pub fn receptive_field_seconds(&self, enc: &EncoderConfig, sample_rate: u32) -> f64 {
        let samples = (self.receptive_field_frames() - 1) * enc.hop + enc.kernel;
        samples as f64 / sample_rate as f64
    }
}

/// Architecture description stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub version: u32,
    pub sample_rate: u32,
    pub num_sources: usize,
    pub encoder: EncoderConfig,
    pub separator: Option<SeparatorConfig>,
    /// Where the separator's batch normalization sits.
    pub batch_norm_position: String,
}

impl ModelManifest {
    pub fn new(sample_rate: u32, num_sources: usize, encoder: EncoderConfig, separator: Option<SeparatorConfig>) -> Self {
        Self {
            version: MODEL_MANIFEST_VERSION,
            sample_rate,
            num_sources,
            encoder,
            separator,
            batch_norm_position: "after output prelu, before final pointwise conv".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "model manifest version {} is not supported (expected {MODEL_MANIFEST_VERSION})",
                self.version
            )));
        }
        if !(2..=crate::losses::PIT_MAX_SOURCES).contains(&self.num_sources) {
            return Err(Error::Config(format!("num_sources must be in 2..=6, got {}", self.num_sources)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        self.encoder.validate()?;
        if let Some(s) = &self.separator {
            s.validate()?;
        }
        Ok(())
    }

    /// Same encoder/decoder architecture (what a Step-2 run inherits).
    pub fn codec_matches(&self, other: &ModelManifest) -> bool {
        self.sample_rate == other.sample_rate && self.num_sources == other.num_sources && self.encoder == other.encoder
    }
}

/// Softmax across sources at every cell of equally shaped latents.
pub fn oracle_masks<T: Scalar>(source_latents: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if source_latents.len() < 2 {
        return Err(Error::Invalid(format!(
            "oracle masks need at least two sources, got {}",
            source_latents.len()
        )));
    }
    let shape = source_latents[0].shape();
    for v in source_latents {
        if v.shape() != shape {
            return Err(Error::Shape {
                op: "oracle_masks",
                left: shape.to_vec(),
                right: v.shape().to_vec(),
            });
        }
    }
    let n = source_latents.len();
    let len = source_latents[0].len();
    let mut out: Vec<Vec<T>> = vec![vec![T::zero(); len]; n];
    let mut buf = vec![0.0f64; n];
    for j in 0..len {
        let mx = source_latents
            .iter()
            .map(|v| v.data()[j].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (b, v) in buf.iter_mut().zip(source_latents) {
            *b = (v.data()[j].as_f64() - mx).exp();
            s += *b;
        }
        for (o, b) in out.iter_mut().zip(&buf) {
            o[j] = T::of_f64(b / s);
        }
    }
    out.into_iter().map(|d| Tensor::new(shape.to_vec(), d)).collect()
}

/// `m ⊙ v`.
pub fn apply_mask<T: Scalar>(v: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    v.mul(m)
}
