use super::{apply_mask, oracle_masks, Decoder, Encoder, ModelManifest, SepOutput, SeparatorConfig, Tdcn};
use crate::autodiff::{ParamStore, Parameter};
use crate::error::{Error, Result};
use crate::numcore::{RngStream, Scalar, Tensor};
use crate::signal::Waveform;

const INIT_ENCODER: u64 = 0x656e63;
const INIT_DECODER: u64 = 0x646563;
const INIT_SEPARATOR: u64 = 0x736570;

/// Encoder, decoder and (optionally) a separator described by one manifest.
#[derive(Debug, Clone)]
pub struct System<T: Scalar> {
    manifest: ModelManifest,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub separator: Option<Tdcn<T>>,
}

impl<T: Scalar> System<T> {
    /// Fresh parameters; each component draws from its own substream of
    /// `seed` so adding a separator never changes the codec initialization.
    pub fn new(manifest: ModelManifest, seed: u64) -> Result<Self> {
        manifest.validate()?;
        let root = RngStream::new(seed);
        let encoder = Encoder::new(manifest.encoder, &mut root.substream(INIT_ENCODER))?;
        let decoder = Decoder::new(manifest.encoder, &mut root.substream(INIT_DECODER))?;
        let separator = match manifest.separator {
            Some(cfg) => Some(Tdcn::new(
                cfg,
                manifest.encoder.num_bases,
                manifest.num_sources,
                &mut root.substream(INIT_SEPARATOR),
            )?),
            None => None,
        };
        Ok(Self {
            manifest,
            encoder,
            decoder,
            separator,
        })
    }

    /// Replaces the separator with a freshly initialized one.
    pub fn attach_separator(&mut self, cfg: SeparatorConfig, seed: u64) -> Result<()> {
        let sep = Tdcn::new(
            cfg,
            self.manifest.encoder.num_bases,
            self.manifest.num_sources,
            &mut RngStream::new(seed).substream(INIT_SEPARATOR),
        )?;
        self.manifest.separator = Some(cfg);
        self.separator = Some(sep);
        Ok(())
    }

    /// Copy of the whole system at another precision.
    pub fn cast<U: Scalar>(&self) -> Result<System<U>> {
        let mut out = System::<U>::new(self.manifest.clone(), 0)?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.cast();
            dst.trainable = src.trainable;
        }
        Ok(out)
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn num_sources(&self) -> usize {
        self.manifest.num_sources
    }

    pub fn separator_ref(&self) -> Result<&Tdcn<T>> {
        self.separator
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no separator (Step-1 checkpoint?)".into()))
    }

    /// Stacks equally long waveforms into `[B, 1, T]`.
    pub fn batch(waves: &[&Waveform]) -> Result<Tensor<T>> {
        let len = waves.first().map(|w| w.len()).unwrap_or(0);
        if waves.iter().any(|w| w.len() != len) {
            return Err(Error::Invalid("waveforms in a batch must share one length".into()));
        }
        let data = waves
            .iter()
            .flat_map(|w| w.samples().iter().map(|&s| T::of_f64(s as f64)))
            .collect();
        Tensor::new(vec![waves.len(), 1, len], data)
    }

    /// Splits `[B, 1, T]` back into waveforms.
    pub fn unbatch(t: &Tensor<T>, sample_rate: u32) -> Result<Vec<Waveform>> {
        (0..t.shape()[0])
            .map(|b| Waveform::new(t.slab(b).iter().map(|v| v.as_f64() as f32).collect(), sample_rate))
            .collect()
    }

    /// Encoder latent `[bases, frames]` of one waveform.
    pub fn encode(&self, w: &Waveform) -> Result<Tensor<T>> {
        let v = self.encoder.encode(&Self::batch(&[w])?)?;
        let (k, f) = (v.shape()[1], v.shape()[2]);
        v.reshape([k, f])
    }

    /// Decodes a `[bases, frames]` latent to `len` samples.
    pub fn decode(&self, v: &Tensor<T>, len: usize) -> Result<Waveform> {
        let (k, f) = v.dims2()?;
        let y = self.decoder.decode(&v.clone().reshape([1, k, f])?, len)?;
        Ok(Self::unbatch(&y, self.manifest.sample_rate)?.remove(0))
    }

    /// Separator latent estimates for one mixture, one `[bases, frames]`
    /// tensor per source.
    pub fn estimate_latents(&self, mixture: &Waveform) -> Result<SepOutput<T>> {
        let v_x = self.encoder.encode(&Self::batch(&[mixture])?)?;
        self.separator_ref()?.separate(&v_x)
    }

    /// `D(S(E(x)))`: one waveform per source, each as long as the mixture.
    pub fn separate(&self, mixture: &Waveform) -> Result<Vec<Waveform>> {
        let out = self.estimate_latents(mixture)?;
        let n = self.num_sources();
        let (k, f) = (out.latents.shape()[1] / n, out.latents.shape()[2]);
        let stacked = out.latents.reshape([n, k, f])?;
        let y = self.decoder.decode(&stacked, mixture.len())?;
        Self::unbatch(&y, self.manifest.sample_rate)
    }

    /// Reconstructions from softmax oracle masks over the true sources'
    /// latents applied to the mixture latent.
    pub fn oracle_separate(&self, mixture: &Waveform, sources: &[Waveform]) -> Result<Vec<Waveform>> {
        if sources.len() != self.num_sources() {
            return Err(Error::Invalid(format!(
                "expected {} sources, got {}",
                self.num_sources(),
                sources.len()
            )));
        }
        let v_x = self.encode(mixture)?;
        let latents = sources.iter().map(|s| self.encode(s)).collect::<Result<Vec<_>>>()?;
        let masks = oracle_masks(&latents)?;
        masks
            .iter()
            .map(|m| self.decode(&apply_mask(&v_x, m)?, mixture.len()))
            .collect()
    }
}

impl<T: Scalar> ParamStore<T> for System<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        if let Some(s) = &self.separator {
            v.extend(s.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        if let Some(s) = &mut self.separator {
            v.extend(s.params_mut());
        }
        v
    }
}
