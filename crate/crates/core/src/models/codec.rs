use super::EncoderConfig;
use crate::autodiff::{Layer, LayerSpec, Mode, ParamStore, Parameter, Saved};
use crate::error::{Error, Result};
use crate::numcore::{RngStream, Scalar, Tensor};

/// Strided 1-D convolution followed by ReLU: waveform `[B, 1, T]` to a
/// nonnegative latent `[B, bases, frames]`.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    cfg: EncoderConfig,
    conv: Layer<T>,
    relu: Layer<T>,
}

pub struct EncoderCtx<T: Scalar> {
    conv: Saved<T>,
    relu: Saved<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let conv = Layer::new(
            "encoder.conv",
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: cfg.num_bases,
                kernel: cfg.kernel,
                stride: cfg.hop,
                dilation: 1,
                padding: 0,
                bias: false,
            },
            rng,
        )?;
        let relu = Layer::new("encoder.relu", LayerSpec::Relu, rng)?;
        Ok(Self { cfg, conv, relu })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        match *x.shape() {
            [_, 1, t] if t >= self.cfg.kernel => Ok(()),
            [_, 1, t] => Err(Error::Invalid(format!(
                "waveform of {t} samples is shorter than the {}-sample encoder kernel",
                self.cfg.kernel
            ))),
            _ => Err(Error::LayerShape {
                layer: "encoder".into(),
                expected: "[batch, 1, time]".into(),
                got: x.shape().to_vec(),
            }),
        }
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.relu.infer(&self.conv.infer(x)?)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, EncoderCtx<T>)> {
        self.check(x)?;
        let (h, conv) = self.conv.forward(x, Mode::Train)?;
        let (v, relu) = self.relu.forward(&h, Mode::Train)?;
        Ok((v, EncoderCtx { conv, relu }))
    }

    pub fn backward(&mut self, ctx: EncoderCtx<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu.backward(ctx.relu, g)?;
        self.conv.backward(ctx.conv, &g)
    }
}

impl<T: Scalar> ParamStore<T> for Encoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.conv.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.conv.params_mut()
    }
}

/// Bias-free transposed convolution: latent `[B, bases, frames]` to a
/// waveform `[B, 1, len]`. The raw output of `(frames − 1)·hop + kernel`
/// samples is trimmed, or zero-extended, to the requested length, so the
/// whole map is linear in the latent.
#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    cfg: EncoderConfig,
    tconv: Layer<T>,
}

pub struct DecoderCtx<T: Scalar> {
    tconv: Saved<T>,
    raw_len: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let tconv = Layer::new(
            "decoder.tconv",
            LayerSpec::TransposedConv1d {
                in_channels: cfg.num_bases,
                out_channels: 1,
                kernel: cfg.kernel,
                stride: cfg.hop,
                bias: false,
            },
            rng,
        )?;
        Ok(Self { cfg, tconv })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn fit(y: Tensor<T>, len: usize) -> Tensor<T> {
        let (b, raw) = (y.shape()[0], y.shape()[2]);
        if raw == len {
            return y;
        }
        let mut out = Tensor::zeros([b, 1, len]);
        let keep = raw.min(len);
        for bi in 0..b {
            out.slab_mut(bi)[..keep].copy_from_slice(&y.slab(bi)[..keep]);
        }
        out
    }

    pub fn decode(&self, v: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
        Ok(Self::fit(self.tconv.infer(v)?, len))
    }

    pub fn forward(&mut self, v: &Tensor<T>, len: usize) -> Result<(Tensor<T>, DecoderCtx<T>)> {
        let (y, tconv) = self.tconv.forward(v, Mode::Train)?;
        let raw_len = y.shape()[2];
        Ok((Self::fit(y, len), DecoderCtx { tconv, raw_len }))
    }

    pub fn backward(&mut self, ctx: DecoderCtx<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g_raw = Self::fit(g.clone(), ctx.raw_len);
        self.tconv.backward(ctx.tconv, &g_raw)
    }

    /// Synthesis filters, shaped `[bases, 1, kernel]`.
    pub fn filters(&self) -> &Tensor<T> {
        &self.tconv.params()[0].value
    }
}

impl<T: Scalar> ParamStore<T> for Decoder<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.tconv.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.tconv.params_mut()
    }
}
