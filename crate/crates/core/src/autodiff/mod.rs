//! Layer-level reverse-mode differentiation.
//!
//! Each [`Layer`] runs a forward pass that returns its output together with
//! a [`Saved`] context; handing that context and the upstream gradient to
//! [`Layer::backward`] returns the input gradient and *accumulates* into the
//! layer's parameter gradients. Composite models chain these calls by hand.
//!
//! Activations are laid out `[batch, channels, time]`, except [`LayerSpec::Dense`]
//! which maps the last axis.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Scalar, Tensor};

pub use adam::{clip_grad_norm, AdamSlot, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, GRAD_CLIP_NORM};
pub use checkpoint::{
    Checkpoint, CheckpointManifest, Coverage, OptimizerEntry, TensorEntry, CHECKPOINT_FORMAT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};

pub const GLN_EPS: f64 = 1e-8;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A named tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns parameters.
pub trait ParamStore<T: Scalar> {
    fn params(&self) -> Vec<&Parameter<T>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            // Normalization running statistics are never optimizer-owned.
            if !p.name.ends_with(".running_mean") && !p.name.ends_with(".running_var") {
                p.trainable = trainable;
            }
        }
    }

    fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Layer kinds and their hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        bias: bool,
    },
    TransposedConv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    /// Per-channel dilated convolution with "same" zero padding; odd kernel.
    DepthwiseDilatedConv1d {
        channels: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    },
    PointwiseConv1d {
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    },
    Relu,
    /// `num_parameters` is 1 (shared slope) or the channel count.
    Prelu { num_parameters: usize },
    /// Softmax across `sources` groups of equal channel count.
    SoftmaxOverSources { sources: usize },
    /// Normalizes each example over channels × time.
    GlobalLayerNorm { channels: usize },
    /// Normalizes each channel over batch × time.
    BatchNorm1d { channels: usize },
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("{self:?}: {what}")));
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                dilation,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("channel counts must be positive");
                }
                if kernel == 0 || stride == 0 || dilation == 0 {
                    return bad("kernel, stride and dilation must be ≥ 1");
                }
            }
            LayerSpec::TransposedConv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("channel counts must be positive");
                }
                if kernel == 0 || stride == 0 {
                    return bad("kernel and stride must be ≥ 1");
                }
            }
            LayerSpec::DepthwiseDilatedConv1d {
                channels,
                kernel,
                dilation,
                ..
            } => {
                if channels == 0 || kernel == 0 || dilation == 0 {
                    return bad("channels, kernel and dilation must be ≥ 1");
                }
                if kernel % 2 == 0 {
                    return bad("same padding needs an odd kernel");
                }
            }
            LayerSpec::PointwiseConv1d {
                in_channels,
                out_channels,
                ..
            }
            | LayerSpec::Dense {
                in_features: in_channels,
                out_features: out_channels,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("channel counts must be positive");
                }
            }
            LayerSpec::Relu => {}
            LayerSpec::Prelu { num_parameters } => {
                if num_parameters == 0 {
                    return bad("num_parameters must be ≥ 1");
                }
            }
            LayerSpec::SoftmaxOverSources { sources } => {
                if sources == 0 {
                    return bad("sources must be ≥ 1");
                }
            }
            LayerSpec::GlobalLayerNorm { channels } | LayerSpec::BatchNorm1d { channels } => {
                if channels == 0 {
                    return bad("channels must be ≥ 1");
                }
            }
        }
        Ok(())
    }

    /// Output length along time for an input of `t` samples.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        match *self {
            LayerSpec::Conv1d {
                kernel,
                stride,
                dilation,
                padding,
                ..
            } => {
                let span = dilation * (kernel - 1) + 1;
                (t + 2 * padding)
                    .checked_sub(span)
                    .map(|r| r / stride + 1)
            }
            LayerSpec::TransposedConv1d { kernel, stride, .. } => {
                (t >= 1).then(|| (t - 1) * stride + kernel)
            }
            _ => Some(t),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::TransposedConv1d { .. } => "transposed_conv1d",
            LayerSpec::DepthwiseDilatedConv1d { .. } => "depthwise_dilated_conv1d",
            LayerSpec::PointwiseConv1d { .. } => "pointwise_conv1d",
            LayerSpec::Relu => "relu",
            LayerSpec::Prelu { .. } => "prelu",
            LayerSpec::SoftmaxOverSources { .. } => "softmax_over_sources",
            LayerSpec::GlobalLayerNorm { .. } => "global_layer_norm",
            LayerSpec::BatchNorm1d { .. } => "batch_norm_1d",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Context a layer needs to run its backward pass.
#[derive(Debug, Default)]
pub struct Saved<T: Scalar> {
    kind: Option<&'static str>,
    tensors: Vec<Tensor<T>>,
    scalars: Vec<f64>,
    mode: Option<Mode>,
}

impl<T: Scalar> Saved<T> {
    pub fn is_empty(&self) -> bool {
        self.kind.is_none()
    }
}

/// One differentiable layer with its parameters.
#[derive(Debug, Clone)]
pub struct Layer<T: Scalar> {
    name: String,
    spec: LayerSpec,
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Builds a layer with Kaiming-uniform weights, zero biases, unit
    /// norm gains and PReLU slopes of 0.25.
    pub fn new(name: impl Into<String>, spec: LayerSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let mut params = Vec::new();
        let kaiming = |shape: Vec<usize>, fan_in: usize, rng: &mut RngStream| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::of_f64(rng.uniform_range(-bound, bound)))
        };
        match spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let w = kaiming(vec![out_channels, in_channels, kernel], in_channels * kernel, rng);
                params.push(Parameter::new(format!("{name}.weight"), w));
                if bias {
                    params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros([out_channels])));
                }
            }
            LayerSpec::TransposedConv1d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let w = kaiming(vec![in_channels, out_channels, kernel], in_channels * kernel, rng);
                params.push(Parameter::new(format!("{name}.weight"), w));
                if bias {
                    params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros([out_channels])));
                }
            }
            LayerSpec::DepthwiseDilatedConv1d {
                channels,
                kernel,
                bias,
                ..
            } => {
                let w = kaiming(vec![channels, kernel], kernel, rng);
                params.push(Parameter::new(format!("{name}.weight"), w));
                if bias {
                    params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros([channels])));
                }
            }
            LayerSpec::PointwiseConv1d {
                in_channels,
                out_channels,
                bias,
            }
            | LayerSpec::Dense {
                in_features: in_channels,
                out_features: out_channels,
                bias,
            } => {
                let w = kaiming(vec![out_channels, in_channels], in_channels, rng);
                params.push(Parameter::new(format!("{name}.weight"), w));
                if bias {
                    params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros([out_channels])));
                }
            }
            LayerSpec::Relu | LayerSpec::SoftmaxOverSources { .. } => {}
            LayerSpec::Prelu { num_parameters } => {
                params.push(Parameter::new(
                    format!("{name}.alpha"),
                    Tensor::full([num_parameters], T::of_f64(0.25)),
                ));
            }
            LayerSpec::GlobalLayerNorm { channels } => {
                params.push(Parameter::new(format!("{name}.gamma"), Tensor::full([channels], T::one())));
                params.push(Parameter::new(format!("{name}.beta"), Tensor::zeros([channels])));
            }
            LayerSpec::BatchNorm1d { channels } => {
                params.push(Parameter::new(format!("{name}.gamma"), Tensor::full([channels], T::one())));
                params.push(Parameter::new(format!("{name}.beta"), Tensor::zeros([channels])));
                params.push(Parameter::frozen(format!("{name}.running_mean"), Tensor::zeros([channels])));
                params.push(Parameter::frozen(
                    format!("{name}.running_var"),
                    Tensor::full([channels], T::one()),
                ));
            }
        }
        Ok(Self { name, spec, params })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn param(&self, suffix: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name.ends_with(suffix))
    }

    pub fn param_mut(&mut self, suffix: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name.ends_with(suffix))
    }

    /// Forward pass recording the context for [`Layer::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Saved<T>)> {
        let (y, mut saved) = layers::forward(self, x, mode, true)?;
        saved.kind = Some(self.spec.kind_name());
        saved.mode = Some(mode);
        Ok((y, saved))
    }

    /// Evaluation-mode forward pass without recording; `&self` so a frozen
    /// layer can serve concurrent callers.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layers::forward_ro(self, x)
    }

    /// Backward pass: returns the input gradient and accumulates parameter
    /// gradients.
    pub fn backward(&mut self, saved: Saved<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        match saved.kind {
            None => Err(Error::Usage(format!(
                "backward on layer `{}` without a recorded forward pass",
                self.name
            ))),
            Some(k) if k != self.spec.kind_name() => Err(Error::Usage(format!(
                "layer `{}` ({}) got a context recorded by a {k} layer",
                self.name,
                self.spec.kind_name()
            ))),
            Some(_) => layers::backward(self, saved, upstream),
        }
    }

    pub(crate) fn shape_error(&self, expected: String, got: &Tensor<T>) -> Error {
        Error::LayerShape {
            layer: self.name.clone(),
            expected,
            got: got.shape().to_vec(),
        }
    }
}

impl<T: Scalar> ParamStore<T> for Layer<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params.iter_mut().collect()
    }
}
