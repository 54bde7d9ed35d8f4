use super::{OutputMode, SeparatorConfig};
use crate::autodiff::{Layer, LayerSpec, Mode, ParamStore, Parameter, Saved};
use crate::error::{Error, Result};
use crate::numcore::{RngStream, Scalar, Tensor};

#[derive(Debug, Clone)]
struct Block<T: Scalar> {
    pw_in: Layer<T>,
    prelu1: Layer<T>,
    norm1: Layer<T>,
    dw: Layer<T>,
    prelu2: Layer<T>,
    norm2: Layer<T>,
    res: Layer<T>,
    skip: Layer<T>,
}

impl<T: Scalar> Block<T> {
    fn new(prefix: &str, cfg: &SeparatorConfig, dilation: usize, rng: &mut RngStream) -> Result<Self> {
        let (b, h) = (cfg.bottleneck, cfg.block_channels);
        let pw = |name: &str, i: usize, o: usize, rng: &mut RngStream| {
            Layer::new(
                format!("{prefix}.{name}"),
                LayerSpec::PointwiseConv1d {
                    in_channels: i,
                    out_channels: o,
                    bias: true,
                },
                rng,
            )
        };
        Ok(Self {
            pw_in: pw("pw_in", b, h, rng)?,
            prelu1: Layer::new(format!("{prefix}.prelu1"), LayerSpec::Prelu { num_parameters: 1 }, rng)?,
            norm1: Layer::new(format!("{prefix}.norm1"), LayerSpec::GlobalLayerNorm { channels: h }, rng)?,
            dw: Layer::new(
                format!("{prefix}.dw"),
                LayerSpec::DepthwiseDilatedConv1d {
                    channels: h,
                    kernel: cfg.kernel,
                    dilation,
                    bias: true,
                },
                rng,
            )?,
            prelu2: Layer::new(format!("{prefix}.prelu2"), LayerSpec::Prelu { num_parameters: 1 }, rng)?,
            norm2: Layer::new(format!("{prefix}.norm2"), LayerSpec::GlobalLayerNorm { channels: h }, rng)?,
            res: pw("res", h, b, rng)?,
            skip: pw("skip", h, b, rng)?,
        })
    }

    fn layers(&self) -> [&Layer<T>; 8] {
        [
            &self.pw_in,
            &self.prelu1,
            &self.norm1,
            &self.dw,
            &self.prelu2,
            &self.norm2,
            &self.res,
            &self.skip,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Layer<T>; 8] {
        [
            &mut self.pw_in,
            &mut self.prelu1,
            &mut self.norm1,
            &mut self.dw,
            &mut self.prelu2,
            &mut self.norm2,
            &mut self.res,
            &mut self.skip,
        ]
    }

    /// Returns `(residual, skip)` and the saved contexts in chain order
    /// (the skip context last).
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>, Vec<Saved<T>>)> {
        let mut saved = Vec::with_capacity(8);
        let mut h = x.clone();
        for l in self.layers_mut().into_iter().take(6) {
            let (y, s) = l.forward(&h, mode)?;
            saved.push(s);
            h = y;
        }
        let (r, sr) = self.res.forward(&h, mode)?;
        let (k, sk) = self.skip.forward(&h, mode)?;
        saved.push(sr);
        saved.push(sk);
        Ok((r, k, saved))
    }

    fn backward(&mut self, mut saved: Vec<Saved<T>>, g_res: &Tensor<T>, g_skip: &Tensor<T>) -> Result<Tensor<T>> {
        let sk = saved.pop().expect("skip context");
        let sr = saved.pop().expect("residual context");
        let mut g = self.res.backward(sr, g_res)?;
        g.add_assign(&self.skip.backward(sk, g_skip)?)?;
        for (l, s) in self.layers_mut().into_iter().take(6).rev().zip(saved.into_iter().rev()) {
            g = l.backward(s, &g)?;
        }
        Ok(g)
    }
}

/// Time-dilated convolutional separator: global layer norm on the mixture
/// latent, a bottleneck, stacked residual blocks of dilated depthwise
/// separable convolutions with skip connections, then PReLU, batch norm and
/// a pointwise projection to `sources · bases` channels.
#[derive(Debug, Clone)]
pub struct Tdcn<T: Scalar> {
    cfg: SeparatorConfig,
    num_bases: usize,
    num_sources: usize,
    in_norm: Layer<T>,
    bottleneck: Layer<T>,
    blocks: Vec<Block<T>>,
    out_prelu: Layer<T>,
    out_bn: Layer<T>,
    out_conv: Layer<T>,
    head: Layer<T>,
}

/// Separator output; latents are `[B, sources · bases, frames]`.
#[derive(Debug, Clone)]
pub struct SepOutput<T: Scalar> {
    pub latents: Tensor<T>,
    /// Present in mask mode only; same layout as `latents`.
    pub masks: Option<Tensor<T>>,
}

impl<T: Scalar> SepOutput<T> {
    /// Splits `[B, N·K, F]` into `B` lists of `N` tensors `[K, F]`.
    pub fn split(t: &Tensor<T>, num_sources: usize) -> Vec<Vec<Tensor<T>>> {
        let (b, nk, f) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let k = nk / num_sources;
        (0..b)
            .map(|bi| {
                t.slab(bi)
                    .chunks(k * f)
                    .map(|c| Tensor::new(vec![k, f], c.to_vec()).expect("finite slab"))
                    .collect()
            })
            .collect()
    }
}

pub struct TdcnCtx<T: Scalar> {
    v_x: Tensor<T>,
    in_norm: Saved<T>,
    bottleneck: Saved<T>,
    blocks: Vec<Vec<Saved<T>>>,
    out_prelu: Saved<T>,
    out_bn: Saved<T>,
    out_conv: Saved<T>,
    head: Saved<T>,
    masks: Option<Tensor<T>>,
}

impl<T: Scalar> Tdcn<T> {
    pub fn new(cfg: SeparatorConfig, num_bases: usize, num_sources: usize, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let bn = cfg.bottleneck;
        let mut blocks = Vec::new();
        for r in 0..cfg.num_repeats {
            for b in 0..cfg.num_blocks {
                blocks.push(Block::new(&format!("separator.r{r}b{b}"), &cfg, 1 << b, rng)?);
            }
        }
        let head = match cfg.output {
            OutputMode::Latent => LayerSpec::Relu,
            OutputMode::Mask => LayerSpec::SoftmaxOverSources { sources: num_sources },
        };
        Ok(Self {
            cfg,
            num_bases,
            num_sources,
            in_norm: Layer::new(
                "separator.in_norm",
                LayerSpec::GlobalLayerNorm { channels: num_bases },
                rng,
            )?,
            bottleneck: Layer::new(
                "separator.bottleneck",
                LayerSpec::PointwiseConv1d {
                    in_channels: num_bases,
                    out_channels: bn,
                    bias: true,
                },
                rng,
            )?,
            blocks,
            out_prelu: Layer::new("separator.out_prelu", LayerSpec::Prelu { num_parameters: 1 }, rng)?,
            out_bn: Layer::new("separator.out_bn", LayerSpec::BatchNorm1d { channels: bn }, rng)?,
            out_conv: Layer::new(
                "separator.out_conv",
                LayerSpec::PointwiseConv1d {
                    in_channels: bn,
                    out_channels: num_sources * num_bases,
                    bias: true,
                },
                rng,
            )?,
            head: Layer::new("separator.head", head, rng)?,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.cfg
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    fn check(&self, v_x: &Tensor<T>) -> Result<()> {
        match *v_x.shape() {
            [_, k, f] if k == self.num_bases && f > 0 => Ok(()),
            _ => Err(Error::LayerShape {
                layer: "separator".into(),
                expected: format!("[batch, {}, frames]", self.num_bases),
                got: v_x.shape().to_vec(),
            }),
        }
    }

    fn expand(&self, v_x: &Tensor<T>) -> Tensor<T> {
        let (b, k, f) = (v_x.shape()[0], v_x.shape()[1], v_x.shape()[2]);
        let mut out = Tensor::zeros([b, self.num_sources * k, f]);
        for bi in 0..b {
            let src = v_x.slab(bi);
            for chunk in out.slab_mut(bi).chunks_mut(k * f) {
                chunk.copy_from_slice(src);
            }
        }
        out
    }

    /// Inference pass (batch norm uses running statistics).
    pub fn separate(&self, v_x: &Tensor<T>) -> Result<SepOutput<T>> {
        self.check(v_x)?;
        let mut x = self.bottleneck.infer(&self.in_norm.infer(v_x)?)?;
        let mut skip_sum = Tensor::zeros(x.shape().to_vec());
        for block in &self.blocks {
            let mut h = x.clone();
            for l in block.layers().into_iter().take(6) {
                h = l.infer(&h)?;
            }
            x.add_assign(&block.res.infer(&h)?)?;
            skip_sum.add_assign(&block.skip.infer(&h)?)?;
        }
        let z = self
            .out_conv
            .infer(&self.out_bn.infer(&self.out_prelu.infer(&skip_sum)?)?)?;
        let y = self.head.infer(&z)?;
        Ok(match self.cfg.output {
            OutputMode::Latent => SepOutput { latents: y, masks: None },
            OutputMode::Mask => SepOutput {
                latents: y.mul(&self.expand(v_x))?,
                masks: Some(y),
            },
        })
    }

    /// Training pass recording every context.
    pub fn forward(&mut self, v_x: &Tensor<T>) -> Result<(SepOutput<T>, TdcnCtx<T>)> {
        self.check(v_x)?;
        let mode = Mode::Train;
        let (n, in_norm) = self.in_norm.forward(v_x, mode)?;
        let (mut x, bottleneck) = self.bottleneck.forward(&n, mode)?;
        let mut skip_sum = Tensor::zeros(x.shape().to_vec());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (r, s, saved) = block.forward(&x, mode)?;
            x.add_assign(&r)?;
            skip_sum.add_assign(&s)?;
            blocks.push(saved);
        }
        let (p, out_prelu) = self.out_prelu.forward(&skip_sum, mode)?;
        let (q, out_bn) = self.out_bn.forward(&p, mode)?;
        let (z, out_conv) = self.out_conv.forward(&q, mode)?;
        let (y, head) = self.head.forward(&z, mode)?;
        let (out, masks) = match self.cfg.output {
            OutputMode::Latent => (SepOutput { latents: y, masks: None }, None),
            OutputMode::Mask => (
                SepOutput {
                    latents: y.mul(&self.expand(v_x))?,
                    masks: Some(y.clone()),
                },
                Some(y),
            ),
        };
        Ok((
            out,
            TdcnCtx {
                v_x: v_x.clone(),
                in_norm,
                bottleneck,
                blocks,
                out_prelu,
                out_bn,
                out_conv,
                head,
                masks,
            },
        ))
    }

    /// Backward from gradients on the latent estimates and, in mask mode,
    /// on the masks. Returns the gradient with respect to the mixture latent.
    pub fn backward(
        &mut self,
        ctx: TdcnCtx<T>,
        g_latents: Option<&Tensor<T>>,
        g_masks: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let shape = [ctx.v_x.shape()[0], self.num_sources * self.num_bases, ctx.v_x.shape()[2]];
        let mut g_vx = Tensor::zeros(ctx.v_x.shape().to_vec());
        let g_y = match (&ctx.masks, self.cfg.output) {
            (Some(m), OutputMode::Mask) => {
                let mut g_y = match g_masks {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(shape),
                };
                if let Some(g) = g_latents {
                    let expanded = self.expand(&ctx.v_x);
                    g_y.add_assign(&g.mul(&expanded)?)?;
                    let gm = g.mul(m)?;
                    let (b, k, f) = (ctx.v_x.shape()[0], ctx.v_x.shape()[1], ctx.v_x.shape()[2]);
                    for bi in 0..b {
                        let dst = g_vx.slab_mut(bi);
                        for chunk in gm.slab(bi).chunks(k * f) {
                            for (d, &s) in dst.iter_mut().zip(chunk) {
                                *d += s;
                            }
                        }
                    }
                }
                g_y
            }
            _ => {
                if g_masks.is_some() {
                    return Err(Error::Usage("mask gradient given to a latent-mode separator".into()));
                }
                g_latents
                    .cloned()
                    .ok_or_else(|| Error::Usage("separator backward needs a latent gradient".into()))?
            }
        };
        let g = self.head.backward(ctx.head, &g_y)?;
        let g = self.out_conv.backward(ctx.out_conv, &g)?;
        let g = self.out_bn.backward(ctx.out_bn, &g)?;
        let g_skip = self.out_prelu.backward(ctx.out_prelu, &g)?;
        let mut g_x = Tensor::zeros(g_skip.shape().to_vec());
        for (block, saved) in self.blocks.iter_mut().zip(ctx.blocks).rev() {
            let g_in = block.backward(saved, &g_x, &g_skip)?;
            g_x.add_assign(&g_in)?;
        }
        let g = self.bottleneck.backward(ctx.bottleneck, &g_x)?;
        let g = self.in_norm.backward(ctx.in_norm, &g)?;
        g_vx.add_assign(&g)?;
        Ok(g_vx)
    }

    fn all_layers(&self) -> Vec<&Layer<T>> {
        let mut v = vec![&self.in_norm, &self.bottleneck];
        for b in &self.blocks {
            v.extend(b.layers());
        }
        v.extend([&self.out_prelu, &self.out_bn, &self.out_conv]);
        v
    }

    fn all_layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        let mut v = vec![&mut self.in_norm, &mut self.bottleneck];
        for b in &mut self.blocks {
            v.extend(b.layers_mut());
        }
        v.extend([&mut self.out_prelu, &mut self.out_bn, &mut self.out_conv]);
        v
    }
}

impl<T: Scalar> ParamStore<T> for Tdcn<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.all_layers().into_iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.all_layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }
}
