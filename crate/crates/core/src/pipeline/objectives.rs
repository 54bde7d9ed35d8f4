//! Per-batch losses with hand-chained backward passes.
//!
//! Each objective runs the forward pass, returns the batch-mean loss and,
//! when asked, accumulates parameter gradients into the system. They are
//! the exact functions the training loops optimize, so gradient checks of
//! these functions certify the training gradients.

use crate::autodiff::{Layer, LayerSpec, Mode};
use crate::data::MixtureExample;
use crate::error::{Error, Result};
use crate::losses::{latent_si_sdr_loss, mask_si_sdr_loss, pit_loss, pit_si_sdr};
use crate::models::{OutputMode, System};
use crate::numcore::{RngStream, Scalar, Tensor};

/// Mixtures `[B, 1, L]` and their sources `[B·N, 1, L]` (example-major).
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub mixtures: Tensor<T>,
    pub sources: Tensor<T>,
    pub num_sources: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn new(examples: &[&MixtureExample]) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let n = first.sources.len();
        if examples.iter().any(|e| e.sources.len() != n) {
            return Err(Error::Invalid("examples in a batch must have equally many sources".into()));
        }
        let mixtures = System::<T>::batch(&examples.iter().map(|e| &e.mixture).collect::<Vec<_>>())?;
        let sources = System::<T>::batch(&examples.iter().flat_map(|e| e.sources.iter()).collect::<Vec<_>>())?;
        Ok(Self {
            mixtures,
            sources,
            num_sources: n,
        })
    }

    pub fn size(&self) -> usize {
        self.mixtures.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.mixtures.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.size() == 0
    }
}

/// Batch means reported by an objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    /// PIT SI-SDR of latent estimates against oracle latent targets (dB).
    pub latent_si_sdr: Option<f64>,
    /// PIT SI-SDR of decoded estimates against the true sources (dB).
    pub time_si_sdr: Option<f64>,
}

fn softmax_layer<T: Scalar>(n: usize) -> Result<Layer<T>> {
    Layer::new("oracle.softmax", LayerSpec::SoftmaxOverSources { sources: n }, &mut RngStream::new(0))
}

/// `[B, K, F]` repeated `n` times along channels: `[B, n·K, F]`.
fn expand<T: Scalar>(v: &Tensor<T>, n: usize) -> Tensor<T> {
    let (b, k, f) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut out = Tensor::zeros([b, n * k, f]);
    for bi in 0..b {
        for chunk in out.slab_mut(bi).chunks_mut(k * f) {
            chunk.copy_from_slice(v.slab(bi));
        }
    }
    out
}

/// Sums the `n` channel groups of `[B, n·K, F]` into `[B, K, F]`.
fn fold_sources<T: Scalar>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let (b, c, f) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let k = c / n;
    let mut out = Tensor::zeros([b, k, f]);
    for bi in 0..b {
        let dst = out.slab_mut(bi);
        for chunk in g.slab(bi).chunks(k * f) {
            for (d, &s) in dst.iter_mut().zip(chunk) {
                *d += s;
            }
        }
    }
    out
}

/// Stacks two batches along the batch axis.
fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn split_at<T: Scalar>(t: &Tensor<T>, rows: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let per = t.len() / t.shape()[0];
    let mut s1 = t.shape().to_vec();
    let mut s2 = t.shape().to_vec();
    s1[0] = rows;
    s2[0] -= rows;
    Ok((
        Tensor::new(s1, t.data()[..rows * per].to_vec())?,
        Tensor::new(s2, t.data()[rows * per..].to_vec())?,
    ))
}

/// Mean time-domain PIT loss over a batch of `[B·N, 1, L]` estimates, with
/// the gradient laid out like the estimates.
fn time_pit<T: Scalar>(sources: &Tensor<T>, estimates: &Tensor<T>, n: usize) -> Result<(f64, Tensor<T>)> {
    let b = sources.shape()[0] / n;
    let mut g = Tensor::zeros(estimates.shape().to_vec());
    let mut total = 0.0;
    for bi in 0..b {
        let t: Vec<&[T]> = (0..n).map(|i| sources.slab(bi * n + i)).collect();
        let e: Vec<&[T]> = (0..n).map(|i| estimates.slab(bi * n + i)).collect();
        let pl = pit_loss(&t, &e)?;
        total += pl.loss;
        for (i, gi) in pl.grads.iter().enumerate() {
            for (d, &v) in g.slab_mut(bi * n + i).iter_mut().zip(gi) {
                *d = T::of_f64(v / b as f64);
            }
        }
    }
    Ok((total / b as f64, g))
}

/// Splits `[B, n·K, F]` into per-example lists of `[K, F]` tensors.
fn per_source<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Vec<Vec<Tensor<T>>>> {
    let (b, c, f) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let k = c / n;
    (0..b)
        .map(|bi| {
            t.slab(bi)
                .chunks(k * f)
                .map(|chunk| Tensor::new([k, f], chunk.to_vec()))
                .collect()
        })
        .collect()
}

/// Step 1: `−PIT-SI-SDR(s, D(softmax(E(s)) ⊙ E(x)))`, trained through both
/// the mixture latent and the masks.
pub fn step1_objective<T: Scalar>(sys: &mut System<T>, batch: &Batch<T>, with_grad: bool) -> Result<StepStats> {
    let (b, n, len) = (batch.size(), batch.num_sources, batch.len());
    let x_all = concat(&batch.mixtures, &batch.sources)?;
    let (v_all, ctx_e) = sys.encoder.forward(&x_all)?;
    let (v_x, v_s) = split_at(&v_all, b)?;
    let (k, f) = (v_x.shape()[1], v_x.shape()[2]);
    let v_s = v_s.reshape([b, n * k, f])?;
    let mut softmax = softmax_layer::<T>(n)?;
    let (masks, ctx_m) = softmax.forward(&v_s, Mode::Train)?;
    let v_x_n = expand(&v_x, n);
    let est = masks.mul(&v_x_n)?.reshape([b * n, k, f])?;
    let (y, ctx_d) = sys.decoder.forward(&est, len)?;
    let (loss, g_y) = time_pit(&batch.sources, &y, n)?;
    if with_grad {
        let g_est = sys.decoder.backward(ctx_d, &g_y)?.reshape([b, n * k, f])?;
        let g_vx = fold_sources(&g_est.mul(&masks)?, n);
        let g_vs = softmax.backward(ctx_m, &g_est.mul(&v_x_n)?)?;
        let g_all = concat(&g_vx, &g_vs.reshape([b * n, k, f])?)?;
        sys.encoder.backward(ctx_e, &g_all)?;
    }
    Ok(StepStats {
        loss,
        latent_si_sdr: None,
        time_si_sdr: Some(-loss),
    })
}

/// Oracle latent targets `[B, N·K, F]` and masks from the (frozen) encoder.
pub fn latent_targets<T: Scalar>(sys: &System<T>, batch: &Batch<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, n) = (batch.size(), batch.num_sources);
    let v_x = sys.encoder.encode(&batch.mixtures)?;
    let v_s = sys.encoder.encode(&batch.sources)?;
    let (k, f) = (v_x.shape()[1], v_x.shape()[2]);
    let masks = softmax_layer::<T>(n)?.infer(&v_s.reshape([b, n * k, f])?)?;
    let targets = masks.mul(&expand(&v_x, n))?;
    Ok((v_x, targets, masks))
}

fn mean_pit_si_sdr<T: Scalar>(targets: &[Vec<Tensor<T>>], estimates: &[Vec<Tensor<T>>]) -> Result<f64> {
    let mut total = 0.0;
    for (t, e) in targets.iter().zip(estimates) {
        let tr: Vec<&[T]> = t.iter().map(|x| x.data()).collect();
        let er: Vec<&[T]> = e.iter().map(|x| x.data()).collect();
        total += pit_si_sdr(&tr, &er)?.mean_value;
    }
    Ok(total / targets.len() as f64)
}

/// Step 2: separator-only training against latent targets (latent mode)
/// or oracle masks (mask mode). The encoder and decoder are only run in
/// inference mode.
pub fn step2_objective<T: Scalar>(sys: &mut System<T>, batch: &Batch<T>, with_grad: bool) -> Result<StepStats> {
    let (b, n, len) = (batch.size(), batch.num_sources, batch.len());
    let (v_x, targets, target_masks) = latent_targets(sys, batch)?;
    let (k, f) = (v_x.shape()[1], v_x.shape()[2]);
    let sep = sys
        .separator
        .as_mut()
        .ok_or_else(|| Error::Usage("Step-2 training needs a separator".into()))?;
    let mode = sep.config().output;
    let (out, ctx) = sep.forward(&v_x)?;
    let t_lat = per_source(&targets, n)?;
    let e_lat = per_source(&out.latents, n)?;
    let mut loss = 0.0;
    let mut g = Tensor::<T>::zeros(out.latents.shape().to_vec());
    let (t_loss, e_loss) = match (mode, &out.masks) {
        (OutputMode::Mask, Some(m)) => (per_source(&target_masks, n)?, per_source(m, n)?),
        _ => (t_lat.clone(), e_lat.clone()),
    };
    for bi in 0..b {
        let pl = match mode {
            OutputMode::Latent => latent_si_sdr_loss(&t_loss[bi], &e_loss[bi])?,
            OutputMode::Mask => mask_si_sdr_loss(&t_loss[bi], &e_loss[bi])?,
        };
        loss += pl.loss / b as f64;
        let dst = g.slab_mut(bi);
        for (chunk, gi) in dst.chunks_mut(k * f).zip(&pl.grads) {
            for (d, &v) in chunk.iter_mut().zip(gi) {
                *d = T::of_f64(v / b as f64);
            }
        }
    }
    let latent_si_sdr = mean_pit_si_sdr(&t_lat, &e_lat)?;
    let decoded = sys.decoder.decode(&out.latents.clone().reshape([b * n, k, f])?, len)?;
    let (time_loss, _) = time_pit(&batch.sources, &decoded, n)?;
    if with_grad {
        let sep = sys.separator.as_mut().expect("checked above");
        match mode {
            OutputMode::Latent => sep.backward(ctx, Some(&g), None)?,
            OutputMode::Mask => sep.backward(ctx, None, Some(&g))?,
        };
    }
    Ok(StepStats {
        loss,
        latent_si_sdr: Some(latent_si_sdr),
        time_si_sdr: Some(-time_loss),
    })
}

/// End-to-end: `−PIT-SI-SDR(s, D(S(E(x))))` through all three modules.
pub fn e2e_objective<T: Scalar>(sys: &mut System<T>, batch: &Batch<T>, with_grad: bool) -> Result<StepStats> {
    let (b, n, len) = (batch.size(), batch.num_sources, batch.len());
    let (v_x, ctx_e) = sys.encoder.forward(&batch.mixtures)?;
    let (k, f) = (v_x.shape()[1], v_x.shape()[2]);
    let sep = sys
        .separator
        .as_mut()
        .ok_or_else(|| Error::Usage("end-to-end training needs a separator".into()))?;
    let (out, ctx_s) = sep.forward(&v_x)?;
    let (y, ctx_d) = sys.decoder.forward(&out.latents.reshape([b * n, k, f])?, len)?;
    let (loss, g_y) = time_pit(&batch.sources, &y, n)?;
    if with_grad {
        let g_lat = sys.decoder.backward(ctx_d, &g_y)?.reshape([b, n * k, f])?;
        let sep = sys.separator.as_mut().expect("checked above");
        let g_vx = sep.backward(ctx_s, Some(&g_lat), None)?;
        sys.encoder.backward(ctx_e, &g_vx)?;
    }
    Ok(StepStats {
        loss,
        latent_si_sdr: None,
        time_si_sdr: Some(-loss),
    })
}
