//! Forward and backward kernels for each [`LayerSpec`] kind.

use super::{Layer, LayerSpec, Mode, Saved, BN_EPS, BN_MOMENTUM, GLN_EPS};
use crate::error::{Error, Result};
use crate::numcore::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

struct Computed<T: Scalar> {
    y: Tensor<T>,
    saved: Saved<T>,
    /// Batch mean and unbiased variance per channel (batch norm, train mode).
    bn_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub(super) fn forward<T: Scalar>(
    layer: &mut Layer<T>,
    x: &Tensor<T>,
    mode: Mode,
    record: bool,
) -> Result<(Tensor<T>, Saved<T>)> {
    let Computed { y, saved, bn_stats } = compute(layer, x, mode, record)?;
    if let Some((mean, var)) = bn_stats {
        let m = T::of_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        let rm = &mut layer.params[2].value;
        for (r, &b) in rm.data_mut().iter_mut().zip(&mean) {
            *r = keep * *r + m * T::of_f64(b);
        }
        let rv = &mut layer.params[3].value;
        for (r, &b) in rv.data_mut().iter_mut().zip(&var) {
            *r = keep * *r + m * T::of_f64(b);
        }
    }
    y.ensure_finite(&layer.name)?;
    Ok((y, saved))
}

pub(super) fn forward_ro<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    compute(layer, x, Mode::Eval, false).map(|c| c.y)
}

fn dims3<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, channels: Option<usize>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, t] if channels.is_none_or(|want| want == c) && t > 0 && b > 0 => Ok((b, c, t)),
        _ => Err(layer.shape_error(
            match channels {
                Some(c) => format!("[batch, {c}, time]"),
                None => "[batch, channels, time]".into(),
            },
            x,
        )),
    }
}

fn saved<T: Scalar>(record: bool, tensors: Vec<Tensor<T>>, scalars: Vec<f64>) -> Saved<T> {
    if record {
        Saved {
            kind: None,
            tensors,
            scalars,
            mode: None,
        }
    } else {
        Saved::default()
    }
}

fn plain<T: Scalar>(y: Tensor<T>, saved: Saved<T>) -> Computed<T> {
    Computed {
        y,
        saved,
        bn_stats: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    tin: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    tout: usize,
    cols: &mut [T],
) {
    for c in 0..cin {
        let xc = &x[c * tin..(c + 1) * tin];
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * tout..(c * kernel + k + 1) * tout];
            let off = (k * dilation) as isize - padding as isize;
            for (t, r) in row.iter_mut().enumerate() {
                let src = (t * stride) as isize + off;
                *r = if src >= 0 && (src as usize) < tin {
                    xc[src as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    tin: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    tout: usize,
    dx: &mut [T],
) {
    for c in 0..cin {
        let dxc = &mut dx[c * tin..(c + 1) * tin];
        for k in 0..kernel {
            let row = &cols[(c * kernel + k) * tout..(c * kernel + k + 1) * tout];
            let off = (k * dilation) as isize - padding as isize;
            for (t, &r) in row.iter().enumerate() {
                let src = (t * stride) as isize + off;
                if src >= 0 && (src as usize) < tin {
                    dxc[src as usize] += r;
                }
            }
        }
    }
}

/// Valid `t` range for a shifted read `x[t + off]` of a length-`n` row.
#[inline]
fn shifted_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

fn compute<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, mode: Mode, record: bool) -> Result<Computed<T>> {
    let p = &layer.params;
    match layer.spec {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            padding,
            bias,
        } => {
            let (b, _, tin) = dims3(layer, x, Some(in_channels))?;
            let tout = layer.spec.output_len(tin).ok_or_else(|| {
                let span = dilation * (kernel - 1) + 1;
                layer.shape_error(format!("time + 2·{padding} ≥ kernel span {span}"), x)
            })?;
            let ck = in_channels * kernel;
            let mut y = Tensor::zeros([b, out_channels, tout]);
            let mut all_cols = Tensor::zeros([b, ck, tout]);
            let w = p[0].value.data();
            for bi in 0..b {
                let cols = all_cols.slab_mut(bi);
                im2col(x.slab(bi), in_channels, tin, kernel, stride, dilation, padding, tout, cols);
                let yb = y.slab_mut(bi);
                gemm_nn(out_channels, ck, tout, w, cols, yb);
                if bias {
                    add_channel_bias(yb, p[1].value.data(), tout);
                }
            }
            Ok(plain(y, saved(record, vec![all_cols], vec![tin as f64])))
        }
        LayerSpec::TransposedConv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            bias,
        } => {
            let (b, _, frames) = dims3(layer, x, Some(in_channels))?;
            let tout = (frames - 1) * stride + kernel;
            let ok = out_channels * kernel;
            let w = p[0].value.data();
            let mut y = Tensor::zeros([b, out_channels, tout]);
            let mut cols = vec![T::zero(); ok * frames];
            for bi in 0..b {
                cols.fill(T::zero());
                gemm_tn(ok, in_channels, frames, w, x.slab(bi), &mut cols);
                let yb = y.slab_mut(bi);
                for o in 0..out_channels {
                    let yo = &mut yb[o * tout..(o + 1) * tout];
                    for k in 0..kernel {
                        let row = &cols[(o * kernel + k) * frames..(o * kernel + k + 1) * frames];
                        for (f, &v) in row.iter().enumerate() {
                            yo[f * stride + k] += v;
                        }
                    }
                }
                if bias {
                    add_channel_bias(yb, p[1].value.data(), tout);
                }
            }
            Ok(plain(y, saved(record, vec![x.clone()], vec![])))
        }
        LayerSpec::DepthwiseDilatedConv1d {
            channels,
            kernel,
            dilation,
            bias,
        } => {
            let (b, _, t) = dims3(layer, x, Some(channels))?;
            let pad = dilation * (kernel - 1) / 2;
            let w = p[0].value.data();
            let mut y = Tensor::zeros([b, channels, t]);
            for bi in 0..b {
                let xb = x.slab(bi);
                let yb = y.slab_mut(bi);
                for c in 0..channels {
                    let xc = &xb[c * t..(c + 1) * t];
                    let yc = &mut yb[c * t..(c + 1) * t];
                    for k in 0..kernel {
                        let wk = w[c * kernel + k];
                        let off = (k * dilation) as isize - pad as isize;
                        let (lo, hi) = shifted_range(t, off);
                        let src = &xc[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (yv, &xv) in yc[lo..hi].iter_mut().zip(src) {
                            *yv += wk * xv;
                        }
                    }
                    if bias {
                        let bc = p[1].value.data()[c];
                        yc.iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
            Ok(plain(y, saved(record, vec![x.clone()], vec![])))
        }
        LayerSpec::PointwiseConv1d {
            in_channels,
            out_channels,
            bias,
        } => {
            let (b, _, t) = dims3(layer, x, Some(in_channels))?;
            let w = p[0].value.data();
            let mut y = Tensor::zeros([b, out_channels, t]);
            for bi in 0..b {
                let yb = y.slab_mut(bi);
                gemm_nn(out_channels, in_channels, t, w, x.slab(bi), yb);
                if bias {
                    add_channel_bias(yb, p[1].value.data(), t);
                }
            }
            Ok(plain(y, saved(record, vec![x.clone()], vec![])))
        }
        LayerSpec::Relu => {
            let y = x.map(|v| v.max(T::zero()));
            Ok(plain(y, saved(record, vec![x.clone()], vec![])))
        }
        LayerSpec::Prelu { num_parameters } => {
            let (b, c, t) = dims3(layer, x, (num_parameters > 1).then_some(num_parameters))?;
            let a = p[0].value.data();
            let mut y = x.clone();
            for bi in 0..b {
                let yb = y.slab_mut(bi);
                for ch in 0..c {
                    let ac = a[if num_parameters == 1 { 0 } else { ch }];
                    for v in &mut yb[ch * t..(ch + 1) * t] {
                        *v = v.max(T::zero()) + ac * v.min(T::zero());
                    }
                }
            }
            Ok(plain(y, saved(record, vec![x.clone()], vec![])))
        }
        LayerSpec::SoftmaxOverSources { sources } => {
            let (b, c, t) = dims3(layer, x, None)?;
            if c % sources != 0 {
                return Err(layer.shape_error(format!("[batch, k·{sources}, time]"), x));
            }
            let cell = c / sources * t;
            let mut y = Tensor::zeros(x.shape().to_vec());
            let mut buf = vec![0.0f64; sources];
            for bi in 0..b {
                let xb = x.slab(bi);
                let yb = y.slab_mut(bi);
                for j in 0..cell {
                    let mut mx = f64::NEG_INFINITY;
                    for n in 0..sources {
                        buf[n] = xb[n * cell + j].as_f64();
                        mx = mx.max(buf[n]);
                    }
                    let mut s = 0.0;
                    for v in buf.iter_mut() {
                        *v = (*v - mx).exp();
                        s += *v;
                    }
                    for n in 0..sources {
                        yb[n * cell + j] = T::of_f64(buf[n] / s);
                    }
                }
            }
            let keep = if record { vec![y.clone()] } else { vec![] };
            Ok(plain(y, saved(record, keep, vec![])))
        }
        LayerSpec::GlobalLayerNorm { channels } => {
            let (b, c, t) = dims3(layer, x, Some(channels))?;
            let gamma = p[0].value.data();
            let beta = p[1].value.data();
            let m = (c * t) as f64;
            let mut xhat = Tensor::zeros([b, c, t]);
            let mut y = Tensor::zeros([b, c, t]);
            let mut inv_stds = Vec::with_capacity(b);
            for bi in 0..b {
                let xb = x.slab(bi);
                let mean = xb.iter().map(|v| v.as_f64()).sum::<f64>() / m;
                let var = xb.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
                let inv = 1.0 / (var + GLN_EPS).sqrt();
                inv_stds.push(inv);
                let (meant, invt) = (T::of_f64(mean), T::of_f64(inv));
                let hb = xhat.slab_mut(bi);
                for (h, &v) in hb.iter_mut().zip(xb) {
                    *h = (v - meant) * invt;
                }
                affine_rows(xhat.slab(bi), gamma, beta, t, y.slab_mut(bi));
            }
            Ok(plain(y, saved(record, vec![xhat], inv_stds)))
        }
        LayerSpec::BatchNorm1d { channels } => {
            let (b, c, t) = dims3(layer, x, Some(channels))?;
            let gamma = p[0].value.data();
            let beta = p[1].value.data();
            let m = (b * t) as f64;
            let mut means = vec![0.0; c];
            let mut vars = vec![0.0; c];
            match mode {
                Mode::Train => {
                    for ch in 0..c {
                        let mut s = 0.0;
                        for bi in 0..b {
                            s += x.slab(bi)[ch * t..(ch + 1) * t].iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        means[ch] = s / m;
                        let mut v = 0.0;
                        for bi in 0..b {
                            v += x.slab(bi)[ch * t..(ch + 1) * t]
                                .iter()
                                .map(|x| (x.as_f64() - means[ch]).powi(2))
                                .sum::<f64>();
                        }
                        vars[ch] = v / m;
                    }
                }
                Mode::Eval => {
                    for ch in 0..c {
                        means[ch] = p[2].value.data()[ch].as_f64();
                        vars[ch] = p[3].value.data()[ch].as_f64();
                    }
                }
            }
            let inv: Vec<f64> = vars.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = Tensor::zeros([b, c, t]);
            let mut y = Tensor::zeros([b, c, t]);
            for bi in 0..b {
                let xb = x.slab(bi);
                let hb = xhat.slab_mut(bi);
                for ch in 0..c {
                    let (mu, iv) = (T::of_f64(means[ch]), T::of_f64(inv[ch]));
                    for tt in ch * t..(ch + 1) * t {
                        hb[tt] = (xb[tt] - mu) * iv;
                    }
                }
                affine_rows(xhat.slab(bi), gamma, beta, t, y.slab_mut(bi));
            }
            let bn_stats = (mode == Mode::Train).then(|| {
                let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                (means, vars.iter().map(|v| v * unbiased).collect())
            });
            Ok(Computed {
                y,
                saved: saved(record, vec![xhat], inv),
                bn_stats,
            })
        }
        LayerSpec::Dense {
            in_features,
            out_features,
            bias,
        } => {
            let last = *x.shape().last().unwrap_or(&0);
            if last != in_features || x.is_empty() {
                return Err(layer.shape_error(format!("[..., {in_features}]"), x));
            }
            let rows = x.len() / in_features;
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = out_features;
            let mut y = Tensor::zeros(shape);
            gemm_nt(rows, in_features, out_features, x.data(), p[0].value.data(), y.data_mut());
            if bias {
                let bv = p[1].value.data();
                for r in 0..rows {
                    for (o, v) in y.data_mut()[r * out_features..(r + 1) * out_features].iter_mut().enumerate() {
                        *v += bv[o];
                    }
                }
            }
            Ok(plain(y, saved(record, vec![x.clone()], vec![])))
        }
    }
}

/// `y[c, t] = gamma[c] · h[c, t] + beta[c]`
fn affine_rows<T: Scalar>(h: &[T], gamma: &[T], beta: &[T], t: usize, y: &mut [T]) {
    for (c, (hr, yr)) in h.chunks(t).zip(y.chunks_mut(t)).enumerate() {
        let (g, b) = (gamma[c], beta[c]);
        for (yv, &hv) in yr.iter_mut().zip(hr) {
            *yv = g * hv + b;
        }
    }
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], t: usize) {
    for (c, &bc) in bias.iter().enumerate() {
        y[c * t..(c + 1) * t].iter_mut().for_each(|v| *v += bc);
    }
}

fn accumulate_channel_bias<T: Scalar>(g: &[T], t: usize, db: &mut [T]) {
    for (c, d) in db.iter_mut().enumerate() {
        *d += g[c * t..(c + 1) * t].iter().copied().sum::<T>();
    }
}

pub(super) fn backward<T: Scalar>(layer: &mut Layer<T>, saved: Saved<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let spec = layer.spec.clone();
    let p = &mut layer.params;
    let Saved {
        mut tensors,
        scalars,
        mode,
        ..
    } = saved;
    match spec {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            padding,
            bias,
        } => {
            let cols = tensors.remove(0);
            let (b, ck, tout) = (cols.shape()[0], cols.shape()[1], cols.shape()[2]);
            let tin = scalars[0] as usize;
            if g.shape() != [b, out_channels, tout] {
                return Err(Error::shape_upstream(&layer.name, &[b, out_channels, tout], g));
            }
            let mut dx = Tensor::zeros([b, in_channels, tin]);
            let mut dcols = vec![T::zero(); ck * tout];
            for bi in 0..b {
                let gb = g.slab(bi);
                {
                    let w = &mut p[0];
                    gemm_nt(out_channels, tout, ck, gb, cols.slab(bi), w.grad.data_mut());
                    dcols.fill(T::zero());
                    gemm_tn(ck, out_channels, tout, w.value.data(), gb, &mut dcols);
                }
                if bias {
                    accumulate_channel_bias(gb, tout, p[1].grad.data_mut());
                }
                col2im(&dcols, in_channels, tin, kernel, stride, dilation, padding, tout, dx.slab_mut(bi));
            }
            Ok(dx)
        }
        LayerSpec::TransposedConv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            bias,
        } => {
            let x = tensors.remove(0);
            let (b, frames) = (x.shape()[0], x.shape()[2]);
            let tout = (frames - 1) * stride + kernel;
            if g.shape() != [b, out_channels, tout] {
                return Err(Error::shape_upstream(&layer.name, &[b, out_channels, tout], g));
            }
            let ok = out_channels * kernel;
            let mut dx = Tensor::zeros([b, in_channels, frames]);
            let mut gcols = vec![T::zero(); ok * frames];
            for bi in 0..b {
                let gb = g.slab(bi);
                for o in 0..out_channels {
                    let go = &gb[o * tout..(o + 1) * tout];
                    for k in 0..kernel {
                        let row = &mut gcols[(o * kernel + k) * frames..(o * kernel + k + 1) * frames];
                        for (f, r) in row.iter_mut().enumerate() {
                            *r = go[f * stride + k];
                        }
                    }
                }
                let w = &mut p[0];
                gemm_nn(in_channels, ok, frames, w.value.data(), &gcols, dx.slab_mut(bi));
                gemm_nt(in_channels, frames, ok, x.slab(bi), &gcols, w.grad.data_mut());
                if bias {
                    accumulate_channel_bias(gb, tout, p[1].grad.data_mut());
                }
            }
            Ok(dx)
        }
        LayerSpec::DepthwiseDilatedConv1d {
            channels,
            kernel,
            dilation,
            bias,
        } => {
            let x = tensors.remove(0);
            if g.shape() != x.shape() {
                return Err(Error::shape_upstream(&layer.name, x.shape(), g));
            }
            let (b, t) = (x.shape()[0], x.shape()[2]);
            let pad = dilation * (kernel - 1) / 2;
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for bi in 0..b {
                let (xb, gb) = (x.slab(bi), g.slab(bi));
                let dxb = dx.slab_mut(bi);
                for c in 0..channels {
                    let xc = &xb[c * t..(c + 1) * t];
                    let gc = &gb[c * t..(c + 1) * t];
                    let dxc = &mut dxb[c * t..(c + 1) * t];
                    for k in 0..kernel {
                        let off = (k * dilation) as isize - pad as isize;
                        let (lo, hi) = shifted_range(t, off);
                        let (slo, shi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                        let wk = p[0].value.data()[c * kernel + k];
                        p[0].grad.data_mut()[c * kernel + k] += crate::numcore::dot(&gc[lo..hi], &xc[slo..shi]);
                        for (d, &gv) in dxc[slo..shi].iter_mut().zip(&gc[lo..hi]) {
                            *d += wk * gv;
                        }
                    }
                }
                if bias {
                    accumulate_channel_bias(gb, t, p[1].grad.data_mut());
                }
            }
            Ok(dx)
        }
        LayerSpec::PointwiseConv1d {
            in_channels,
            out_channels,
            bias,
        } => {
            let x = tensors.remove(0);
            let (b, t) = (x.shape()[0], x.shape()[2]);
            if g.shape() != [b, out_channels, t] {
                return Err(Error::shape_upstream(&layer.name, &[b, out_channels, t], g));
            }
            let mut dx = Tensor::zeros([b, in_channels, t]);
            for bi in 0..b {
                let gb = g.slab(bi);
                let w = &mut p[0];
                gemm_nt(out_channels, t, in_channels, gb, x.slab(bi), w.grad.data_mut());
                gemm_tn(in_channels, out_channels, t, w.value.data(), gb, dx.slab_mut(bi));
                if bias {
                    accumulate_channel_bias(gb, t, p[1].grad.data_mut());
                }
            }
            Ok(dx)
        }
        LayerSpec::Relu => {
            let x = tensors.remove(0);
            check_same(&layer.name, &x, g)?;
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        LayerSpec::Prelu { num_parameters } => {
            let x = tensors.remove(0);
            check_same(&layer.name, &x, g)?;
            let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut dx = g.clone();
            for bi in 0..b {
                let (xb, gb) = (x.slab(bi), g.slab(bi));
                let dxb = dx.slab_mut(bi);
                for ch in 0..c {
                    let ai = if num_parameters == 1 { 0 } else { ch };
                    let a = p[0].value.data()[ai];
                    let mut da = T::zero();
                    let xs = &xb[ch * t..(ch + 1) * t];
                    let gs = &gb[ch * t..(ch + 1) * t];
                    for ((d, &xv), &gv) in dxb[ch * t..(ch + 1) * t].iter_mut().zip(xs).zip(gs) {
                        let slope = if xv > T::zero() { T::one() } else { a };
                        *d = slope * gv;
                        da += xv.min(T::zero()) * gv;
                    }
                    p[0].grad.data_mut()[ai] += da;
                }
            }
            Ok(dx)
        }
        LayerSpec::SoftmaxOverSources { sources } => {
            let y = tensors.remove(0);
            check_same(&layer.name, &y, g)?;
            let (b, c, t) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            let cell = c / sources * t;
            let mut dx = Tensor::zeros(y.shape().to_vec());
            for bi in 0..b {
                let (yb, gb) = (y.slab(bi), g.slab(bi));
                let dxb = dx.slab_mut(bi);
                for j in 0..cell {
                    let mut s = T::zero();
                    for n in 0..sources {
                        s += yb[n * cell + j] * gb[n * cell + j];
                    }
                    for n in 0..sources {
                        let i = n * cell + j;
                        dxb[i] = yb[i] * (gb[i] - s);
                    }
                }
            }
            Ok(dx)
        }
        LayerSpec::GlobalLayerNorm { .. } => {
            let xhat = tensors.remove(0);
            check_same(&layer.name, &xhat, g)?;
            let (b, c, t) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2]);
            let m = (c * t) as f64;
            let mut dx = Tensor::zeros(xhat.shape().to_vec());
            for bi in 0..b {
                let (hb, gb) = (xhat.slab(bi), g.slab(bi));
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for ch in 0..c {
                    let gamma = p[0].value.data()[ch];
                    let mut dg = T::zero();
                    let mut db = T::zero();
                    for tt in ch * t..(ch + 1) * t {
                        dg += gb[tt] * hb[tt];
                        db += gb[tt];
                        let dh = (gb[tt] * gamma).as_f64();
                        s1 += dh;
                        s2 += dh * hb[tt].as_f64();
                    }
                    p[0].grad.data_mut()[ch] += dg;
                    p[1].grad.data_mut()[ch] += db;
                }
                let (m1, m2, inv) = (T::of_f64(s1 / m), T::of_f64(s2 / m), T::of_f64(scalars[bi]));
                let dxb = dx.slab_mut(bi);
                for ch in 0..c {
                    let gamma = p[0].value.data()[ch];
                    for tt in ch * t..(ch + 1) * t {
                        dxb[tt] = inv * (gb[tt] * gamma - m1 - hb[tt] * m2);
                    }
                }
            }
            Ok(dx)
        }
        LayerSpec::BatchNorm1d { .. } => {
            let xhat = tensors.remove(0);
            check_same(&layer.name, &xhat, g)?;
            let (b, c, t) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2]);
            let m = (b * t) as f64;
            let mut dx = Tensor::zeros(xhat.shape().to_vec());
            for ch in 0..c {
                let gamma = p[0].value.data()[ch];
                let mut dg = T::zero();
                let mut db = T::zero();
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for bi in 0..b {
                    let (hb, gb) = (xhat.slab(bi), g.slab(bi));
                    for tt in ch * t..(ch + 1) * t {
                        dg += gb[tt] * hb[tt];
                        db += gb[tt];
                        let dh = (gb[tt] * gamma).as_f64();
                        s1 += dh;
                        s2 += dh * hb[tt].as_f64();
                    }
                }
                p[0].grad.data_mut()[ch] += dg;
                p[1].grad.data_mut()[ch] += db;
                let inv = T::of_f64(scalars[ch]);
                let train = mode == Some(Mode::Train);
                let (m1, m2) = if train {
                    (T::of_f64(s1 / m), T::of_f64(s2 / m))
                } else {
                    (T::zero(), T::zero())
                };
                for bi in 0..b {
                    let (hb, gb) = (xhat.slab(bi), g.slab(bi));
                    let dxb = dx.slab_mut(bi);
                    for tt in ch * t..(ch + 1) * t {
                        dxb[tt] = inv * (gb[tt] * gamma - m1 - hb[tt] * m2);
                    }
                }
            }
            Ok(dx)
        }
        LayerSpec::Dense {
            in_features,
            out_features,
            bias,
        } => {
            let x = tensors.remove(0);
            let rows = x.len() / in_features;
            if g.len() != rows * out_features || g.shape().last() != Some(&out_features) {
                let mut want = x.shape().to_vec();
                *want.last_mut().unwrap() = out_features;
                return Err(Error::shape_upstream(&layer.name, &want, g));
            }
            let mut dx = Tensor::zeros(x.shape().to_vec());
            let w = &mut p[0];
            gemm_nn(rows, out_features, in_features, g.data(), w.value.data(), dx.data_mut());
            gemm_tn(out_features, rows, in_features, g.data(), x.data(), w.grad.data_mut());
            if bias {
                let db = p[1].grad.data_mut();
                for r in 0..rows {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g.data()[r * out_features + o];
                    }
                }
            }
            Ok(dx)
        }
    }
}

fn check_same<T: Scalar>(name: &str, a: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if a.shape() != g.shape() {
        return Err(Error::shape_upstream(name, a.shape(), g));
    }
    Ok(())
}

impl Error {
    fn shape_upstream<T: Scalar>(layer: &str, want: &[usize], g: &Tensor<T>) -> Self {
        Error::LayerShape {
            layer: format!("{layer} (upstream gradient)"),
            expected: format!("{want:?}"),
            got: g.shape().to_vec(),
        }
    }
}
