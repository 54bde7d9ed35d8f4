//! Numeric certification of the latent-to-time SI-SDR bound.
//!
//! A bias-free transposed-convolution decoder is a linear map `D(v) = Pv`
//! from flattened latents to samples. With `A = P†` and unit vectors
//! `y, ŷ`, the inequality
//!
//! ```text
//! (ŷᵀAᵀAy)² ≤ g(A) + (ŷᵀy)²,   g(A) = ‖AᵀA − I‖² + 2‖AᵀA − I‖
//! ```
//!
//! holds for the spectral norm. This module materializes `P`, evaluates
//! `g`, and checks the inequality on random matrices and on latents of a
//! trained autoencoder.

use serde::Serialize;

use crate::data::MixtureExample;
use crate::error::{Error, Result};
use crate::losses::{pit_si_sdr, si_sdr};
use crate::models::{apply_mask, oracle_masks, Decoder, System};
use crate::numcore::{dot, frobenius_norm, gemm_nn, gemm_tn, pseudo_inverse, spectral_norm, RngStream, Tensor};

/// Largest `T` or `K` accepted by [`materialize_decoder`].
pub const THEORY_MAX_DIM: usize = 4096;
/// A bound counts as violated when `rhs − lhs` falls below `−VIOLATION_TOL`.
pub const VIOLATION_TOL: f64 = 1e-9;
/// Vectors with a norm below this are skipped by the latent-bound check.
pub const DEGENERATE_NORM: f64 = 1e-12;

const MATERIALIZE_BATCH: usize = 64;

/// Matrix norm used inside `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GNorm {
    Spectral,
    Frobenius,
}

/// Decoder as a dense `[len, bases·frames]` matrix. Column `k·frames + f`
/// is the decoded one-hot latent at basis `k`, frame `f`.
pub fn materialize_decoder(decoder: &Decoder<f64>, frames: usize, len: usize) -> Result<Tensor<f64>> {
    let bases = decoder.config().num_bases;
    let k = bases * frames;
    if frames == 0 || len == 0 {
        return Err(Error::Invalid("materialize_decoder: frames and len must be positive".into()));
    }
    if k > THEORY_MAX_DIM || len > THEORY_MAX_DIM {
        return Err(Error::Invalid(format!(
            "materialize_decoder: {len}x{k} exceeds the {THEORY_MAX_DIM} dense size cap"
        )));
    }
    let mut p = Tensor::<f64>::zeros([len, k]);
    for start in (0..k).step_by(MATERIALIZE_BATCH) {
        let end = (start + MATERIALIZE_BATCH).min(k);
        let mut v = Tensor::<f64>::zeros([end - start, bases, frames]);
        for j in start..end {
            v.slab_mut(j - start)[j] = 1.0;
        }
        let y = decoder.decode(&v, len)?;
        for j in start..end {
            for (t, &val) in y.slab(j - start).iter().enumerate() {
                p.set2(t, j, val);
            }
        }
    }
    Ok(p)
}

/// `AᵀA − I`.
pub fn gram_deviation(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = a.dims2()?;
    a.ensure_finite("g(A) input")?;
    let mut m = Tensor::zeros([d, d]);
    gemm_tn(d, n, d, a.data(), a.data(), m.data_mut());
    for i in 0..d {
        let v = m.at2(i, i) - 1.0;
        m.set2(i, i, v);
    }
    Ok(m)
}

/// `g(A) = ‖AᵀA − I‖² + 2‖AᵀA − I‖` with the spectral norm.
pub fn g_of(a: &Tensor<f64>) -> Result<f64> {
    g_with(a, GNorm::Spectral)
}

/// `g` with the Frobenius norm; never smaller than [`g_of`].
pub fn g_of_frobenius(a: &Tensor<f64>) -> Result<f64> {
    g_with(a, GNorm::Frobenius)
}

pub fn g_with(a: &Tensor<f64>, norm: GNorm) -> Result<f64> {
    let m = gram_deviation(a)?;
    let n = match norm {
        GNorm::Spectral => spectral_norm(&m)?,
        GNorm::Frobenius => frobenius_norm(&m),
    };
    Ok(n * n + 2.0 * n)
}

/// One evaluation of `lhs ≤ g + inner²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub g_value: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub violated: bool,
}

impl BoundReport {
    /// `inner_sq` is the squared time-domain (or untransformed) inner
    /// product.
    pub fn new(g_value: f64, lhs: f64, inner_sq: f64) -> Self {
        let rhs = g_value + inner_sq;
        let slack = rhs - lhs;
        Self {
            g_value,
            lhs,
            rhs,
            slack,
            violated: slack < -VIOLATION_TOL,
        }
    }
}

/// Aggregate of a list of bound reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundSummary {
    pub trials: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub max_lhs: f64,
}

impl BoundSummary {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a BoundReport>) -> Self {
        let mut s = Self {
            trials: 0,
            violations: 0,
            min_slack: f64::INFINITY,
            max_lhs: f64::NEG_INFINITY,
        };
        for r in reports {
            s.trials += 1;
            s.violations += r.violated as usize;
            s.min_slack = s.min_slack.min(r.slack);
            s.max_lhs = s.max_lhs.max(r.lhs);
        }
        s
    }
}

fn matvec(a: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let mut y = vec![0.0; n];
    gemm_nn(n, d, 1, a.data(), x, &mut y);
    y
}

fn unit(x: &[f64]) -> Option<Vec<f64>> {
    let n = dot(x, x).sqrt();
    (n > DEGENERATE_NORM && n.is_finite()).then(|| x.iter().map(|v| v / n).collect())
}

/// `(ŷᵀAᵀAy)²` against `g(A) + (ŷᵀy)²` for given unit vectors.
pub fn prop1_report(a: &Tensor<f64>, g_value: f64, y: &[f64], y_hat: &[f64]) -> BoundReport {
    let (ay, ayh) = (matvec(a, y), matvec(a, y_hat));
    let lhs = dot(&ayh, &ay).powi(2);
    BoundReport::new(g_value, lhs, dot(y_hat, y).powi(2))
}

/// Random unit pairs `(y, ŷ)`. Even trials draw them independently, odd
/// trials draw `ŷ` as a perturbation of `y` so that `ŷᵀy` spans `[0, 1]`.
pub fn check_prop1(a: &Tensor<f64>, trials: usize, rng: &mut RngStream) -> Result<Vec<BoundReport>> {
    check_prop1_with(a, GNorm::Spectral, trials, rng)
}

pub fn check_prop1_with(a: &Tensor<f64>, norm: GNorm, trials: usize, rng: &mut RngStream) -> Result<Vec<BoundReport>> {
    let (_, d) = a.dims2()?;
    let g = g_with(a, norm)?;
    Ok((0..trials)
        .map(|t| {
            let y = rng.unit_vector(d);
            let y_hat = if t % 2 == 0 {
                rng.unit_vector(d)
            } else {
                let scale = 10f64.powf(rng.uniform_range(-4.0, 1.0));
                let z = rng.unit_vector(d);
                let mixed: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a + scale * b).collect();
                unit(&mixed).unwrap_or(z)
            };
            prop1_report(a, g, &y, &y_hat)
        })
        .collect())
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Indices of the best candidate by SI-SDR and by squared inner product
/// with a unit target.
pub fn prop2_argmaxes(target: &[f64], candidates: &[Vec<f64>]) -> Result<(usize, usize)> {
    let by_sdr = candidates.iter().map(|c| si_sdr(target, c)).collect::<Result<Vec<_>>>()?;
    let by_inner: Vec<f64> = candidates.iter().map(|c| dot(c, target).powi(2)).collect();
    Ok((argmax(&by_sdr), argmax(&by_inner)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop2Report {
    pub trials: usize,
    pub agreements: usize,
    pub disagreeing_trials: Vec<usize>,
}

/// `trials` random unit targets in `R^dim`, each against `candidates`
/// unit vectors.
pub fn check_prop2(dim: usize, candidates: usize, trials: usize, rng: &mut RngStream) -> Result<Prop2Report> {
    let mut report = Prop2Report {
        trials,
        agreements: 0,
        disagreeing_trials: Vec::new(),
    };
    for t in 0..trials {
        let target = rng.unit_vector(dim);
        let cands: Vec<Vec<f64>> = (0..candidates)
            .map(|_| {
                let scale = 10f64.powf(rng.uniform_range(-2.0, 1.0));
                let z = rng.unit_vector(dim);
                let mixed: Vec<f64> = target.iter().zip(&z).map(|(a, b)| a + scale * b).collect();
                unit(&mixed).unwrap_or(z)
            })
            .collect();
        let (a, b) = prop2_argmaxes(&target, &cands)?;
        if a == b {
            report.agreements += 1;
        } else {
            report.disagreeing_trials.push(t);
        }
    }
    Ok(report)
}

/// Where latent estimates come from in [`check_latent_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentEstimator {
    /// `v̂ = v + σ‖v‖z/√K` with Gaussian `z` and `σ` log-uniform in
    /// `[min_rel, max_rel]`, `trials` draws per source.
    Perturb { min_rel: f64, max_rel: f64, trials: usize },
    /// The system's separator, aligned to the targets by latent PIT.
    Separator,
}

/// One latent estimate checked two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatentTrial {
    pub example: usize,
    pub source: usize,
    /// `(v̂ᵀv)²` against `g(P†) + (ŝᵀs̃)²`, every vector unit-normalized.
    pub normalized: BoundReport,
    /// The inequality with `A = P†`, `y = s̃/‖s̃‖`, `ŷ = ŝ/‖ŝ‖`: the left
    /// side is the correlation of the latents' projections onto the row
    /// space of `P`, measured in time-normalized units.
    pub projected: BoundReport,
    /// SI-SDR of `v̂` against `v`, in dB.
    pub latent_si_sdr: f64,
    /// SI-SDR of `ŝ = Pv̂` against the true source, in dB.
    pub time_si_sdr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentBoundReport {
    pub samples: usize,
    pub latent_dim: usize,
    pub g_pinv: f64,
    pub g_pinv_frobenius: f64,
    pub trials: Vec<LatentTrial>,
    /// Trials dropped because a latent or the true source segment had (near)
    /// zero norm.
    pub skipped: usize,
    /// Largest `‖P†(Pv) − v‖/‖v‖` over random `v` already in the row
    /// space of `P`.
    pub pinv_residual: f64,
}

/// Compact summary for JSON certification reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentBoundSummary {
    pub samples: usize,
    pub latent_dim: usize,
    pub g_pinv: f64,
    pub g_pinv_frobenius: f64,
    pub normalized: BoundSummary,
    pub projected: BoundSummary,
    pub skipped: usize,
    pub pinv_residual: f64,
    pub mean_latent_si_sdr: f64,
    pub mean_time_si_sdr: f64,
}

impl LatentBoundReport {
    pub fn summary(&self) -> LatentBoundSummary {
        let n = self.trials.len().max(1) as f64;
        LatentBoundSummary {
            samples: self.samples,
            latent_dim: self.latent_dim,
            g_pinv: self.g_pinv,
            g_pinv_frobenius: self.g_pinv_frobenius,
            normalized: BoundSummary::of(self.trials.iter().map(|t| &t.normalized)),
            projected: BoundSummary::of(self.trials.iter().map(|t| &t.projected)),
            skipped: self.skipped,
            pinv_residual: self.pinv_residual,
            mean_latent_si_sdr: self.trials.iter().map(|t| t.latent_si_sdr).sum::<f64>() / n,
            mean_time_si_sdr: self.trials.iter().map(|t| t.time_si_sdr).sum::<f64>() / n,
        }
    }
}

/// The decoder matrix `P`, its pseudo-inverse and `g(P†)` for one clip
/// length.
#[derive(Debug, Clone)]
pub struct DecoderOperator {
    pub p: Tensor<f64>,
    pub pinv: Tensor<f64>,
    pub g_pinv: f64,
    pub g_pinv_frobenius: f64,
}

impl DecoderOperator {
    pub fn new(decoder: &Decoder<f64>, len: usize) -> Result<Self> {
        let frames = decoder
            .config()
            .frames(len)
            .ok_or_else(|| Error::Invalid(format!("clip of {len} samples is shorter than the kernel")))?;
        let p = materialize_decoder(decoder, frames, len)?;
        let pinv = pseudo_inverse(&p)?;
        let m = gram_deviation(&pinv)?;
        let (spec, frob) = (spectral_norm(&m)?, frobenius_norm(&m));
        Ok(Self {
            p,
            pinv,
            g_pinv: spec * spec + 2.0 * spec,
            g_pinv_frobenius: frob * frob + 2.0 * frob,
        })
    }

    /// Largest `‖P†Pu − u‖/‖u‖` for `u = P†Pv`, `v` random.
    pub fn row_space_residual(&self, draws: usize, rng: &mut RngStream) -> f64 {
        let k = self.p.shape()[1];
        (0..draws)
            .map(|_| {
                let v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
                let u = matvec(&self.pinv, &matvec(&self.p, &v));
                let back = matvec(&self.pinv, &matvec(&self.p, &u));
                let num: f64 = back.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum();
                (num / dot(&u, &u)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Both forms of the bound for one target/estimate latent pair, or
    /// `None` if any vector is degenerate.
    pub fn bound_pair(&self, v: &[f64], v_hat: &[f64]) -> Option<(BoundReport, BoundReport)> {
        let s_t = matvec(&self.p, v);
        let s_h = matvec(&self.p, v_hat);
        let (vu, vhu, y, yh) = (unit(v)?, unit(v_hat)?, unit(&s_t)?, unit(&s_h)?);
        let inner_sq = dot(&yh, &y).powi(2);
        let normalized = BoundReport::new(self.g_pinv, dot(&vhu, &vu).powi(2), inner_sq);
        let projected = prop1_report(&self.pinv, self.g_pinv, &y, &yh);
        Some((normalized, projected))
    }
}

/// Oracle latent targets `softmax-mask ⊙ E(x)` of one example, flattened.
fn latent_targets(system: &System<f64>, ex: &MixtureExample) -> Result<Vec<Vec<f64>>> {
    let v_x = system.encode(&ex.mixture)?;
    let latents = ex.sources.iter().map(|s| system.encode(s)).collect::<Result<Vec<_>>>()?;
    oracle_masks(&latents)?
        .iter()
        .map(|m| Ok(apply_mask(&v_x, m)?.into_data()))
        .collect()
}

/// Checks the latent-to-time bound on equally long examples with a 64-bit
/// copy of a trained system.
pub fn check_latent_bound(
    system: &System<f64>,
    examples: &[MixtureExample],
    estimator: LatentEstimator,
    rng: &mut RngStream,
) -> Result<LatentBoundReport> {
    let len = examples
        .first()
        .map(|e| e.mixture.len())
        .ok_or_else(|| Error::Invalid("check_latent_bound needs at least one example".into()))?;
    if examples.iter().any(|e| e.mixture.len() != len) {
        return Err(Error::Invalid("all examples must share one length".into()));
    }
    let op = DecoderOperator::new(&system.decoder, len)?;
    let k = op.p.shape()[1];
    let mut trials = Vec::new();
    let mut skipped = 0;
    for (ei, ex) in examples.iter().enumerate() {
        let targets = latent_targets(system, ex)?;
        let estimates: Vec<(usize, Vec<f64>)> = match estimator {
            LatentEstimator::Perturb { min_rel, max_rel, trials } => {
                let mut out = Vec::new();
                for (si, v) in targets.iter().enumerate() {
                    let vn = dot(v, v).sqrt() / (k as f64).sqrt();
                    for _ in 0..trials {
                        let sigma = (rng.uniform_range(min_rel.ln(), max_rel.ln())).exp() * vn;
                        out.push((si, v.iter().map(|x| x + sigma * rng.normal()).collect()));
                    }
                }
                out
            }
            LatentEstimator::Separator => {
                let est = system.estimate_latents(&ex.mixture)?.latents.into_data();
                let per: Vec<&[f64]> = est.chunks(k).collect();
                let t: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
                let pit = pit_si_sdr(&t, &per)?;
                pit.best_permutation
                    .iter()
                    .enumerate()
                    .map(|(si, &j)| (si, per[j].to_vec()))
                    .collect()
            }
        };
        for (si, v_hat) in estimates {
            let v = &targets[si];
            let truth: Vec<f64> = ex.sources[si].samples().iter().map(|&x| x as f64).collect();
            if unit(&truth).is_none() {
                skipped += 1;
                continue;
            }
            match op.bound_pair(v, &v_hat) {
                Some((normalized, projected)) => {
                    let s_hat = matvec(&op.p, &v_hat);
                    trials.push(LatentTrial {
                        example: ei,
                        source: si,
                        normalized,
                        projected,
                        latent_si_sdr: si_sdr(v, &v_hat)?,
                        time_si_sdr: si_sdr(&truth, &s_hat)?,
                    });
                }
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("latent bound: skipped {skipped} degenerate trials");
    }
    Ok(LatentBoundReport {
        samples: len,
        latent_dim: k,
        g_pinv: op.g_pinv,
        g_pinv_frobenius: op.g_pinv_frobenius,
        trials,
        skipped,
        pinv_residual: op.row_space_residual(5, rng),
    })
}

/// Cuts every waveform of an example to `[start, start + len)`.
pub fn segment_example(ex: &MixtureExample, start: usize, len: usize) -> Result<MixtureExample> {
    Ok(MixtureExample {
        mixture: ex.mixture.segment(start, len)?,
        sources: ex.sources.iter().map(|s| s.segment(start, len)).collect::<Result<_>>()?,
        snr_db: ex.snr_db,
        class_ids: ex.class_ids.clone(),
        seed: ex.seed,
    })
}
