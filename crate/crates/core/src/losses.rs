//! Scale-invariant SDR, its permutation-invariant wrapper and the
//! time/latent/mask training losses built on it.
//!
//! All values are computed in `f64` whatever the element type. The ratio
//! carries an `ε = 1e-8` guard in the denominator and is clamped to
//! `[-60, 60]` dB; inside the clamped region the gradient is zero.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};
use crate::signal::Waveform;

pub const SI_SDR_EPS: f64 = 1e-8;
pub const SI_SDR_CLAMP_DB: f64 = 60.0;
/// Largest source count accepted by the exhaustive permutation search.
pub const PIT_MAX_SOURCES: usize = 6;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

struct Parts {
    alpha: f64,
    signal: f64,
    noise: f64,
}

fn parts<T: Scalar>(target: &[T], estimate: &[T]) -> Result<Parts> {
    if target.len() != estimate.len() {
        return Err(Error::Shape {
            op: "si_sdr",
            left: vec![target.len()],
            right: vec![estimate.len()],
        });
    }
    let mut tt = 0.0;
    let mut et = 0.0;
    for (t, e) in target.iter().zip(estimate) {
        let (t, e) = (t.as_f64(), e.as_f64());
        tt += t * t;
        et += e * t;
    }
    if tt == 0.0 {
        return Err(Error::Invalid("si_sdr: target has zero energy".into()));
    }
    let alpha = et / tt;
    let mut noise = 0.0;
    for (t, e) in target.iter().zip(estimate) {
        let d = alpha * t.as_f64() - e.as_f64();
        noise += d * d;
    }
    Ok(Parts {
        alpha,
        signal: alpha * alpha * tt,
        noise,
    })
}

fn raw_db(p: &Parts) -> f64 {
    if p.signal == 0.0 {
        f64::NEG_INFINITY
    } else {
        DB * (p.signal / (p.noise + SI_SDR_EPS)).ln()
    }
}

/// SI-SDR in dB of `estimate` against `target`.
pub fn si_sdr<T: Scalar>(target: &[T], estimate: &[T]) -> Result<f64> {
    let p = parts(target, estimate)?;
    Ok(raw_db(&p).clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// SI-SDR and its gradient with respect to `estimate`.
pub fn si_sdr_with_grad<T: Scalar>(target: &[T], estimate: &[T]) -> Result<(f64, Vec<f64>)> {
    let p = parts(target, estimate)?;
    let raw = raw_db(&p);
    let value = raw.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB);
    if raw != value || !raw.is_finite() {
        return Ok((value, vec![0.0; estimate.len()]));
    }
    // d/de ‖αt‖² = 2αt ; d/de ‖αt − e‖² = 2(e − αt)
    let ks = 2.0 * DB / p.signal;
    let kn = 2.0 * DB / (p.noise + SI_SDR_EPS);
    let grad = target
        .iter()
        .zip(estimate)
        .map(|(t, e)| {
            let at = p.alpha * t.as_f64();
            ks * at - kn * (e.as_f64() - at)
        })
        .collect();
    Ok((value, grad))
}

/// Result of the permutation search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitResult {
    /// `best_permutation[i]` is the estimate assigned to target `i`.
    pub best_permutation: Vec<usize>,
    pub per_source_values: Vec<f64>,
    pub mean_value: f64,
}

/// Exhaustive permutation search maximizing mean SI-SDR. Ties go to the
/// lexicographically smallest permutation.
pub fn pit_si_sdr<T: Scalar>(targets: &[&[T]], estimates: &[&[T]]) -> Result<PitResult> {
    let n = check_pit_shapes(targets.len(), estimates.len())?;
    let mut table = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            table[i * n + j] = si_sdr(targets[i], estimates[j])?;
        }
    }
    Ok(best_assignment(n, &table))
}

fn check_pit_shapes(nt: usize, ne: usize) -> Result<usize> {
    if nt != ne {
        return Err(Error::Invalid(format!(
            "{nt} targets but {ne} estimates"
        )));
    }
    if nt == 0 {
        return Err(Error::Invalid("no sources".into()));
    }
    if nt > PIT_MAX_SOURCES {
        return Err(Error::Invalid(format!(
            "{nt} sources exceed the exhaustive PIT limit of {PIT_MAX_SOURCES}"
        )));
    }
    Ok(nt)
}

/// `table[i*n + j]` scores target `i` against estimate `j`.
fn best_assignment(n: usize, table: &[f64]) -> PitResult {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| table[i * n + j]).sum();
        let mean = total / n as f64;
        if best.as_ref().is_none_or(|(b, _)| mean > *b) {
            best = Some((mean, perm));
        }
    }
    let (mean_value, best_permutation) = best.expect("n ≥ 1");
    let per_source_values = best_permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| table[i * n + j])
        .collect();
    PitResult {
        best_permutation,
        per_source_values,
        mean_value,
    }
}

/// Negative PIT SI-SDR and its gradient with respect to each estimate.
#[derive(Debug, Clone)]
pub struct PitLoss {
    pub loss: f64,
    pub pit: PitResult,
    /// Indexed like the estimates.
    pub grads: Vec<Vec<f64>>,
}

/// `−mean_i SI-SDR(t_i, e_π(i))` at the best permutation `π`. Targets are
/// treated as constants.
pub fn pit_loss<T: Scalar>(targets: &[&[T]], estimates: &[&[T]]) -> Result<PitLoss> {
    let n = check_pit_shapes(targets.len(), estimates.len())?;
    let pit = pit_si_sdr(targets, estimates)?;
    let mut grads = vec![Vec::new(); n];
    for (i, &j) in pit.best_permutation.iter().enumerate() {
        let (_, g) = si_sdr_with_grad(targets[i], estimates[j])?;
        grads[j] = g.into_iter().map(|v| -v / n as f64).collect();
    }
    Ok(PitLoss {
        loss: -pit.mean_value,
        pit,
        grads,
    })
}

fn flattened_loss<T: Scalar>(
    what: &str,
    targets: &[Tensor<T>],
    estimates: &[Tensor<T>],
) -> Result<PitLoss> {
    for (t, e) in targets.iter().zip(estimates) {
        if t.shape() != e.shape() {
            return Err(Error::Shape {
                op: "latent loss",
                left: t.shape().to_vec(),
                right: e.shape().to_vec(),
            });
        }
        if t.data().iter().all(|v| *v == T::zero()) {
            return Err(Error::Invalid(format!("{what} target is all zeros")));
        }
    }
    let t: Vec<&[T]> = targets.iter().map(|x| x.data()).collect();
    let e: Vec<&[T]> = estimates.iter().map(|x| x.data()).collect();
    pit_loss(&t, &e)
}

/// Negative PIT SI-SDR on flattened latent representations.
pub fn latent_si_sdr_loss<T: Scalar>(
    v_targets: &[Tensor<T>],
    v_estimates: &[Tensor<T>],
) -> Result<PitLoss> {
    flattened_loss("latent", v_targets, v_estimates)
}

/// Negative PIT SI-SDR on flattened masks.
pub fn mask_si_sdr_loss<T: Scalar>(
    m_targets: &[Tensor<T>],
    m_estimates: &[Tensor<T>],
) -> Result<PitLoss> {
    flattened_loss("mask", m_targets, m_estimates)
}

/// SI-SDR improvement of `estimate` over the unprocessed mixture.
pub fn si_sdri(mix: &Waveform, target: &Waveform, estimate: &Waveform) -> Result<f64> {
    if mix.len() != target.len() || estimate.len() != target.len() {
        return Err(Error::Shape {
            op: "si_sdri",
            left: vec![mix.len(), target.len()],
            right: vec![estimate.len()],
        });
    }
    Ok(si_sdr(target.samples(), estimate.samples())? - si_sdr(target.samples(), mix.samples())?)
}
