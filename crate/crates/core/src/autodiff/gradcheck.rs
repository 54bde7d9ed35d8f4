use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::Result;
use crate::numcore::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Upper bound on probed entries per parameter; entries are spread
    /// evenly across the tensor.
    pub max_elems_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_elems_per_param: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub probed: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares analytic parameter gradients against central differences.
///
/// `objective(model, with_grad)` must return the scalar loss; when
/// `with_grad` is true it must also accumulate parameter gradients.
/// Frozen parameters are skipped. The relative error of one entry is
/// `|a − n| / max(|a|, |n|, floor)` where `floor` is `1e-4` times the
/// largest analytic magnitude in that parameter, so entries whose gradient
/// is numerically zero do not dominate the report.
pub fn grad_check<T, M, F>(model: &mut M, mut objective: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    M: ParamStore<T>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.zero_grad();
    objective(model, true)?;
    let analytic: Vec<(String, bool, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.trainable, p.grad.data().iter().map(|g| g.as_f64()).collect()))
        .collect();
    model.zero_grad();

    let mut entries = Vec::new();
    for (pi, (name, trainable, grad)) in analytic.iter().enumerate() {
        if !trainable || grad.is_empty() {
            continue;
        }
        let n = grad.len();
        let probes = cfg.max_elems_per_param.clamp(1, n);
        let floor = 1e-4 * grad.iter().fold(0.0f64, |a, g| a.max(g.abs())) + 1e-12;
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0;
        for j in 0..probes {
            let idx = j * n / probes;
            let orig = model.params()[pi].value.data()[idx];
            model.params_mut()[pi].value.data_mut()[idx] = orig + T::of_f64(cfg.h);
            let plus = objective(model, false)?;
            model.params_mut()[pi].value.data_mut()[idx] = orig - T::of_f64(cfg.h);
            let minus = objective(model, false)?;
            model.params_mut()[pi].value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = grad[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_err = max_err.max(err);
            sum_err += err;
        }
        entries.push(GradCheckEntry {
            param: name.clone(),
            probed: probes,
            max_rel_err: max_err,
            mean_rel_err: sum_err / probes as f64,
        });
    }
    Ok(GradCheckReport { entries })
}
