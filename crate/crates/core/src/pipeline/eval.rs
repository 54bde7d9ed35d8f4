use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MixtureExample;
use crate::error::{Error, Result};
use crate::losses::{pit_si_sdr, si_sdr};
use crate::models::System;
use crate::numcore::Scalar;
use crate::signal::{irm_oracle_separate, IrmKind, Waveform};

/// STFT window of the IRM oracle in seconds (a Hann window).
pub const IRM_WINDOW_SECONDS: f64 = 0.064;
/// Hop as a fraction of the window.
pub const IRM_HOP_FRACTION: f64 = 0.25;

/// Per-source SI-SDRi of `estimates` under the best PIT assignment, in
/// target order.
pub fn pit_si_sdri(mixture: &Waveform, sources: &[Waveform], estimates: &[Waveform]) -> Result<Vec<f64>> {
    let t: Vec<&[f32]> = sources.iter().map(|s| s.samples()).collect();
    let e: Vec<&[f32]> = estimates.iter().map(|s| s.samples()).collect();
    let pit = pit_si_sdr(&t, &e)?;
    sources
        .iter()
        .zip(&pit.per_source_values)
        .map(|(s, v)| Ok(v - si_sdr(s.samples(), mixture.samples())?))
        .collect()
}

/// Mean over examples of `Σ|E(x)|`, the ℓ1 norm of the mixture latent.
pub fn mean_latent_l1<T: Scalar>(sys: &System<T>, examples: &[MixtureExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("no examples for the latent ℓ1 statistic".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        total += sys.encode(&ex.mixture)?.data().iter().map(|v| v.as_f64().abs()).sum::<f64>();
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl MetricStats {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            mean: values.iter().sum::<f64>() / n as f64,
            median,
            min: sorted.first().copied().unwrap_or(f64::NAN),
            max: sorted.last().copied().unwrap_or(f64::NAN),
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Comparison {
    pub step1_mean: f64,
    pub e2e_mean: f64,
    /// `e2e_mean / step1_mean`.
    pub ratio: f64,
    pub examples: usize,
}

/// Mean SI-SDRi over sources of one test example, per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub seed: u64,
    pub class_ids: Vec<String>,
    pub snr_db: f64,
    pub oracle_irm: f64,
    pub oracle_latent: Option<f64>,
    pub systems: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub test_examples: usize,
    pub sample_rate: u32,
    pub irm_kind: String,
    pub irm_window: usize,
    pub irm_hop: usize,
    pub systems: BTreeMap<String, MetricStats>,
    pub oracle_latent: Option<MetricStats>,
    pub oracle_irm: MetricStats,
    pub latent_l1: Option<L1Comparison>,
    pub records: Vec<ExampleRecord>,
    pub warnings: Vec<String>,
}

/// What to evaluate. Every field except the IRM oracle is optional; a
/// missing input drops its column with a warning.
pub struct EvalInputs<'a, T: Scalar> {
    /// Separation systems by name.
    pub systems: Vec<(String, &'a System<T>)>,
    /// Trained Step-1 codec for the latent-mask oracle.
    pub codec: Option<&'a System<T>>,
    /// Encoder of a jointly trained system for the ℓ1 comparison against
    /// `codec`.
    pub e2e: Option<&'a System<T>>,
    /// Fingerprint of the configuration that produced the inputs.
    pub config_hash: String,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores every input on the full `examples` split.
pub fn evaluate<T: Scalar>(inputs: &EvalInputs<'_, T>, examples: &[MixtureExample]) -> Result<EvalReport> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Invalid("evaluation needs a non-empty test split".into()))?;
    let sr = first.mixture.sample_rate();
    let window = (IRM_WINDOW_SECONDS * sr as f64).round() as usize;
    let hop = ((window as f64 * IRM_HOP_FRACTION).round() as usize).max(1);
    let mut warnings = Vec::new();
    if inputs.systems.is_empty() {
        warnings.push("no separation systems given; only oracle columns are reported".to_string());
    }
    if inputs.codec.is_none() {
        warnings.push("no Step-1 checkpoint given; oracle latent-mask column omitted".to_string());
    }
    if inputs.codec.is_none() || inputs.e2e.is_none() {
        warnings.push("latent ℓ1 comparison needs both a Step-1 and an end-to-end checkpoint; omitted".to_string());
    }
    let mut records = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let irm = irm_oracle_separate(&ex.mixture, &ex.sources, window, hop, IrmKind::Magnitude)?;
        let oracle_irm = mean(&pit_si_sdri(&ex.mixture, &ex.sources, &irm)?);
        let oracle_latent = match inputs.codec {
            Some(c) => Some(mean(&pit_si_sdri(
                &ex.mixture,
                &ex.sources,
                &c.oracle_separate(&ex.mixture, &ex.sources)?,
            )?)),
            None => None,
        };
        let mut systems = BTreeMap::new();
        for (name, sys) in &inputs.systems {
            let est = sys.separate(&ex.mixture)?;
            systems.insert(name.clone(), mean(&pit_si_sdri(&ex.mixture, &ex.sources, &est)?));
        }
        records.push(ExampleRecord {
            index,
            seed: ex.seed,
            class_ids: ex.class_ids.clone(),
            snr_db: ex.snr_db,
            oracle_irm,
            oracle_latent,
            systems,
        });
    }
    let column = |f: &dyn Fn(&ExampleRecord) -> f64| MetricStats::of(&records.iter().map(f).collect::<Vec<_>>());
    let systems = inputs
        .systems
        .iter()
        .map(|(name, _)| (name.clone(), column(&|r| r.systems[name])))
        .collect();
    let oracle_latent = inputs.codec.map(|_| column(&|r| r.oracle_latent.unwrap_or(f64::NAN)));
    let oracle_irm = column(&|r| r.oracle_irm);
    let latent_l1 = match (inputs.codec, inputs.e2e) {
        (Some(c), Some(e)) => {
            let step1_mean = mean_latent_l1(c, examples)?;
            let e2e_mean = mean_latent_l1(e, examples)?;
            Some(L1Comparison {
                step1_mean,
                e2e_mean,
                ratio: e2e_mean / step1_mean,
                examples: examples.len(),
            })
        }
        _ => None,
    };
    Ok(EvalReport {
        config_hash: inputs.config_hash.clone(),
        test_examples: examples.len(),
        sample_rate: sr,
        irm_kind: "magnitude".into(),
        irm_window: window,
        irm_hop: hop,
        systems,
        oracle_latent,
        oracle_irm,
        latent_l1,
        records,
        warnings,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per test example with a header row.
pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let names: Vec<&String> = report.systems.keys().collect();
    let mut out = String::from("index,seed,classes,snr_db,oracle_irm,oracle_latent");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.index,
            r.seed,
            r.class_ids.join("+"),
            r.snr_db,
            r.oracle_irm,
            opt(r.oracle_latent)
        ));
        for n in &names {
            out.push(',');
            out.push_str(&opt(r.systems.get(*n).copied()));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
