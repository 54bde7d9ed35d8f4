//! Training, evaluation and export workflows.
//!
//! * Step 1 trains the encoder/decoder pair through oracle softmax masking.
//! * Step 2 freezes that pair and trains a separator against latent (or
//!   mask) targets.
//! * The end-to-end baseline trains all three modules with a time-domain
//!   loss under the same schedule.

mod eval;
mod export;
mod objectives;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use eval::{
    evaluate, mean_latent_l1, pit_si_sdri, write_eval_csv, EvalInputs, EvalReport, ExampleRecord, L1Comparison,
    MetricStats, IRM_HOP_FRACTION, IRM_WINDOW_SECONDS,
};
pub use export::{export_latents, latent_image, read_latent_csv, LATENT_DISPLAY_POWER};
pub use objectives::{e2e_objective, latent_targets, step1_objective, step2_objective, Batch, StepStats};
pub use train::{
    lr_at, train, train_e2e, train_step1, train_step2, train_with, validation_metrics, BestTracker, EpochRecord,
    TrainHooks, TrainOutcome, ValidStats,
};

use crate::autodiff::{Checkpoint, Coverage};
use crate::data::{DatasetManifest, Split, SplitSizes};
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, ModelManifest, OutputMode, SeparatorConfig, System};
use crate::numcore::Scalar;
use crate::signal::DEFAULT_SAMPLE_RATE;

pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_LR_DROP_EPOCH: usize = 25;
pub const DEFAULT_DATA_SEED: u64 = 2020;
/// Factor applied to the learning rate at the drop epoch.
pub const LR_DROP_FACTOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Step1,
    Step2Latent,
    Step2Mask,
    E2e,
}

impl TrainMode {
    pub fn loss_domain(self) -> LossDomain {
        match self {
            TrainMode::Step1 | TrainMode::E2e => LossDomain::Time,
            TrainMode::Step2Latent => LossDomain::Latent,
            TrainMode::Step2Mask => LossDomain::Mask,
        }
    }

    pub fn is_step2(self) -> bool {
        matches!(self, TrainMode::Step2Latent | TrainMode::Step2Mask)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Step1 => "step1",
            TrainMode::Step2Latent => "step2_latent",
            TrainMode::Step2Mask => "step2_mask",
            TrainMode::E2e => "e2e",
        }
    }
}

/// Where the training loss is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    Time,
    Latent,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base seed of all three splits.
    pub seed: u64,
    /// Clip length in seconds.
    pub duration: f64,
    pub sample_rate: u32,
    pub sizes: SplitSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_DATA_SEED,
            duration: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            sizes: SplitSizes::default(),
        }
    }
}

impl DataConfig {
    pub fn manifest(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            split,
            size: self.sizes.get(split),
            seed: self.seed,
            epoch: 0,
            duration: self.duration,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_sources: usize,
    pub encoder: EncoderConfig,
    pub separator: SeparatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_sources: 2,
            encoder: EncoderConfig::default(),
            separator: SeparatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// From this epoch on the learning rate is `lr · 0.1`.
    pub lr_drop_epoch: Option<usize>,
    /// Model initialization seed.
    pub seed: u64,
    /// Optional; when given it must agree with `mode`.
    pub loss_domain: Option<LossDomain>,
    /// Trained encoder/decoder for the Step-2 modes.
    pub step1_ckpt: Option<PathBuf>,
    pub grad_clip: Option<f64>,
    pub data: DataConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Step1,
            epochs: DEFAULT_EPOCHS,
            batch_size: 4,
            lr: 1e-3,
            lr_drop_epoch: Some(DEFAULT_LR_DROP_EPOCH),
            seed: 0,
            loss_domain: None,
            step1_ckpt: None,
            grad_clip: Some(crate::autodiff::GRAD_CLIP_NORM),
            data: DataConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate must be finite and ≥ 0, got {}", self.lr));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        match (self.mode.is_step2(), &self.step1_ckpt) {
            (true, None) => return bad(format!("{} requires step1_ckpt", self.mode.name())),
            (false, Some(_)) => return bad(format!("{} does not take a step1_ckpt", self.mode.name())),
            _ => {}
        }
        if let Some(d) = self.loss_domain {
            if d != self.mode.loss_domain() {
                return bad(format!(
                    "loss_domain {d:?} does not match mode {} ({:?})",
                    self.mode.name(),
                    self.mode.loss_domain()
                ));
            }
        }
        if self.data.sizes.train == 0 || self.data.sizes.valid == 0 {
            return bad("train and valid splits must be non-empty".into());
        }
        self.data.manifest(Split::Train).validate()?;
        let len = self.data.manifest(Split::Train).num_samples();
        if len < self.model.encoder.kernel {
            return bad(format!(
                "clips of {len} samples are shorter than the encoder kernel ({})",
                self.model.encoder.kernel
            ));
        }
        self.model_manifest().validate()
    }

    /// Separator configuration with the output head implied by `mode`.
    pub fn separator(&self) -> SeparatorConfig {
        let mut s = self.model.separator;
        match self.mode {
            TrainMode::Step2Latent => s.output = OutputMode::Latent,
            TrainMode::Step2Mask => s.output = OutputMode::Mask,
            _ => {}
        }
        s
    }

    pub fn model_manifest(&self) -> ModelManifest {
        let sep = (self.mode != TrainMode::Step1).then(|| self.separator());
        ModelManifest::new(self.data.sample_rate, self.model.num_sources, self.model.encoder, sep)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rebuilds a system from a checkpoint written by the training loops.
pub fn load_system<T: Scalar>(path: &Path) -> Result<(System<T>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let manifest: ModelManifest = ckpt.model()?;
    let mut sys = System::<T>::new(manifest, 0)?;
    ckpt.restore_params(&mut sys, Coverage::Exact)?;
    Ok((sys, ckpt))
}

/// Spearman rank correlation; ties get average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("spearman needs two equally long series of length ≥ 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}
