use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::objectives::{e2e_objective, latent_targets, step1_objective, step2_objective, Batch, StepStats};
use super::{eval::pit_si_sdri, load_system, TrainConfig, TrainMode, LR_DROP_FACTOR};
use crate::autodiff::{clip_grad_norm, AdamState, Checkpoint, ParamStore};
use crate::data::{make_split, MixtureExample, SourceBank, Split};
use crate::error::{Error, Result};
use crate::losses::pit_si_sdr;
use crate::models::System;
use crate::numcore::Scalar;

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_drop_epoch {
        Some(d) if epoch >= d => cfg.lr * LR_DROP_FACTOR,
        _ => cfg.lr,
    }
}

/// Keeps the epoch with the highest validation metric; the first of equal
/// values wins and non-finite values never do.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `metric` is a new best.
    pub fn offer(&mut self, epoch: usize, metric: f64) -> bool {
        if !metric.is_finite() {
            return false;
        }
        match self.best {
            Some((_, b)) if metric <= b => false,
            _ => {
                self.best = Some((epoch, metric));
                true
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_latent_si_sdr: Option<f64>,
    pub train_time_si_sdr: Option<f64>,
    /// Model-selection metric: mean validation SI-SDRi in the time domain.
    pub valid_si_sdri: f64,
    pub valid_latent_si_sdr: Option<f64>,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidStats {
    pub si_sdri: f64,
    pub latent_si_sdr: Option<f64>,
}

/// Overrides for tests and callers that need to observe training.
pub struct TrainHooks<'a, T: Scalar> {
    /// Replaces the validation metric of an epoch.
    pub validate: Option<Box<dyn FnMut(usize, &System<T>) -> Result<f64> + 'a>>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

impl<T: Scalar> Default for TrainHooks<'_, T> {
    fn default() -> Self {
        Self {
            validate: None,
            on_epoch: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters of the best validation epoch.
    pub system: System<T>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<EpochRecord>,
    pub best_ckpt: PathBuf,
    pub last_ckpt: PathBuf,
}

/// Mean validation SI-SDRi. Step-1 systems are scored by their oracle
/// latent-mask separation, others by their separator.
pub fn validation_metrics<T: Scalar>(sys: &System<T>, examples: &[MixtureExample]) -> Result<ValidStats> {
    let mut sdri = 0.0;
    let mut latent = 0.0;
    let has_sep = sys.separator.is_some();
    for ex in examples {
        let est = if has_sep {
            sys.separate(&ex.mixture)?
        } else {
            sys.oracle_separate(&ex.mixture, &ex.sources)?
        };
        let v = pit_si_sdri(&ex.mixture, &ex.sources, &est)?;
        sdri += v.iter().sum::<f64>() / v.len() as f64;
        if has_sep {
            let batch = Batch::<T>::new(&[ex])?;
            let (_, targets, _) = latent_targets(sys, &batch)?;
            let out = sys.estimate_latents(&ex.mixture)?;
            let n = sys.num_sources();
            let kf = targets.len() / n;
            let t: Vec<&[T]> = targets.data().chunks(kf).collect();
            let e: Vec<&[T]> = out.latents.data().chunks(kf).collect();
            latent += pit_si_sdr(&t, &e)?.mean_value;
        }
    }
    let n = examples.len().max(1) as f64;
    Ok(ValidStats {
        si_sdri: sdri / n,
        latent_si_sdr: has_sep.then_some(latent / n),
    })
}

fn initial_system<T: Scalar>(cfg: &TrainConfig) -> Result<System<T>> {
    match cfg.mode {
        TrainMode::Step1 | TrainMode::E2e => System::new(cfg.model_manifest(), cfg.seed),
        TrainMode::Step2Latent | TrainMode::Step2Mask => {
            let path = cfg.step1_ckpt.as_ref().expect("validated");
            let (mut sys, _) = load_system::<T>(path)?;
            let want = cfg.model_manifest();
            if !sys.manifest().codec_matches(&want) {
                return Err(Error::Config(format!(
                    "{}: encoder/decoder architecture {:?} ({} sources @ {} Hz) does not match the configured {:?} ({} sources @ {} Hz)",
                    path.display(),
                    sys.manifest().encoder,
                    sys.manifest().num_sources,
                    sys.manifest().sample_rate,
                    want.encoder,
                    want.num_sources,
                    want.sample_rate
                )));
            }
            sys.encoder.set_trainable(false);
            sys.decoder.set_trainable(false);
            sys.attach_separator(cfg.separator(), cfg.seed)?;
            Ok(sys)
        }
    }
}

fn objective<T: Scalar>(mode: TrainMode, sys: &mut System<T>, batch: &Batch<T>) -> Result<StepStats> {
    match mode {
        TrainMode::Step1 => step1_objective(sys, batch, true),
        TrainMode::Step2Latent | TrainMode::Step2Mask => step2_objective(sys, batch, true),
        TrainMode::E2e => e2e_objective(sys, batch, true),
    }
}

fn capture<T: Scalar>(sys: &System<T>, opt: &AdamState, cfg: &TrainConfig, epoch: usize, metric: f64) -> Result<Checkpoint> {
    Ok(Checkpoint::capture(
        sys,
        serde_json::to_value(sys.manifest())?,
        Some(opt),
        serde_json::json!({
            "mode": cfg.mode,
            "epoch": epoch,
            "valid_si_sdri": metric,
            "config_hash": cfg.hash(),
            "config": cfg,
        }),
    ))
}

fn write_log(out_dir: &Path, cfg: &TrainConfig, log: &[EpochRecord]) -> Result<()> {
    let json = serde_json::json!({ "config": cfg, "config_hash": cfg.hash(), "epochs": log });
    fs::write(out_dir.join("train_log.json"), serde_json::to_string_pretty(&json)?)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from(
        "epoch,lr,train_loss,train_latent_si_sdr,train_time_si_sdr,valid_si_sdri,valid_latent_si_sdr,improved,seconds\n",
    );
    for r in log {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            opt(r.train_latent_si_sdr),
            opt(r.train_time_si_sdr),
            r.valid_si_sdri,
            opt(r.valid_latent_si_sdr),
            r.improved,
            r.seconds
        ));
    }
    fs::write(out_dir.join("train_log.csv"), csv)?;
    Ok(())
}

fn as_divergence(e: Error, epoch: usize, batch: usize, loss: f64) -> Error {
    match e {
        Error::NonFinite(_) | Error::NanGradient(_) => Error::Diverged { epoch, batch, loss },
        other => other,
    }
}

/// Runs the configured schedule, writing `best.json`, `last.json` (each
/// with a `.bin` blob) and `train_log.{json,csv}` into `out_dir`.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`]; the best
/// checkpoint written so far is left untouched.
pub fn train_with<T: Scalar>(
    cfg: &TrainConfig,
    bank: &SourceBank,
    out_dir: &Path,
    mut hooks: TrainHooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    bank.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut sys = initial_system::<T>(cfg)?;
    let mut opt = AdamState::new(cfg.lr);
    let valid: Vec<MixtureExample> = make_split(&cfg.data.manifest(Split::Valid), bank).collect::<Result<_>>()?;
    let best_ckpt = out_dir.join("best.json");
    let last_ckpt = out_dir.join("last.json");
    let mut tracker = BestTracker::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        opt.lr = lr_at(cfg, epoch);
        let train_manifest = cfg.data.manifest(Split::Train).at_epoch(epoch as u64);
        let examples: Vec<MixtureExample> = make_split(&train_manifest, bank).collect::<Result<_>>()?;
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (bi, chunk) in examples.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&MixtureExample> = chunk.iter().collect();
            let batch = Batch::<T>::new(&refs)?;
            sys.zero_grad();
            let stats = objective(cfg.mode, &mut sys, &batch).map_err(|e| as_divergence(e, epoch, bi, f64::NAN))?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: stats.loss,
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut sys, c);
            }
            opt.step(&mut sys).map_err(|e| as_divergence(e, epoch, bi, stats.loss))?;
            sums.0 += stats.loss;
            sums.1 += stats.latent_si_sdr.unwrap_or(0.0);
            sums.2 += stats.time_si_sdr.unwrap_or(0.0);
            batches += 1;
        }
        let nb = batches as f64;
        let vs = match hooks.validate.as_mut() {
            Some(f) => ValidStats {
                si_sdri: f(epoch, &sys)?,
                latent_si_sdr: None,
            },
            None => validation_metrics(&sys, &valid)?,
        };
        let improved = tracker.offer(epoch, vs.si_sdri);
        let ckpt = capture(&sys, &opt, cfg, epoch, vs.si_sdri)?;
        if improved {
            ckpt.save(&best_ckpt)?;
        }
        ckpt.save(&last_ckpt)?;
        let has_latent = cfg.mode.is_step2();
        let record = EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: sums.0 / nb,
            train_latent_si_sdr: has_latent.then_some(sums.1 / nb),
            train_time_si_sdr: Some(sums.2 / nb),
            valid_si_sdri: vs.si_sdri,
            valid_latent_si_sdr: vs.latent_si_sdr,
            improved,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4}, valid SI-SDRi {:.3} dB{}",
            cfg.mode.name(),
            record.train_loss,
            record.valid_si_sdri,
            if improved { " (best)" } else { "" }
        );
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record);
        }
        log.push(record);
        write_log(out_dir, cfg, &log)?;
    }
    let (best_epoch, best_metric) = match tracker.best {
        Some(b) => b,
        None => {
            // No finite validation metric: keep the final parameters.
            fs::copy(&last_ckpt, &best_ckpt)?;
            fs::copy(last_ckpt.with_extension("bin"), best_ckpt.with_extension("bin"))?;
            (cfg.epochs - 1, f64::NAN)
        }
    };
    let (system, _) = load_system::<T>(&best_ckpt)?;
    Ok(TrainOutcome {
        system,
        best_epoch,
        best_metric,
        log,
        best_ckpt,
        last_ckpt,
    })
}

pub fn train<T: Scalar>(cfg: &TrainConfig, bank: &SourceBank, out_dir: &Path) -> Result<TrainOutcome<T>> {
    train_with(cfg, bank, out_dir, TrainHooks::default())
}

fn expect_mode(cfg: &TrainConfig, ok: &[TrainMode]) -> Result<()> {
    if ok.contains(&cfg.mode) {
        Ok(())
    } else {
        Err(Error::Config(format!("mode {} is not valid for this command", cfg.mode.name())))
    }
}

/// Step 1: encoder/decoder through oracle masking.
pub fn train_step1<T: Scalar>(cfg: &TrainConfig, bank: &SourceBank, out_dir: &Path) -> Result<TrainOutcome<T>> {
    expect_mode(cfg, &[TrainMode::Step1])?;
    train(cfg, bank, out_dir)
}

/// Step 2: separator only, from `cfg.step1_ckpt`.
pub fn train_step2<T: Scalar>(cfg: &TrainConfig, bank: &SourceBank, out_dir: &Path) -> Result<TrainOutcome<T>> {
    expect_mode(cfg, &[TrainMode::Step2Latent, TrainMode::Step2Mask])?;
    train(cfg, bank, out_dir)
}

/// End-to-end baseline.
pub fn train_e2e<T: Scalar>(cfg: &TrainConfig, bank: &SourceBank, out_dir: &Path) -> Result<TrainOutcome<T>> {
    expect_mode(cfg, &[TrainMode::E2e])?;
    train(cfg, bank, out_dir)
}
