use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use latentsep::data::{ingest_wav_corpus, make_split, IngestRules, SourceBank, Split, SplitSizes};
use latentsep::models::System;
use latentsep::numcore::{RngStream, Scalar, Tensor};
use latentsep::pipeline::{
    evaluate, export_latents, load_system, train_e2e, train_step1, train_step2, write_eval_csv, EvalInputs,
    TrainConfig, TrainMode, TrainOutcome,
};
use latentsep::signal::{write_wav, WavFormat};
use latentsep::theory::{
    check_latent_bound, check_prop1, check_prop2, g_of, segment_example, BoundSummary, LatentEstimator,
};
use latentsep::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "latentsep", version, about = "Two-step learned-latent source separation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model seed for training, data seed for gen-data, trial seed for
    /// verify-theory.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Checkpoint manifest (`best.json`); repeatable for evaluate.
    #[arg(long, global = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Clip length in seconds.
    #[arg(long, global = true)]
    duration: Option<f64>,
    /// Train, valid and test sizes as `a,b,c`.
    #[arg(long, global = true)]
    split_sizes: Option<SplitSizes>,
    /// Class-per-directory WAV corpus used instead of the synthetic bank.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Step2Loss {
    Latent,
    Mask,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset split as WAV files plus a CSV index.
    GenData {
        /// Splits to write; all three by default.
        #[arg(long, value_parser = parse_split)]
        split: Vec<Split>,
    },
    /// Train the encoder/decoder through oracle masking.
    TrainStep1,
    /// Train a separator on top of a frozen Step-1 checkpoint (`--ckpt`).
    TrainStep2 {
        /// Target domain; defaults to the config's mode, else latent.
        #[arg(long, value_enum)]
        loss: Option<Step2Loss>,
    },
    /// Train encoder, separator and decoder jointly in the time domain.
    TrainE2e,
    /// Score checkpoints on the fixed test split.
    Evaluate,
    /// Certify the bound propositions and, with `--ckpt`, the latent bound
    /// of a trained decoder.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Length of the test segments used for the latent bound.
        #[arg(long, default_value_t = 401)]
        segment: usize,
        #[arg(long, default_value_t = 20)]
        examples: usize,
    },
    /// Write sorted, display-compressed latents of test examples as CSV.
    ExportLatents {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split `{s}` (train, valid, test)"))
}

/// The configuration plus the mode named in the file, if any.
fn load_config(common: &Common) -> Result<(TrainConfig, Option<TrainMode>)> {
    let (mut cfg, mode) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let bad = |e: serde_json::Error| Error::Config(format!("{}: {e}", path.display()));
            let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
            let mode = match value.get("mode") {
                Some(m) => Some(serde_json::from_value::<TrainMode>(m.clone()).map_err(bad)?),
                None => None,
            };
            (serde_json::from_value::<TrainConfig>(value).map_err(bad)?, mode)
        }
        None => (TrainConfig::default(), None),
    };
    if let Some(d) = common.duration {
        cfg.data.duration = d;
    }
    if let Some(s) = common.split_sizes {
        cfg.data.sizes = s;
    }
    Ok((cfg, mode))
}

fn source_bank(common: &Common, cfg: &TrainConfig) -> Result<SourceBank> {
    let Some(root) = &common.corpus else {
        return Ok(SourceBank::synthetic());
    };
    let rules = IngestRules {
        sample_rate: cfg.data.sample_rate,
        seed: cfg.data.seed,
        ..IngestRules::default()
    };
    let report = ingest_wav_corpus(root, &rules)?;
    for e in &report.errors {
        log::warn!("skipped {}: {}", e.path.display(), e.message);
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report.bank)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(common: &Common, splits: &[Split]) -> Result<()> {
    let (mut cfg, _) = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.data.seed = seed;
    }
    let bank = source_bank(common, &cfg)?;
    let splits = if splits.is_empty() { Split::ALL.to_vec() } else { splits.to_vec() };
    let mut manifests = Vec::new();
    for split in splits {
        let manifest = cfg.data.manifest(split);
        manifest.validate()?;
        let dir = common.out_dir.join(split.name());
        fs::create_dir_all(&dir)?;
        let mut csv = String::from("index,seed,class_a,class_b,snr_db,mixture,source0,source1\n");
        for (i, ex) in make_split(&manifest, &bank).enumerate() {
            let ex = ex?;
            let mix = format!("{i:05}_mix.wav");
            write_wav(&dir.join(&mix), &ex.mixture, WavFormat::Float32)?;
            let mut names = Vec::new();
            for (j, s) in ex.sources.iter().enumerate() {
                let name = format!("{i:05}_s{j}.wav");
                write_wav(&dir.join(&name), s, WavFormat::Float32)?;
                names.push(name);
            }
            csv.push_str(&format!(
                "{i},{},{},{},{},{mix},{}\n",
                ex.seed,
                ex.class_ids[0],
                ex.class_ids[1],
                ex.snr_db,
                names.join(",")
            ));
        }
        fs::write(dir.join("index.csv"), csv)?;
        manifests.push(manifest);
    }
    write_json(
        &common.out_dir.join("dataset.json"),
        &json!({ "manifests": manifests, "bank": bank.classes, "config_hash": cfg.hash() }),
    )?;
    println!("wrote {} split(s) to {}", manifests.len(), common.out_dir.display());
    Ok(())
}

/// `accepts` lists the modes the command can run; the first one is used
/// unless the configuration names another accepted mode.
fn train_mode<T: Scalar>(common: &Common, accepts: &[TrainMode]) -> Result<()> {
    let (mut cfg, named) = load_config(common)?;
    let mode = match named {
        Some(m) if accepts.contains(&m) => m,
        Some(m) => {
            return Err(Error::Config(format!("config mode {} does not fit this command", m.name())).into());
        }
        None => accepts[0],
    };
    cfg.mode = mode;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if mode.is_step2() {
        let ckpt = common.ckpt.first().or(cfg.step1_ckpt.as_ref()).cloned();
        cfg.step1_ckpt = Some(ckpt.ok_or_else(|| Error::Config("train-step2 needs --ckpt <step1 best.json>".into()))?);
    }
    let bank = source_bank(common, &cfg)?;
    let out: TrainOutcome<T> = match mode {
        TrainMode::Step1 => train_step1(&cfg, &bank, &common.out_dir)?,
        TrainMode::Step2Latent | TrainMode::Step2Mask => train_step2(&cfg, &bank, &common.out_dir)?,
        TrainMode::E2e => train_e2e(&cfg, &bank, &common.out_dir)?,
    };
    let report = json!({
        "mode": mode,
        "best_epoch": out.best_epoch,
        "best_valid_si_sdri": out.best_metric,
        "best_ckpt": out.best_ckpt,
        "last_ckpt": out.last_ckpt,
        "config_hash": cfg.hash(),
    });
    write_json(&common.out_dir.join("train_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn checkpoint_mode(path: &Path) -> Result<(System<f64>, Option<TrainMode>)> {
    let (sys, ckpt) = load_system::<f64>(path)?;
    let mode = serde_json::from_value(ckpt.manifest.metadata["mode"].clone()).ok();
    Ok((sys, mode))
}

fn run_evaluate<T: Scalar>(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    if common.ckpt.is_empty() {
        bail!(Error::Config("evaluate needs at least one --ckpt".into()));
    }
    let mut codec = None;
    let mut e2e = None;
    let mut systems = Vec::new();
    for path in &common.ckpt {
        let (sys, mode) = checkpoint_mode(path)?;
        let sys: System<T> = sys.cast()?;
        let name = mode.map(|m| m.name().to_string()).unwrap_or_else(|| path.display().to_string());
        match mode {
            Some(TrainMode::Step1) => codec = Some(sys),
            Some(TrainMode::E2e) => {
                systems.push((name, sys.clone()));
                e2e = Some(sys);
            }
            _ => systems.push((name, sys)),
        }
    }
    let bank = source_bank(common, &cfg)?;
    let test = make_split(&cfg.data.manifest(Split::Test), &bank).collect::<latentsep::Result<Vec<_>>>()?;
    let inputs = EvalInputs {
        systems: systems.iter().map(|(n, s)| (n.clone(), s)).collect(),
        codec: codec.as_ref(),
        e2e: e2e.as_ref(),
        config_hash: cfg.hash(),
    };
    let report = evaluate(&inputs, &test)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    fs::create_dir_all(&common.out_dir)?;
    write_json(&common.out_dir.join("eval_report.json"), &report)?;
    write_eval_csv(&report, &common.out_dir.join("eval_records.csv"))?;
    println!("IRM oracle: {:.2} dB", report.oracle_irm.mean);
    if let Some(o) = &report.oracle_latent {
        println!("latent oracle: {:.2} dB", o.mean);
    }
    for (name, s) in &report.systems {
        println!("{name}: mean {:.2} dB, median {:.2} dB", s.mean, s.median);
    }
    Ok(())
}

fn verify_theory(common: &Common, trials: usize, segment: usize, count: usize) -> Result<bool> {
    let (cfg, _) = load_config(common)?;
    let mut rng = RngStream::new(common.seed.unwrap_or(0));
    let mut prop1 = Vec::new();
    let d = 16;
    let families: [(&str, Tensor<f64>); 2] = [
        ("gaussian", Tensor::randn([24, d], &mut rng).scale(0.3)),
        ("identity", Tensor::eye(d)),
    ];
    for (name, a) in families {
        let reports = check_prop1(&a, trials, &mut rng)?;
        prop1.push(json!({ "family": name, "g": g_of(&a)?, "summary": BoundSummary::of(&reports) }));
    }
    let prop2 = check_prop2(64, 50, 100, &mut rng)?;
    let mut ok = prop2.agreements == prop2.trials;
    ok &= prop1.iter().all(|p| p["summary"]["violations"] == 0);

    let latent = match common.ckpt.first() {
        Some(path) => {
            let (sys, _) = load_system::<f64>(path)?;
            let bank = source_bank(common, &cfg)?;
            let mut manifest = cfg.data.manifest(Split::Test);
            manifest.size = count;
            let examples = make_split(&manifest, &bank)
                .map(|e| {
                    let e = e?;
                    let start = e.mixture.len().saturating_sub(segment) / 2;
                    segment_example(&e, start, segment)
                })
                .collect::<latentsep::Result<Vec<_>>>()?;
            let estimator = if sys.separator.is_some() {
                LatentEstimator::Separator
            } else {
                LatentEstimator::Perturb {
                    min_rel: 1e-3,
                    max_rel: 3.0,
                    trials: trials.div_ceil(count * sys.num_sources()).max(1),
                }
            };
            let summary = check_latent_bound(&sys, &examples, estimator, &mut rng)?.summary();
            ok &= summary.normalized.violations == 0 && summary.projected.violations == 0;
            Some(summary)
        }
        None => None,
    };
    let report = json!({ "prop1": prop1, "prop2": prop2, "latent_bound": latent, "certified": ok });
    fs::create_dir_all(&common.out_dir)?;
    write_json(&common.out_dir.join("theory_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ok)
}

fn run_export<T: Scalar>(common: &Common, count: usize) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let path = common
        .ckpt
        .first()
        .ok_or_else(|| Error::Config("export-latents needs --ckpt".into()))?;
    let (sys, _) = load_system::<T>(path)?;
    let bank = source_bank(common, &cfg)?;
    let mut manifest = cfg.data.manifest(Split::Test);
    manifest.size = count;
    let examples = make_split(&manifest, &bank).collect::<latentsep::Result<Vec<_>>>()?;
    let written = export_latents(&sys, &examples, &common.out_dir)?;
    println!("wrote {} CSV files to {}", written.len(), common.out_dir.display());
    Ok(())
}

fn dispatch<T: Scalar>(cli: &Cli) -> Result<bool> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData { split } => gen_data(c, split)?,
        Command::TrainStep1 => train_mode::<T>(c, &[TrainMode::Step1])?,
        Command::TrainStep2 { loss } => {
            let accepts = match loss {
                None => &[TrainMode::Step2Latent, TrainMode::Step2Mask][..],
                Some(Step2Loss::Latent) => &[TrainMode::Step2Latent][..],
                Some(Step2Loss::Mask) => &[TrainMode::Step2Mask][..],
            };
            train_mode::<T>(c, accepts)?
        }
        Command::TrainE2e => train_mode::<T>(c, &[TrainMode::E2e])?,
        Command::Evaluate => run_evaluate::<T>(c)?,
        Command::VerifyTheory {
            trials,
            segment,
            examples,
        } => return verify_theory(c, *trials, *segment, *examples),
        Command::ExportLatents { count } => run_export::<T>(c, *count)?,
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(Error::Config(_) | Error::Usage(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.common.precision {
        Precision::F32 => dispatch::<f32>(&cli),
        Precision::F64 => dispatch::<f64>(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: certification found violations");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
