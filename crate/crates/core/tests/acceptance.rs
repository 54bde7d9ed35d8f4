//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion.
//!
//! Environment:
//! - `ACCEPTANCE_ONLY=1,2,5` runs a subset (criteria 7, 9 and 10 train
//!   the checkpoints they depend on when needed).
//! - `ACCEPTANCE_STRICT=1` exits non-zero when any criterion fails.
//! - `ACCEPTANCE_OUT=<dir>` keeps checkpoints and reports there instead of
//!   a temporary directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use latentsep::autodiff::{grad_check, Checkpoint, GradCheckConfig, Layer, LayerSpec, Mode, ParamStore};
use latentsep::data::{
    ks_uniform, make_split, mix_at_snr, DatasetManifest, MixtureExample, SourceBank, SourceKind, Split, SplitSizes,
    SNR_RANGE_DB,
};
use latentsep::losses::{pit_si_sdr, si_sdr, SI_SDR_CLAMP_DB};
use latentsep::models::{EncoderConfig, OutputMode, SeparatorConfig, System};
use latentsep::numcore::{svd, RngStream, Tensor};
use latentsep::pipeline::{
    e2e_objective, evaluate, load_system, mean_latent_l1, step1_objective, step2_objective, train_e2e, train_step1,
    train_step2, Batch, DataConfig, EvalInputs, ModelConfig, StepStats, TrainConfig, TrainMode,
};
use latentsep::theory::{
    check_latent_bound, check_prop1, check_prop2, g_of, materialize_decoder, segment_example, BoundSummary,
    LatentEstimator,
};

type Outcome = std::result::Result<String, String>;

/// SHA-256 over the `f32` samples of every mixture and source of the
/// default valid and test splits (seed 2020, 1 s, 128 examples each).
const PINNED_VALID_DIGEST: &str = "fffb27e1638cbad8818cd030061945f9bd86d5e410f359cc0c8303cd19cb6f2d";
const PINNED_TEST_DIGEST: &str = "f1561d607bcc608beb3cbc4929614d2abbfb3327d6513757d12e959f59930197";

const STEP1_EPOCHS: usize = 100;
const STEP1_DROP: usize = 80;
const STEP1_LR: f64 = 1e-2;
const PAIRED_SEEDS: [u64; 3] = [1, 2, 3];
const PAIRED_EPOCHS: usize = 15;
const PAIRED_DROP: usize = 10;

struct Ctx {
    root: PathBuf,
    bank: SourceBank,
    step1: Option<(PathBuf, f64)>,
    paired: Option<Vec<PairedRun>>,
}

struct PairedRun {
    seed: u64,
    two_step: f64,
    e2e: f64,
    e2e_ckpt: PathBuf,
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let (root, _guard) = match std::env::var("ACCEPTANCE_OUT") {
        Ok(dir) => (PathBuf::from(dir), None),
        Err(_) => {
            let t = tempfile::tempdir().expect("temporary directory");
            (t.path().to_path_buf(), Some(t))
        }
    };
    fs::create_dir_all(&root).expect("output directory");
    let mut ctx = Ctx {
        root,
        bank: SourceBank::synthetic(),
        step1: None,
        paired: None,
    };

    type Criterion = (usize, &'static str, f64, fn(&mut Ctx) -> Outcome);
    let criteria: [Criterion; 12] = [
        (1, "SI-SDR scale invariance and clamps", 5.0, c1_si_sdr),
        (2, "PIT equals brute-force enumeration", 10.0, c2_pit),
        (3, "gradient certification", 120.0, c3_gradients),
        (4, "Proposition 1 suite", 30.0, c4_prop1),
        (5, "Proposition 2 suite", 5.0, c5_prop2),
        (6, "decoder linearity and materialization", 10.0, c6_decoder),
        (8, "Step-1 desk training vs STFT IRM", 900.0, c8_step1),
        (7, "latent-bound certification", 120.0, c7_latent_bound),
        (9, "two-step vs end-to-end direction", 3600.0, c9_paired),
        (10, "latent sparsity direction", 60.0, c10_sparsity),
        (11, "reproducibility and formats", f64::INFINITY, c11_reproducibility),
        (12, "mixture generator", f64::INFINITY, c12_generator),
    ];

    let mut lines = Vec::new();
    for (id, name, budget, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f(&mut ctx);
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(d) if secs <= budget => (true, d),
            Ok(d) => (false, format!("{d}; runtime {secs:.1} s exceeds {budget} s")),
            Err(d) => (false, d),
        };
        let line = format!(
            "criterion {id:>2} {}: {name} ({secs:.1} s) {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        println!("{line}");
        lines.push((id, pass, line));
    }

    lines.sort_by_key(|l| l.0);
    let failed = lines.iter().filter(|l| !l.1).count();
    println!("\nacceptance summary: {}/{} passed", lines.len() - failed, lines.len());
    for (_, _, line) in &lines {
        println!("  {line}");
    }
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Direct SI-SDR with the library's stabilizer and clamp, for oracle use.
fn si_sdr_oracle(t: &[f64], e: &[f64]) -> f64 {
    let eps = 1e-8;
    let tt: f64 = t.iter().map(|x| x * x).sum();
    let alpha = t.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / tt;
    let proj: f64 = t.iter().map(|x| (alpha * x).powi(2)).sum();
    let res: f64 = t.iter().zip(e).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    (10.0 * (proj / (res + eps)).log10()).clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB)
}

fn c1_si_sdr(_: &mut Ctx) -> Outcome {
    let mut rng = RngStream::new(101);
    let mut worst = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..1000 {
        let n = 64 + rng.below(960);
        let noise = 10f64.powf(rng.uniform_range(-1.0, 1.0));
        let t: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let e: Vec<f64> = t.iter().map(|x| x + noise * rng.normal()).collect();
        let base = si_sdr(&t, &e).map_err(err)?;
        worst_oracle = worst_oracle.max((base - si_sdr_oracle(&t, &e)).abs());
        for c in [0.1, 0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = e.iter().map(|x| c * x).collect();
            worst = worst.max((si_sdr(&t, &scaled).map_err(err)? - base).abs());
        }
    }
    let mut t = vec![0.0; 16];
    t[0] = 1.0;
    let mut o = vec![0.0; 16];
    o[1] = 1.0;
    let identical = si_sdr(&t, &t).map_err(err)?;
    let orthogonal = si_sdr(&t, &o).map_err(err)?;
    check(
        worst < 1e-4 && worst_oracle < 1e-9 && identical == SI_SDR_CLAMP_DB && orthogonal == -SI_SDR_CLAMP_DB,
        format!(
            "max scale deviation {worst:.2e} dB (< 1e-4), oracle deviation {worst_oracle:.2e}, \
             identical {identical} dB, orthogonal {orthogonal} dB"
        ),
    )
}

/// All permutations of `items` in lexicographic order.
fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

fn c2_pit(_: &mut Ctx) -> Outcome {
    let mut rng = RngStream::new(202);
    let mut mismatches = 0;
    let mut instances = 0;
    for n in 2..=4 {
        let perms = permutations(&(0..n).collect::<Vec<_>>());
        for _ in 0..200 {
            let len = 32 + rng.below(200);
            let targets: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| rng.normal()).collect()).collect();
            let estimates: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let src = &targets[(i + rng.below(n)) % n];
                    let w = rng.uniform_range(0.0, 2.0);
                    src.iter().map(|x| x + w * rng.normal()).collect()
                })
                .collect();
            let best = perms
                .iter()
                .map(|p| {
                    let m = (0..n).map(|i| si_sdr_oracle(&targets[i], &estimates[p[i]])).sum::<f64>() / n as f64;
                    (m, p)
                })
                .fold((f64::NEG_INFINITY, &perms[0]), |a, b| if b.0 > a.0 { b } else { a });
            let t: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
            let e: Vec<&[f64]> = estimates.iter().map(|v| v.as_slice()).collect();
            let pit = pit_si_sdr(&t, &e).map_err(err)?;
            if (pit.mean_value - best.0).abs() > 1e-9 || &pit.best_permutation != best.1 {
                mismatches += 1;
            }
            instances += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches in {instances} instances"))
}

fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error of parameter and input gradients of one layer.
fn layer_error(spec: LayerSpec, shape: &[usize], mode: Mode) -> Result<f64, String> {
    let mut layer = Layer::<f64>::new("l", spec, &mut RngStream::new(7)).map_err(err)?;
    let mut r = RngStream::new(107);
    for p in layer.params_mut() {
        if p.trainable {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.3 * r.normal());
        }
    }
    let x = Tensor::<f64>::randn(shape.to_vec(), &mut RngStream::new(3));
    let w = Tensor::<f64>::randn(layer.infer(&x).map_err(err)?.shape().to_vec(), &mut RngStream::new(4));
    let report = grad_check(
        &mut layer,
        |l: &mut Layer<f64>, with_grad| {
            let (y, saved) = l.forward(&x, mode)?;
            if with_grad {
                l.backward(saved, &w)?;
            }
            Ok(weighted_sum(&y, &w))
        },
        GradCheckConfig {
            h: 1e-5,
            max_elems_per_param: 40,
        },
    )
    .map_err(err)?;
    let mut worst = report.max_rel_err();
    let (_, saved) = layer.forward(&x, mode).map_err(err)?;
    let dx = layer.backward(saved, &w).map_err(err)?;
    let h = 1e-5;
    let floor = 1e-4 * dx.max_abs() + 1e-12;
    for idx in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[idx] += h;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= h;
        let fp = weighted_sum(&layer.forward(&xp, mode).map_err(err)?.0, &w);
        let fm = weighted_sum(&layer.forward(&xm, mode).map_err(err)?.0, &w);
        let num = (fp - fm) / (2.0 * h);
        let a = dx.data()[idx];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
    }
    Ok(worst)
}

fn tiny_config(mode: TrainMode, output: OutputMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 2,
        batch_size: 2,
        seed: 5,
        data: DataConfig {
            seed: 77,
            duration: 0.015,
            sizes: SplitSizes {
                train: 4,
                valid: 2,
                test: 3,
            },
            ..DataConfig::default()
        },
        model: ModelConfig {
            num_sources: 2,
            encoder: EncoderConfig {
                num_bases: 4,
                ..EncoderConfig::default()
            },
            separator: SeparatorConfig {
                bottleneck: 6,
                block_channels: 8,
                kernel: 3,
                num_blocks: 2,
                num_repeats: 1,
                output,
            },
        },
        ..TrainConfig::for_mode(mode)
    }
}

type Objective = fn(&mut System<f64>, &Batch<f64>, bool) -> latentsep::Result<StepStats>;

fn composite_error(mode: TrainMode, output: OutputMode, f: Objective, bank: &SourceBank) -> Result<f64, String> {
    let cfg = tiny_config(mode, output);
    let mut sys = System::<f64>::new(cfg.model_manifest(), 3).map_err(err)?;
    if mode.is_step2() {
        sys.attach_separator(cfg.separator(), 3).map_err(err)?;
        sys.encoder.set_trainable(false);
        sys.decoder.set_trainable(false);
    }
    let mut r = RngStream::new(4);
    if let Some(sep) = sys.separator.as_mut() {
        for p in sep.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.1 * r.normal());
        }
    }
    let examples: Vec<MixtureExample> = make_split(&cfg.data.manifest(Split::Valid), bank)
        .collect::<latentsep::Result<_>>()
        .map_err(err)?;
    let batch = Batch::new(&examples.iter().collect::<Vec<_>>()).map_err(err)?;
    let report = grad_check(
        &mut sys,
        |s: &mut System<f64>, g| Ok(f(s, &batch, g)?.loss),
        GradCheckConfig {
            h: 1e-6,
            max_elems_per_param: 6,
        },
    )
    .map_err(err)?;
    Ok(report.max_rel_err())
}

fn c3_gradients(ctx: &mut Ctx) -> Outcome {
    let layers: Vec<(&str, LayerSpec, Vec<usize>, Mode)> = vec![
        (
            "conv1d",
            LayerSpec::Conv1d {
                in_channels: 2,
                out_channels: 3,
                kernel: 5,
                stride: 2,
                dilation: 2,
                padding: 1,
                bias: true,
            },
            vec![2, 2, 23],
            Mode::Train,
        ),
        (
            "transposed_conv1d",
            LayerSpec::TransposedConv1d {
                in_channels: 3,
                out_channels: 2,
                kernel: 5,
                stride: 2,
                bias: true,
            },
            vec![2, 3, 7],
            Mode::Train,
        ),
        (
            "depthwise_dilated",
            LayerSpec::DepthwiseDilatedConv1d {
                channels: 3,
                kernel: 3,
                dilation: 4,
                bias: true,
            },
            vec![2, 3, 13],
            Mode::Train,
        ),
        (
            "pointwise",
            LayerSpec::PointwiseConv1d {
                in_channels: 4,
                out_channels: 3,
                bias: true,
            },
            vec![2, 4, 6],
            Mode::Train,
        ),
        ("relu", LayerSpec::Relu, vec![2, 3, 9], Mode::Train),
        ("prelu", LayerSpec::Prelu { num_parameters: 3 }, vec![2, 3, 9], Mode::Train),
        ("softmax", LayerSpec::SoftmaxOverSources { sources: 3 }, vec![2, 6, 5], Mode::Train),
        ("gln", LayerSpec::GlobalLayerNorm { channels: 3 }, vec![2, 3, 8], Mode::Train),
        ("bn_train", LayerSpec::BatchNorm1d { channels: 3 }, vec![3, 3, 6], Mode::Train),
        ("bn_eval", LayerSpec::BatchNorm1d { channels: 3 }, vec![3, 3, 6], Mode::Eval),
        (
            "dense",
            LayerSpec::Dense {
                in_features: 5,
                out_features: 3,
                bias: true,
            },
            vec![2, 4, 5],
            Mode::Train,
        ),
    ];
    let mut layer_worst = (0.0f64, "");
    for (name, spec, shape, mode) in layers {
        let e = layer_error(spec, &shape, mode)?;
        if e > layer_worst.0 {
            layer_worst = (e, name);
        }
    }
    let composites: [(&str, TrainMode, OutputMode, Objective); 4] = [
        ("step1 time", TrainMode::Step1, OutputMode::Latent, step1_objective),
        ("e2e time", TrainMode::E2e, OutputMode::Latent, e2e_objective),
        ("step2 latent", TrainMode::Step2Latent, OutputMode::Latent, step2_objective),
        ("step2 mask", TrainMode::Step2Mask, OutputMode::Mask, step2_objective),
    ];
    let mut comp_worst = (0.0f64, "");
    for (name, mode, output, f) in composites {
        let e = composite_error(mode, output, f, &ctx.bank)?;
        if e > comp_worst.0 {
            comp_worst = (e, name);
        }
    }
    check(
        layer_worst.0 < 1e-5 && comp_worst.0 < 1e-4,
        format!(
            "layers max rel err {:.2e} ({}; < 1e-5), composites {:.2e} ({}; < 1e-4)",
            layer_worst.0, layer_worst.1, comp_worst.0, comp_worst.1
        ),
    )
}

fn orthonormal(n: usize, d: usize, rng: &mut RngStream) -> Result<Tensor<f64>, String> {
    let g = Tensor::<f64>::randn([n, d], rng);
    let s = svd(&g).map_err(err)?;
    let v = s.v.transpose().map_err(err)?;
    latentsep::numcore::matmul(&s.u, &v).map_err(err)
}

fn c4_prop1(_: &mut Ctx) -> Outcome {
    let mut rng = RngStream::new(404);
    let (n, d) = (24, 16);
    let ortho = orthonormal(n, d, &mut rng)?;
    let gauss = Tensor::<f64>::randn([n, d], &mut rng).scale(1.0 / (n as f64).sqrt());
    let q1 = orthonormal(n, d, &mut rng)?;
    let q2 = orthonormal(d, d, &mut rng)?;
    let sigma: Vec<f64> = (0..d).map(|i| 10f64.powf(-7.0 * i as f64 / (d - 1) as f64)).collect();
    let scaled = Tensor::from_fn([n, d], |k| q1.data()[k] * sigma[k % d]);
    let ill = latentsep::numcore::matmul(&scaled, &q2).map_err(err)?;
    let cond = {
        let s = svd(&ill).map_err(err)?;
        s.s.iter().cloned().fold(0.0, f64::max) / s.s.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let mut parts = Vec::new();
    let mut violations = 0;
    for (name, a) in [("orthonormal", &ortho), ("gaussian", &gauss), ("ill-conditioned", &ill)] {
        let s = BoundSummary::of(&check_prop1(a, 1000, &mut rng).map_err(err)?);
        violations += s.violations;
        parts.push(format!("{name} {}/{} min slack {:.2e}", s.violations, s.trials, s.min_slack));
    }
    let g_identity = g_of(&Tensor::eye(d)).map_err(err)?;
    check(
        violations == 0 && g_identity == 0.0 && cond > 1e6,
        format!("violations: {}; κ {cond:.1e}; g(I) = {g_identity}", parts.join(", ")),
    )
}

fn c5_prop2(_: &mut Ctx) -> Outcome {
    let r = check_prop2(64, 50, 100, &mut RngStream::new(505)).map_err(err)?;
    check(
        r.agreements == r.trials && r.trials == 100,
        format!("{}/{} trials agree", r.agreements, r.trials),
    )
}

fn rel_dist(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn c6_decoder(ctx: &mut Ctx) -> Outcome {
    let sys = match &ctx.step1 {
        Some((path, _)) => load_system::<f64>(path).map_err(err)?.0,
        None => {
            let cfg = TrainConfig::default();
            System::<f32>::new(cfg.model_manifest(), 6)
                .and_then(|s| s.cast::<f64>())
                .map_err(err)?
        }
    };
    let enc = *sys.decoder.config();
    let (frames, bases) = (12, enc.num_bases);
    let len = (frames - 1) * enc.hop + enc.kernel;
    let mut rng = RngStream::new(606);
    let decode = |v: &Tensor<f64>| -> Result<Vec<f64>, String> {
        let v = v.clone().reshape([1, bases, frames]).map_err(err)?;
        Ok(sys.decoder.decode(&v, len).map_err(err)?.into_data())
    };
    let mut superposition = 0.0f64;
    for _ in 0..20 {
        let (a, b) = (rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0));
        let v1 = Tensor::<f64>::randn([bases, frames], &mut rng);
        let v2 = Tensor::<f64>::randn([bases, frames], &mut rng);
        let combined = decode(&v1.scale(a).add(&v2.scale(b)).map_err(err)?)?;
        let separate: Vec<f64> = decode(&v1)?
            .iter()
            .zip(decode(&v2)?)
            .map(|(x, y)| a * x + b * y)
            .collect();
        superposition = superposition.max(rel_dist(&combined, &separate));
    }
    let p = materialize_decoder(&sys.decoder, frames, len).map_err(err)?;
    let mut matrix_err = 0.0f64;
    for _ in 0..20 {
        let v = Tensor::<f64>::randn([bases, frames], &mut rng);
        let pv: Vec<f64> = (0..len)
            .map(|t| (0..bases * frames).map(|j| p.at2(t, j) * v.data()[j]).sum())
            .collect();
        matrix_err = matrix_err.max(rel_dist(&pv, &decode(&v)?));
    }
    let filters = sys.decoder.filters();
    let mut band_errors = 0;
    for k in 0..bases {
        for f in 0..frames {
            let j = k * frames + f;
            for t in 0..len {
                let inside = t >= f * enc.hop && t < f * enc.hop + enc.kernel;
                let expect = if inside {
                    filters.data()[k * enc.kernel + t - f * enc.hop]
                } else {
                    0.0
                };
                band_errors += (p.at2(t, j) != expect) as usize;
            }
        }
    }
    check(
        superposition < 1e-5 && matrix_err < 1e-5 && band_errors == 0,
        format!(
            "superposition {superposition:.2e}, ‖Pv − decode(v)‖ rel {matrix_err:.2e}, \
             {band_errors} entries off the kernel band ({len}×{} P)",
            bases * frames
        ),
    )
}

fn step1_config() -> TrainConfig {
    TrainConfig {
        epochs: STEP1_EPOCHS,
        lr: STEP1_LR,
        lr_drop_epoch: Some(STEP1_DROP),
        ..TrainConfig::for_mode(TrainMode::Step1)
    }
}

fn test_split(data: &DataConfig, bank: &SourceBank, count: usize) -> Result<Vec<MixtureExample>, String> {
    let mut m = data.manifest(Split::Test);
    m.size = m.size.min(count);
    make_split(&m, bank).collect::<latentsep::Result<_>>().map_err(err)
}

fn ensure_step1(ctx: &mut Ctx) -> Result<(PathBuf, f64), String> {
    if let Some(s) = &ctx.step1 {
        return Ok(s.clone());
    }
    let cfg = step1_config();
    let out = train_step1::<f32>(&cfg, &ctx.bank, &ctx.root.join("step1")).map_err(err)?;
    let entry = (out.best_ckpt.clone(), out.best_metric);
    ctx.step1 = Some(entry.clone());
    Ok(entry)
}

fn c8_step1(ctx: &mut Ctx) -> Outcome {
    let (ckpt, valid) = ensure_step1(ctx)?;
    let cfg = step1_config();
    let (codec, _) = load_system::<f32>(&ckpt).map_err(err)?;
    let test = test_split(&cfg.data, &ctx.bank, usize::MAX)?;
    let report = evaluate(
        &EvalInputs {
            systems: vec![],
            codec: Some(&codec),
            e2e: None,
            config_hash: cfg.hash(),
        },
        &test,
    )
    .map_err(err)?;
    let latent = report.oracle_latent.as_ref().map(|s| s.mean).unwrap_or(f64::NAN);
    let irm = report.oracle_irm.mean;
    fs::write(
        ctx.root.join("step1_eval.json"),
        serde_json::to_string_pretty(&report).map_err(err)?,
    )
    .map_err(err)?;
    check(
        latent >= irm + 3.0,
        format!(
            "test oracle latent-mask SI-SDRi {latent:.2} dB vs STFT IRM {irm:.2} dB \
             (margin {:.2}, need ≥ 3); valid {valid:.2} dB after {STEP1_EPOCHS} epochs",
            latent - irm
        ),
    )
}

fn c7_latent_bound(ctx: &mut Ctx) -> Outcome {
    let (ckpt, _) = ensure_step1(ctx)?;
    let start = Instant::now();
    let (sys, _) = load_system::<f64>(&ckpt).map_err(err)?;
    let cfg = step1_config();
    let test = test_split(&cfg.data, &ctx.bank, usize::MAX)?;
    let mut oracle = Vec::new();
    for ex in &test {
        let est = sys.oracle_separate(&ex.mixture, &ex.sources).map_err(err)?;
        let t: Vec<&[f32]> = ex.sources.iter().map(|s| s.samples()).collect();
        let e: Vec<&[f32]> = est.iter().map(|s| s.samples()).collect();
        oracle.push(pit_si_sdr(&t, &e).map_err(err)?.mean_value);
    }
    let oracle_mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
    let mut segments = Vec::new();
    for ex in &test {
        let seg = segment_example(ex, 2000, 401).map_err(err)?;
        if seg.sources.iter().all(|s| s.energy() > 1e-6) {
            segments.push(seg);
        }
        if segments.len() == 10 {
            break;
        }
    }
    let estimator = LatentEstimator::Perturb {
        min_rel: 1e-3,
        max_rel: 3.0,
        trials: 25,
    };
    let report = check_latent_bound(&sys, &segments, estimator, &mut RngStream::new(707)).map_err(err)?;
    let s = report.summary();
    fs::write(ctx.root.join("latent_bound.json"), serde_json::to_string_pretty(&s).map_err(err)?).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.trials.len() == 500
            && s.normalized.violations == 0
            && s.projected.violations == 0
            && oracle_mean >= 15.0
            && secs < 120.0,
        format!(
            "{} trials ({} skipped), violations normalized {} projected {}; g(P†) {:.3e}; \
             oracle-mask SI-SDR {oracle_mean:.2} dB (≥ 15); certification {secs:.1} s",
            report.trials.len(),
            report.skipped,
            s.normalized.violations,
            s.projected.violations,
            s.g_pinv
        ),
    )
}

fn paired_base(mode: TrainMode, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::for_mode(mode);
    c.seed = seed;
    c.epochs = PAIRED_EPOCHS;
    c.lr_drop_epoch = Some(PAIRED_DROP);
    c.data.duration = 0.5;
    c.data.sizes = SplitSizes {
        train: 256,
        valid: 64,
        test: 128,
    };
    c
}

fn ensure_paired(ctx: &mut Ctx) -> Result<(), String> {
    if ctx.paired.is_some() {
        return Ok(());
    }
    let (codec, _) = ensure_step1(ctx)?;
    let mut runs = Vec::new();
    for seed in PAIRED_SEEDS {
        let mut two_cfg = paired_base(TrainMode::Step2Latent, seed);
        two_cfg.step1_ckpt = Some(codec.clone());
        let two = train_step2::<f32>(&two_cfg, &ctx.bank, &ctx.root.join(format!("two_step_{seed}"))).map_err(err)?;
        let e2e_cfg = paired_base(TrainMode::E2e, seed);
        let e2e = train_e2e::<f32>(&e2e_cfg, &ctx.bank, &ctx.root.join(format!("e2e_{seed}"))).map_err(err)?;
        let test = test_split(&e2e_cfg.data, &ctx.bank, usize::MAX)?;
        let report = evaluate(
            &EvalInputs {
                systems: vec![("two_step".into(), &two.system), ("e2e".into(), &e2e.system)],
                codec: None,
                e2e: None,
                config_hash: e2e_cfg.hash(),
            },
            &test,
        )
        .map_err(err)?;
        runs.push(PairedRun {
            seed,
            two_step: report.systems["two_step"].mean,
            e2e: report.systems["e2e"].mean,
            e2e_ckpt: e2e.best_ckpt,
        });
    }
    ctx.paired = Some(runs);
    Ok(())
}

fn c9_paired(ctx: &mut Ctx) -> Outcome {
    ensure_paired(ctx)?;
    let runs = ctx.paired.as_ref().expect("paired runs");
    let n = runs.len() as f64;
    let two = runs.iter().map(|r| r.two_step).sum::<f64>() / n;
    let e2e = runs.iter().map(|r| r.e2e).sum::<f64>() / n;
    let diff = runs.iter().map(|r| r.two_step - r.e2e).sum::<f64>() / n;
    let per: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.2}/{:.2}", r.seed, r.two_step, r.e2e))
        .collect();
    check(
        two >= e2e - 0.1 && diff >= 0.0,
        format!(
            "two-step {two:.2} dB vs e2e {e2e:.2} dB, paired mean difference {diff:+.2} dB [{}]",
            per.join(", ")
        ),
    )
}

fn c10_sparsity(ctx: &mut Ctx) -> Outcome {
    ensure_paired(ctx)?;
    let (codec_path, _) = ensure_step1(ctx)?;
    let start = Instant::now();
    let e2e_path = ctx.paired.as_ref().expect("paired runs")[0].e2e_ckpt.clone();
    let (codec, _) = load_system::<f32>(&codec_path).map_err(err)?;
    let (e2e, _) = load_system::<f32>(&e2e_path).map_err(err)?;
    let test = test_split(&step1_config().data, &ctx.bank, 100)?;
    let step1_l1 = mean_latent_l1(&codec, &test).map_err(err)?;
    let e2e_l1 = mean_latent_l1(&e2e, &test).map_err(err)?;
    let step1_ratio = mean_l1_over_l2(&codec, &test)?;
    let e2e_ratio = mean_l1_over_l2(&e2e, &test)?;
    let secs = start.elapsed().as_secs_f64();
    check(
        test.len() == 100 && step1_l1 < e2e_l1 && secs < 60.0,
        format!(
            "mean ‖E(x)‖₁ step-1 {step1_l1:.2} vs e2e {e2e_l1:.2} (ratio {:.2}) on {} mixtures in {secs:.1} s; \
             scale-free ‖E(x)‖₁/‖E(x)‖₂ step-1 {step1_ratio:.1} vs e2e {e2e_ratio:.1} (not scored)",
            e2e_l1 / step1_l1,
            test.len()
        ),
    )
}

fn mean_l1_over_l2(sys: &System<f32>, examples: &[MixtureExample]) -> Result<f64, String> {
    let mut total = 0.0;
    for ex in examples {
        let v = sys.encode(&ex.mixture).map_err(err)?;
        let l1: f64 = v.data().iter().map(|x| (*x as f64).abs()).sum();
        let l2: f64 = v.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        total += l1 / l2;
    }
    Ok(total / examples.len() as f64)
}

fn split_digest(data: &DataConfig, split: Split, bank: &SourceBank) -> Result<String, String> {
    let mut h = Sha256::new();
    for ex in make_split(&data.manifest(split), bank) {
        let ex = ex.map_err(err)?;
        for w in std::iter::once(&ex.mixture).chain(&ex.sources) {
            for s in w.samples() {
                h.update(s.to_le_bytes());
            }
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn files_equal(a: &Path, b: &Path) -> Result<bool, String> {
    Ok(fs::read(a).map_err(err)? == fs::read(b).map_err(err)?)
}

fn c11_reproducibility(ctx: &mut Ctx) -> Outcome {
    let mut cfg = tiny_config(TrainMode::E2e, OutputMode::Latent);
    cfg.data.duration = 0.05;
    let (a_dir, b_dir) = (ctx.root.join("repro_a"), ctx.root.join("repro_b"));
    let a = train_e2e::<f32>(&cfg, &ctx.bank, &a_dir).map_err(err)?;
    let b = train_e2e::<f32>(&cfg, &ctx.bank, &b_dir).map_err(err)?;
    let mut identical = a.best_epoch == b.best_epoch;
    for name in ["best.json", "best.bin", "last.json", "last.bin"] {
        identical &= files_equal(&a_dir.join(name), &b_dir.join(name))?;
    }

    let loaded = Checkpoint::load(&a.last_ckpt).map_err(err)?;
    let resaved = ctx.root.join("repro_resaved").join("last.json");
    fs::create_dir_all(resaved.parent().expect("parent")).map_err(err)?;
    loaded.save(&resaved).map_err(err)?;
    let reloaded = Checkpoint::load(&resaved).map_err(err)?;
    let (sys, _) = load_system::<f32>(&resaved).map_err(err)?;
    let bits = |s: &System<f32>| -> Vec<u32> {
        s.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
    };
    let original = load_system::<f32>(&b.last_ckpt).map_err(err)?.0;
    let round_trip = reloaded == loaded && bits(&sys) == bits(&original) && reloaded.blob() == loaded.blob();

    let data = DataConfig::default();
    let valid = split_digest(&data, Split::Valid, &ctx.bank)?;
    let test = split_digest(&data, Split::Test, &ctx.bank)?;
    let again = split_digest(&data, Split::Test, &ctx.bank)?;
    let pinned = valid == PINNED_VALID_DIGEST && test == PINNED_TEST_DIGEST && again == test;
    check(
        identical && round_trip && pinned,
        format!(
            "training bit-identical: {identical}; checkpoint round trip: {round_trip}; \
             split digests valid {}… test {}… match pins: {pinned}",
            &valid[..12],
            &test[..12]
        ),
    )
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}

fn c12_generator(ctx: &mut Ctx) -> Outcome {
    let m = DatasetManifest::new(Split::Train, 10_000, 1212, 0.01);
    let snrs: Vec<f64> = make_split(&m, &ctx.bank)
        .map(|e| e.map(|e| e.snr_db))
        .collect::<latentsep::Result<_>>()
        .map_err(err)?;
    let ks = ks_uniform(&snrs, -SNR_RANGE_DB, SNR_RANGE_DB);
    let in_range = snrs.iter().all(|s| s.abs() <= SNR_RANGE_DB);

    let mut rng = RngStream::new(1213);
    let mut worst = 0.0f64;
    let synths: Vec<_> = ctx
        .bank
        .classes
        .iter()
        .filter_map(|c| match &c.kind {
            SourceKind::Synthetic(s) => Some(s.clone()),
            _ => None,
        })
        .collect();
    for i in 0..synths.len() {
        let j = (i + 1 + rng.below(synths.len() - 1)) % synths.len();
        let a = synths[i].render(8000, 8000, &mut rng);
        let b = synths[j].render(8000, 8000, &mut rng);
        let (_, src) = mix_at_snr(&a, &b, 0.0, 8000).map_err(err)?;
        worst = worst.max((power(src[0].samples()) / power(src[1].samples()) - 1.0).abs());
    }
    check(
        ks.p_value > 0.01 && in_range && snrs.len() == 10_000 && worst < 1e-6,
        format!(
            "KS D {:.4} p {:.3} over {} draws (> 0.01); 0 dB power ratio error {worst:.2e} (< 1e-6)",
            ks.statistic,
            ks.p_value,
            snrs.len()
        ),
    )
}
