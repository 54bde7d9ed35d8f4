//! Source banks and the augmented two-source mixture generator.
//!
//! Every example is a pure function of `(base seed, split, epoch, index)`:
//! validation and test splits are fixed forever, the training split is
//! regenerated for each epoch.

mod corpus;
mod synth;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use corpus::{ingest_wav_corpus, FileError, IngestReport, IngestRules};
pub use synth::{NoiseShape, Range, Synth};

use crate::error::{Error, Result};
use crate::numcore::RngStream;
use crate::signal::{Waveform, DEFAULT_SAMPLE_RATE};

/// Mixing SNRs are drawn uniformly from `[-SNR_RANGE_DB, SNR_RANGE_DB]`.
pub const SNR_RANGE_DB: f64 = 2.5;
/// Peak of every generated mixture.
pub const MIXTURE_PEAK: f32 = 0.9;
/// Linear fade applied to both ends of each source.
pub const FADE_SECONDS: f64 = 0.01;
pub const MAX_SILENT_RETRIES: usize = 10;
/// Sources whose mean power falls below this count as silent.
pub const SILENCE_POWER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x74_7261_696e,
            Split::Valid => 0x76_616c_6964,
            Split::Test => 0x7465_7374,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One recording available to a class, assigned to exactly one split.
#[derive(Debug, Clone, Serialize)]
pub struct RecordedFile {
    pub path: PathBuf,
    pub split: Split,
    pub num_samples: usize,
    #[serde(skip)]
    pub wave: Arc<Waveform>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic(Synth),
    Recorded { files: Vec<RecordedFile> },
}

#[derive(Debug, Clone, Serialize)]
pub struct SourceClass {
    pub class_id: String,
    pub kind: SourceKind,
}

impl SourceClass {
    pub fn synthetic(class_id: &str, synth: Synth) -> Self {
        Self {
            class_id: class_id.to_string(),
            kind: SourceKind::Synthetic(synth),
        }
    }

    /// Whether this class can produce material for `split`.
    pub fn available_in(&self, split: Split) -> bool {
        match &self.kind {
            SourceKind::Synthetic(_) => true,
            SourceKind::Recorded { files } => files.iter().any(|f| f.split == split),
        }
    }

    /// True when both classes could emit the same signal distribution:
    /// same synthesizer kind with every parameter range overlapping.
    pub fn conflicts_with(&self, other: &SourceClass) -> bool {
        match (&self.kind, &other.kind) {
            (SourceKind::Synthetic(a), SourceKind::Synthetic(b)) => {
                if a.kind() != b.kind() {
                    return false;
                }
                if let (
                    Synth::FilteredNoise { shape: sa, .. },
                    Synth::FilteredNoise { shape: sb, .. },
                ) = (a, b)
                {
                    if sa != sb {
                        return false;
                    }
                }
                a.ranges().iter().zip(b.ranges()).all(|(x, y)| x.overlaps(&y))
            }
            _ => false,
        }
    }

    /// Raw (un-normalized, un-faded) material of `len` samples.
    fn render(&self, split: Split, len: usize, sample_rate: u32, rng: &mut RngStream) -> Result<Vec<f64>> {
        match &self.kind {
            SourceKind::Synthetic(s) => Ok(s.render(len, sample_rate, rng)),
            SourceKind::Recorded { files } => {
                let pool: Vec<&RecordedFile> = files.iter().filter(|f| f.split == split).collect();
                if pool.is_empty() {
                    return Err(Error::Invalid(format!(
                        "class `{}` has no files in the {} split",
                        self.class_id,
                        split.name()
                    )));
                }
                let file = pool[rng.below(pool.len())];
                let samples = file.wave.samples();
                let start = if samples.len() > len { rng.below(samples.len() - len + 1) } else { 0 };
                let mut out: Vec<f64> = samples[start..(start + len).min(samples.len())]
                    .iter()
                    .map(|&s| s as f64)
                    .collect();
                out.resize(len, 0.0);
                Ok(out)
            }
        }
    }
}

/// Ordered collection of source classes.
#[derive(Debug, Clone, Serialize)]
pub struct SourceBank {
    pub classes: Vec<SourceClass>,
}

impl SourceBank {
    pub fn new(classes: Vec<SourceClass>) -> Result<Self> {
        let bank = Self { classes };
        bank.validate()?;
        Ok(bank)
    }

    /// Ten toy classes: two parameter regimes for each of the five
    /// synthesizers, with disjoint ranges inside each pair.
    pub fn synthetic() -> Self {
        use NoiseShape::{Highpass, Lowpass};
        let r = Range::new;
        Self {
            classes: vec![
                SourceClass::synthetic(
                    "tone_low",
                    Synth::SineComplex {
                        f0: r(100.0, 200.0),
                        max_harmonics: 8,
                    },
                ),
                SourceClass::synthetic(
                    "tone_high",
                    Synth::SineComplex {
                        f0: r(300.0, 600.0),
                        max_harmonics: 5,
                    },
                ),
                SourceClass::synthetic(
                    "chirp_up",
                    Synth::Chirp {
                        start: r(200.0, 500.0),
                        end: r(1500.0, 3000.0),
                    },
                ),
                SourceClass::synthetic(
                    "chirp_down",
                    Synth::Chirp {
                        start: r(2000.0, 3500.0),
                        end: r(300.0, 800.0),
                    },
                ),
                SourceClass::synthetic(
                    "am_band_low",
                    Synth::AmNoiseBand {
                        center: r(300.0, 700.0),
                        mod_rate: r(2.0, 6.0),
                    },
                ),
                SourceClass::synthetic(
                    "am_band_high",
                    Synth::AmNoiseBand {
                        center: r(1500.0, 3000.0),
                        mod_rate: r(7.0, 12.0),
                    },
                ),
                SourceClass::synthetic(
                    "clicks_slow",
                    Synth::PulseTrain {
                        rate: r(4.0, 10.0),
                        resonance: r(800.0, 1500.0),
                    },
                ),
                SourceClass::synthetic(
                    "clicks_fast",
                    Synth::PulseTrain {
                        rate: r(20.0, 50.0),
                        resonance: r(2000.0, 3000.0),
                    },
                ),
                SourceClass::synthetic(
                    "rumble",
                    Synth::FilteredNoise {
                        cutoff: r(150.0, 400.0),
                        shape: Lowpass,
                    },
                ),
                SourceClass::synthetic(
                    "hiss",
                    Synth::FilteredNoise {
                        cutoff: r(2500.0, 3500.0),
                        shape: Highpass,
                    },
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("a source bank needs at least two classes".into()));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.class_id == b.class_id {
                    return Err(Error::Config(format!("duplicate class id `{}`", a.class_id)));
                }
                if a.conflicts_with(b) {
                    return Err(Error::Config(format!(
                        "classes `{}` and `{}` share a synthesizer with overlapping parameters",
                        a.class_id, b.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, class_id: &str) -> Option<&SourceClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

/// A mixture, its constituent (rescaled) sources and how they were drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub snr_db: f64,
    pub class_ids: Vec<String>,
    pub seed: u64,
}

impl MixtureExample {
    pub fn source_refs(&self) -> Vec<&Waveform> {
        self.sources.iter().collect()
    }
}

fn apply_fades(x: &mut [f64], sample_rate: u32) {
    let n = ((FADE_SECONDS * sample_rate as f64) as usize).min(x.len() / 2);
    for i in 0..n {
        let g = i as f64 / n as f64;
        x[i] *= g;
        let j = x.len() - 1 - i;
        x[j] *= g;
    }
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Faded, unit-power source, retrying silent renders.
fn draw_source(class: &SourceClass, split: Split, len: usize, sample_rate: u32, rng: &mut RngStream) -> Result<Vec<f64>> {
    for _ in 0..MAX_SILENT_RETRIES {
        let mut x = class.render(split, len, sample_rate, rng)?;
        apply_fades(&mut x, sample_rate);
        let p = mean_power(&x);
        if p > SILENCE_POWER && p.is_finite() {
            let g = p.sqrt().recip();
            x.iter_mut().for_each(|v| *v *= g);
            return Ok(x);
        }
    }
    Err(Error::Invalid(format!(
        "class `{}` produced silence {MAX_SILENT_RETRIES} times in a row",
        class.class_id
    )))
}

/// Rescales the second source so that `10 log10(P1 / P2) = snr_db`, sums,
/// and applies one common gain so the mixture peaks at [`MIXTURE_PEAK`].
/// The stored mixture is the exact `f32` sum of the stored sources.
pub fn mix_at_snr(first: &[f64], second: &[f64], snr_db: f64, sample_rate: u32) -> Result<(Waveform, Vec<Waveform>)> {
    if first.len() != second.len() || first.is_empty() {
        return Err(Error::Invalid("sources must be non-empty and equally long".into()));
    }
    let (p1, p2) = (mean_power(first), mean_power(second));
    if p1 <= 0.0 || p2 <= 0.0 {
        return Err(Error::Invalid("cannot set an SNR against a silent source".into()));
    }
    let g2 = (p1 / p2 / 10f64.powf(snr_db / 10.0)).sqrt();
    let peak = first
        .iter()
        .zip(second)
        .fold(0.0f64, |m, (a, b)| m.max((a + g2 * b).abs()));
    let g = MIXTURE_PEAK as f64 / peak;
    let s1: Vec<f32> = first.iter().map(|v| (g * v) as f32).collect();
    let s2: Vec<f32> = second.iter().map(|v| (g * g2 * v) as f32).collect();
    let mix: Vec<f32> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
    Ok((
        Waveform::new(mix, sample_rate)?,
        vec![Waveform::new(s1, sample_rate)?, Waveform::new(s2, sample_rate)?],
    ))
}

/// Draws one two-source mixture from a pair of distinct classes.
pub fn generate_mixture(
    classes: (&SourceClass, &SourceClass),
    split: Split,
    duration: f64,
    sample_rate: u32,
    rng: &mut RngStream,
) -> Result<MixtureExample> {
    if classes.0.class_id == classes.1.class_id {
        return Err(Error::Invalid("mixture classes must be distinct".into()));
    }
    if !(duration > 0.0) || sample_rate == 0 {
        return Err(Error::Invalid(format!("duration {duration} s at {sample_rate} Hz")));
    }
    let seed = rng.seed();
    let len = (duration * sample_rate as f64).round().max(1.0) as usize;
    let a = draw_source(classes.0, split, len, sample_rate, rng)?;
    let b = draw_source(classes.1, split, len, sample_rate, rng)?;
    let snr_db = rng.uniform_range(-SNR_RANGE_DB, SNR_RANGE_DB);
    let (mixture, sources) = mix_at_snr(&a, &b, snr_db, sample_rate)?;
    Ok(MixtureExample {
        mixture,
        sources,
        snr_db,
        class_ids: vec![classes.0.class_id.clone(), classes.1.class_id.clone()],
        seed,
    })
}

/// Example counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 512,
            valid: 128,
            test: 128,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

impl std::str::FromStr for SplitSizes {
    type Err = Error;

    /// `"train,valid,test"`, e.g. `"512,128,128"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("split sizes `{s}`: {e}")))?;
        match parts[..] {
            [train, valid, test] => Ok(Self { train, valid, test }),
            _ => Err(Error::Config(format!("split sizes `{s}`: expected train,valid,test"))),
        }
    }
}

/// Which examples a split contains.
///
/// Train examples are keyed by `(seed, split, epoch, index)`; validation
/// and test examples by `(seed, split, index)`, so `epoch` is ignored for
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub size: usize,
    pub seed: u64,
    #[serde(default)]
    pub epoch: u64,
    pub duration: f64,
    pub sample_rate: u32,
}

impl DatasetManifest {
    pub fn new(split: Split, size: usize, seed: u64, duration: f64) -> Self {
        Self {
            split,
            size,
            seed,
            epoch: 0,
            duration,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }

    pub fn at_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config(format!("duration must be positive, got {}", self.duration)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn example_rng(&self, index: usize) -> RngStream {
        match self.split {
            Split::Train => RngStream::keyed(self.seed, &[self.split.tag(), self.epoch, index as u64]),
            _ => RngStream::keyed(self.seed, &[self.split.tag(), index as u64]),
        }
    }

    /// The `index`-th example, independent of every other index.
    pub fn example(&self, bank: &SourceBank, index: usize) -> Result<MixtureExample> {
        let mut rng = self.example_rng(index);
        let eligible: Vec<&SourceClass> = bank.classes.iter().filter(|c| c.available_in(self.split)).collect();
        if eligible.len() < 2 {
            return Err(Error::Config(format!(
                "fewer than two classes have material for the {} split",
                self.split.name()
            )));
        }
        let i = rng.below(eligible.len());
        let mut j = rng.below(eligible.len() - 1);
        if j >= i {
            j += 1;
        }
        generate_mixture((eligible[i], eligible[j]), self.split, self.duration, self.sample_rate, &mut rng)
    }
}

/// Enumerates a split in index order.
pub fn make_split<'a>(manifest: &'a DatasetManifest, bank: &'a SourceBank) -> impl Iterator<Item = Result<MixtureExample>> + 'a {
    (0..manifest.size).map(move |i| manifest.example(bank, i))
}

/// One-sample Kolmogorov-Smirnov test against the uniform law on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> KsResult {
    let mut u: Vec<f64> = samples.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
    }
}

/// `P(K > lambda)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
