//! Toy sound synthesizers standing in for recorded source classes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numcore::RngStream;

/// Closed parameter interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        rng.uniform_range(self.lo, self.hi)
    }

    pub fn overlaps(&self, other: &Range) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseShape {
    Lowpass,
    Highpass,
}

/// Parametric sound generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "synth", rename_all = "snake_case")]
pub enum Synth {
    /// Gated notes made of a fundamental and decaying harmonics.
    SineComplex { f0: Range, max_harmonics: usize },
    /// Repeated exponential frequency sweeps.
    Chirp { start: Range, end: Range },
    /// Band-passed noise under a slow sinusoidal amplitude envelope.
    AmNoiseBand { center: Range, mod_rate: Range },
    /// Jittered impulses exciting a resonator.
    PulseTrain { rate: Range, resonance: Range },
    /// White noise through a low- or high-pass filter.
    FilteredNoise { cutoff: Range, shape: NoiseShape },
}

impl Synth {
    pub fn kind(&self) -> &'static str {
        match self {
            Synth::SineComplex { .. } => "sine_complex",
            Synth::Chirp { .. } => "chirp",
            Synth::AmNoiseBand { .. } => "am_noise_band",
            Synth::PulseTrain { .. } => "pulse_train",
            Synth::FilteredNoise { .. } => "filtered_noise",
        }
    }

    /// Parameter ranges, in a fixed order per kind.
    pub fn ranges(&self) -> Vec<Range> {
        match *self {
            Synth::SineComplex { f0, .. } => vec![f0],
            Synth::Chirp { start, end } => vec![start, end],
            Synth::AmNoiseBand { center, mod_rate } => vec![center, mod_rate],
            Synth::PulseTrain { rate, resonance } => vec![rate, resonance],
            Synth::FilteredNoise { cutoff, .. } => vec![cutoff],
        }
    }

    /// `len` samples at `sample_rate`; not normalized.
    pub fn render(&self, len: usize, sample_rate: u32, rng: &mut RngStream) -> Vec<f64> {
        let sr = sample_rate as f64;
        let nyq = sr / 2.0;
        match *self {
            Synth::SineComplex { f0, max_harmonics } => {
                let f0 = f0.draw(rng);
                let harmonics = max_harmonics.min(((nyq * 0.9) / f0) as usize).max(1);
                let amps: Vec<f64> = (1..=harmonics).map(|h| rng.uniform_range(0.3, 1.0) / h as f64).collect();
                let phases: Vec<f64> = (0..harmonics).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect();
                let vib_rate = rng.uniform_range(3.0, 7.0);
                let vib_depth = rng.uniform_range(0.0, 0.02);
                let gate = note_gate(len, sr, rng);
                let mut phase = 0.0;
                (0..len)
                    .map(|n| {
                        let t = n as f64 / sr;
                        phase += 2.0 * PI * f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin()) / sr;
                        let s: f64 = amps
                            .iter()
                            .zip(&phases)
                            .enumerate()
                            .map(|(h, (a, p))| a * ((h + 1) as f64 * phase + p).sin())
                            .sum();
                        s * gate[n]
                    })
                    .collect()
            }
            Synth::Chirp { start, end } => {
                let (f1, f2) = (start.draw(rng).min(nyq * 0.95), end.draw(rng).min(nyq * 0.95));
                let period = rng.uniform_range(0.2, 0.5) * sr;
                let mut phase = rng.uniform_range(0.0, 2.0 * PI);
                (0..len)
                    .map(|n| {
                        let u = (n as f64 % period) / period;
                        let f = f1 * (f2 / f1).powf(u);
                        phase += 2.0 * PI * f / sr;
                        let env = (PI * u).sin().powf(0.5);
                        env * phase.sin()
                    })
                    .collect()
            }
            Synth::AmNoiseBand { center, mod_rate } => {
                let fc = center.draw(rng).min(nyq * 0.9);
                let fm = mod_rate.draw(rng);
                let ph = rng.uniform_range(0.0, 2.0 * PI);
                let mut bq = Biquad::bandpass(fc, 4.0, sr);
                (0..len)
                    .map(|n| {
                        let t = n as f64 / sr;
                        let x = bq.step(rng.normal());
                        x * (0.55 + 0.45 * (2.0 * PI * fm * t + ph).sin())
                    })
                    .collect()
            }
            Synth::PulseTrain { rate, resonance } => {
                let rate = rate.draw(rng);
                let fr = resonance.draw(rng).min(nyq * 0.9);
                let mut bq = Biquad::bandpass(fr, 12.0, sr);
                let mut next = rng.uniform_range(0.0, (sr / rate).min(len as f64 / 2.0));
                (0..len)
                    .map(|n| {
                        let mut x = 0.0;
                        if n as f64 >= next {
                            x = 1.0;
                            next += sr / rate * rng.uniform_range(0.8, 1.2);
                        }
                        bq.step(x)
                    })
                    .collect()
            }
            Synth::FilteredNoise { cutoff, shape } => {
                let fc = cutoff.draw(rng).min(nyq * 0.9);
                let mut bq = match shape {
                    NoiseShape::Lowpass => Biquad::lowpass(fc, 0.707, sr),
                    NoiseShape::Highpass => Biquad::highpass(fc, 0.707, sr),
                };
                // Settle the filter state before the rendered segment.
                for _ in 0..64 {
                    bq.step(rng.normal());
                }
                (0..len).map(|_| bq.step(rng.normal())).collect()
            }
        }
    }
}

/// On/off envelope of random notes (0.1–0.4 s) and gaps (0.02–0.15 s)
/// with 5 ms ramps; the first note starts within the first quarter.
fn note_gate(len: usize, sr: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut g = vec![0.0; len];
    let ramp = (0.005 * sr) as usize;
    let mut pos = (rng.uniform_range(0.0, 0.1f64.min(len as f64 / sr / 4.0)) * sr) as usize;
    while pos < len {
        let dur = (rng.uniform_range(0.1, 0.4) * sr) as usize;
        let end = (pos + dur).min(len);
        for (i, v) in g[pos..end].iter_mut().enumerate() {
            let rise = ((i + 1) as f64 / ramp as f64).min(1.0);
            let fall = ((end - pos - i) as f64 / ramp as f64).min(1.0);
            *v = rise.min(fall);
        }
        pos = end + (rng.uniform_range(0.02, 0.15) * sr) as usize;
    }
    g
}

/// Second-order IIR section with audio-EQ-cookbook coefficients.
#[derive(Debug, Clone)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    fn from(b: [f64; 3], a0: f64, a: [f64; 2]) -> Self {
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a[0] / a0, a[1] / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn terms(f: f64, q: f64, sr: f64) -> (f64, f64) {
        let w = 2.0 * PI * f / sr;
        (w.cos(), w.sin() / (2.0 * q))
    }

    fn bandpass(f: f64, q: f64, sr: f64) -> Self {
        let (c, alpha) = Self::terms(f, q, sr);
        Self::from([alpha, 0.0, -alpha], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    fn lowpass(f: f64, q: f64, sr: f64) -> Self {
        let (c, alpha) = Self::terms(f, q, sr);
        let b1 = 1.0 - c;
        Self::from([b1 / 2.0, b1, b1 / 2.0], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    fn highpass(f: f64, q: f64, sr: f64) -> Self {
        let (c, alpha) = Self::terms(f, q, sr);
        let b1 = 1.0 + c;
        Self::from([b1 / 2.0, -b1, b1 / 2.0], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1] - self.a[0] * self.y[0] - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}
