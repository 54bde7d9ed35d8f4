//! Time-domain waveforms, Hann-window STFT/iSTFT, the ideal-ratio-mask
//! oracle and mono WAV I/O.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
/// 64 ms at 8 kHz.
pub const DEFAULT_WINDOW: usize = 512;
/// 16 ms at 8 kHz.
pub const DEFAULT_HOP: usize = 128;
pub const IRM_EPS: f64 = 1e-12;

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("waveform must have at least one sample".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len.max(1)],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Rescales so that the peak equals `target` (no-op on silence).
    pub fn peak_normalized(&self, target: f32) -> Self {
        let p = self.peak();
        if p == 0.0 {
            self.clone()
        } else {
            self.scaled(target / p)
        }
    }

    /// Sub-range `[start, start + len)`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() || len == 0 {
            return Err(Error::Invalid(format!(
                "segment [{start}, {}) outside waveform of length {}",
                start + len,
                self.samples.len()
            )));
        }
        Self::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// One-sided complex spectrogram with centered, reflect-padded frames.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    window_len: usize,
    hop: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    /// Builds a spectrogram from frame-major bins.
    pub fn from_bins(
        window_len: usize,
        hop: usize,
        bins: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if bins == 0 || !data.len().is_multiple_of(bins) {
            return Err(Error::Invalid(format!(
                "{} bins do not tile {} values",
                bins,
                data.len()
            )));
        }
        Ok(Self {
            frames: data.len() / bins,
            bins,
            window_len,
            hop,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[Complex64] {
        &self.data[f * self.bins..(f + 1) * self.bins]
    }

    /// Elementwise real gain.
    pub fn masked(&self, mask: &[f64]) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::Shape {
                op: "Spectrogram::masked",
                left: vec![self.frames, self.bins],
                right: vec![mask.len()],
            });
        }
        Ok(Self {
            data: self.data.iter().zip(mask).map(|(c, &m)| c * m).collect(),
            ..self.clone()
        })
    }

    /// Signal energy recovered from the spectrogram: two-sided frame energy
    /// divided by `window_len` and by the steady-state overlap of the squared
    /// window. Matches `‖w‖²` when the signal vanishes within half a window
    /// of both ends (so reflect padding adds nothing).
    pub fn window_compensated_energy(&self) -> f64 {
        let n = self.window_len;
        let mut total = 0.0;
        for f in 0..self.frames {
            let fr = self.frame(f);
            for (k, c) in fr.iter().enumerate() {
                let w = if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 };
                total += w * c.norm_sqr();
            }
        }
        total / n as f64 / squared_window_overlap(n, self.hop)
    }
}

/// Mean of `Σ_k w²(n − k·hop)` over one hop period.
pub fn squared_window_overlap(window_len: usize, hop: usize) -> f64 {
    let w = hann(window_len);
    let mut acc = vec![0.0; hop];
    for (i, wi) in w.iter().enumerate() {
        acc[i % hop] += wi * wi;
    }
    acc.iter().sum::<f64>() / hop as f64
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i] as f64);
    }
    out.extend(x.iter().map(|&v| v as f64));
    for i in 0..pad {
        out.push(x[n - 2 - i] as f64);
    }
    out
}

/// Short-time Fourier transform with a periodic Hann window.
pub fn stft(w: &Waveform, window_len: usize, hop: usize) -> Result<Spectrogram> {
    if window_len == 0 || hop == 0 || hop > window_len {
        return Err(Error::Invalid(format!(
            "stft needs 0 < hop ≤ window_len, got hop {hop}, window {window_len}"
        )));
    }
    if window_len > w.len() {
        return Err(Error::Invalid(format!(
            "window of {window_len} samples exceeds signal length {}",
            w.len()
        )));
    }
    let pad = window_len / 2;
    let padded = reflect_pad(w.samples(), pad);
    let frames = 1 + (padded.len() - window_len) / hop;
    let bins = window_len / 2 + 1;
    let win = hann(window_len);
    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    let mut data = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * win[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        window_len,
        hop,
        data,
    })
}

/// Inverse STFT by windowed overlap-add, normalized by the summed squared
/// window, with the centering pad removed and the result cut or
/// zero-extended to `out_len`.
pub fn istft(s: &Spectrogram, out_len: usize, sample_rate: u32) -> Result<Waveform> {
    let n = s.window_len;
    if s.bins != n / 2 + 1 {
        return Err(Error::Invalid(format!(
            "spectrogram has {} bins, window {} needs {}",
            s.bins,
            n,
            n / 2 + 1
        )));
    }
    let pad = n / 2;
    let total = (s.frames.saturating_sub(1)) * s.hop + n;
    let win = hann(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut acc = vec![0.0f64; total];
    let mut wss = vec![0.0f64; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in 0..s.frames {
        let fr = s.frame(f);
        buf[..s.bins].copy_from_slice(fr);
        for k in s.bins..n {
            buf[k] = fr[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = f * s.hop;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * win[i];
            wss[start + i] += win[i] * win[i];
        }
    }
    let mut out = vec![0.0f32; out_len.max(1)];
    for (t, o) in out.iter_mut().enumerate().take(out_len) {
        let idx = t + pad;
        if idx < total && wss[idx] > 1e-10 {
            *o = (acc[idx] / wss[idx]) as f32;
        }
    }
    Waveform::new(out, sample_rate)
}

/// Convention for the ideal ratio mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrmKind {
    /// `|S_i| / Σ_j |S_j|`
    #[default]
    Magnitude,
    /// `|S_i|² / Σ_j |S_j|²`
    Power,
}

/// Per-source ideal ratio masks over the time-frequency grid.
pub fn irm_masks(source_specs: &[Spectrogram], kind: IrmKind) -> Result<Vec<Vec<f64>>> {
    let first = source_specs
        .first()
        .ok_or_else(|| Error::Invalid("no sources".into()))?;
    let cells = first.data.len();
    if source_specs.iter().any(|s| s.data.len() != cells) {
        return Err(Error::Invalid("source spectrograms differ in size".into()));
    }
    let mags: Vec<Vec<f64>> = source_specs
        .iter()
        .map(|s| {
            s.data
                .iter()
                .map(|c| match kind {
                    IrmKind::Magnitude => c.norm(),
                    IrmKind::Power => c.norm_sqr(),
                })
                .collect()
        })
        .collect();
    let mut den = vec![IRM_EPS; cells];
    for m in &mags {
        for (d, v) in den.iter_mut().zip(m) {
            *d += v;
        }
    }
    Ok(mags
        .into_iter()
        .map(|m| m.iter().zip(&den).map(|(v, d)| v / d).collect())
        .collect())
}

/// Oracle separation by ideal ratio masking of the mixture STFT.
pub fn irm_oracle_separate(
    mix: &Waveform,
    sources: &[Waveform],
    window_len: usize,
    hop: usize,
    kind: IrmKind,
) -> Result<Vec<Waveform>> {
    if sources.len() < 2 {
        return Err(Error::Invalid("IRM needs at least two sources".into()));
    }
    for s in sources {
        if s.len() != mix.len() || s.sample_rate() != mix.sample_rate() {
            return Err(Error::Invalid(format!(
                "source ({} samples @ {} Hz) does not match mixture ({} @ {} Hz)",
                s.len(),
                s.sample_rate(),
                mix.len(),
                mix.sample_rate()
            )));
        }
    }
    let mix_spec = stft(mix, window_len, hop)?;
    let specs = sources
        .iter()
        .map(|s| stft(s, window_len, hop))
        .collect::<Result<Vec<_>>>()?;
    irm_masks(&specs, kind)?
        .iter()
        .map(|m| istft(&mix_spec.masked(m)?, mix.len(), mix.sample_rate()))
        .collect()
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a mono PCM16 or float32 WAV. With `expected_rate`, a different
/// sample rate is an error; audio is never resampled.
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(wav_err(
                path,
                format!("sample rate {} Hz, expected {rate} Hz", spec.sample_rate),
            ));
        }
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(path, format!("unsupported encoding {fmt:?}/{bits} bits")))
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e))
}

pub fn write_wav(path: &Path, w: &Waveform, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in w.samples() {
        match format {
            WavFormat::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)
            }
            WavFormat::Float32 => writer.write_sample(s),
        }
        .map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
