//! Waveform handling and spectrogram extraction.
//!
//! Converts mono PCM audio into log-magnitude spectrograms with a fixed frame
//! geometry, applies the pre-emphasis filter, and performs the integer-factor
//! speed-up used by data augmentation. All functions here are pure; none hold
//! state between calls.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical sampling rate for every corpus this crate handles.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform: amplitude samples plus their sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    /// Builds a waveform, rejecting empty input, a zero rate, and non-finite samples.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Frame geometry shared by the spectrogram, the heatmaps, and the LPC baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeometry {
    /// FFT length in samples.
    pub fft_size: usize,
    /// Frame advance in samples.
    pub hop: usize,
    /// Analysis window length in samples.
    pub window_length: usize,
}

impl FrameGeometry {
    /// Canonical geometry: 512-point FFT, 10 ms hop, window equal to the FFT size.
    pub fn canonical() -> Self {
        Self {
            fft_size: 512,
            hop: 160,
            window_length: 512,
        }
    }

    /// Number of frequency bins, `fft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a waveform of `len` samples, or `None`
    /// when the waveform is shorter than one window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        if len < self.window_length {
            None
        } else {
            Some(1 + (len - self.window_length) / self.hop)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            problems.push(format!("fft_size must be a power of two, got {}", self.fft_size));
        }
        if self.hop == 0 {
            problems.push("hop must be > 0".into());
        }
        if self.hop > self.window_length {
            problems.push(format!(
                "hop ({}) must not exceed window_length ({})",
                self.hop, self.window_length
            ));
        }
        if self.window_length > self.fft_size {
            problems.push(format!(
                "window_length ({}) must not exceed fft_size ({})",
                self.window_length, self.fft_size
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Analysis window applied before the FFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1).max(1) as f64).cos())
                .collect(),
            WindowKind::Hamming => (0..len)
                .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1).max(1) as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

/// Everything needed to turn a waveform into a model-ready spectrogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub sample_rate: u32,
    pub geometry: FrameGeometry,
    pub window: WindowKind,
    /// Pre-emphasis coefficient applied upstream of the STFT.
    pub pre_emphasis: f64,
    /// Added to each magnitude before the log so silence stays finite.
    pub log_floor: f64,
    /// Standardize each spectrogram to zero mean, unit variance.
    pub standardize: bool,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            sample_rate: CANONICAL_SAMPLE_RATE,
            geometry: FrameGeometry::canonical(),
            window: WindowKind::Hann,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            standardize: true,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::InvalidConfig(mut ps)) = self.geometry.validate() {
            problems.append(&mut ps);
        }
        if self.sample_rate == 0 {
            problems.push("sample_rate must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            problems.push(format!(
                "pre_emphasis must be in [0, 1), got {}",
                self.pre_emphasis
            ));
        }
        if self.log_floor <= 0.0 {
            problems.push(format!("log_floor must be > 0, got {}", self.log_floor));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Log-magnitude spectrogram, `num_bins x num_frames`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// Row `d`, column `t` holds the log-magnitude of bin `d` in frame `t`.
    pub values: Array2<f32>,
    pub geometry: FrameGeometry,
    pub source_sample_rate: u32,
}

impl Spectrogram {
    pub fn num_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// First-order high-pass `out[t] = in[t] - coefficient * in[t-1]`, `out[0] = in[0]`.
pub fn pre_emphasize(w: &Waveform, coefficient: f64) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..1.0).contains(&coefficient) {
        return Err(Error::InvalidArgument(format!(
            "pre-emphasis coefficient must be in [0, 1), got {coefficient}"
        )));
    }
    let mut out = Vec::with_capacity(w.samples.len());
    out.push(w.samples[0]);
    for t in 1..w.samples.len() {
        out.push(w.samples[t] - coefficient * w.samples[t - 1]);
    }
    Ok(Waveform {
        samples: out,
        sample_rate: w.sample_rate,
    })
}

/// Short-time log-magnitude spectrogram.
///
/// Frame `t` covers samples `[t*hop, t*hop + window_length)`; each frame is
/// windowed, zero-padded to `fft_size`, transformed, and the magnitudes of the
/// non-negative-frequency bins are floored and logged. When
/// `cfg.standardize` is set the whole matrix is shifted and scaled to zero
/// mean and unit variance (a constant matrix is only shifted).
pub fn spectrogram(w: &Waveform, cfg: &SignalConfig) -> Result<Spectrogram> {
    let g = cfg.geometry;
    let num_frames = g.frame_count(w.len()).ok_or(Error::UtteranceTooShort {
        len: w.len(),
        min: g.window_length,
    })?;
    let num_bins = g.num_bins();
    let window = cfg.window.coefficients(g.window_length);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(g.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); g.fft_size];

    let mut values = Array2::<f32>::zeros((num_bins, num_frames));
    for t in 0..num_frames {
        let start = t * g.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = if i < g.window_length {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            *c = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for d in 0..num_bins {
            values[(d, t)] = (buf[d].norm() + cfg.log_floor).ln() as f32;
        }
    }

    if cfg.standardize {
        standardize_in_place(&mut values);
    }

    Ok(Spectrogram {
        values,
        geometry: g,
        source_sample_rate: w.sample_rate,
    })
}

fn standardize_in_place(values: &mut Array2<f32>) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std > 1e-12 {
        values.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
    } else {
        values.mapv_inplace(|v| (v as f64 - mean) as f32);
    }
}

/// Keeps every second sample. The nominal sample rate is left unchanged, so
/// every apparent frequency doubles; callers are responsible for rewriting
/// annotations accordingly.
pub fn speed_up_by_two(w: &Waveform) -> Result<Waveform> {
    if w.len() < 2 {
        return Err(Error::InvalidArgument(
            "speed-up needs at least 2 samples".into(),
        ));
    }
    let samples: Vec<f64> = w.samples.iter().step_by(2).copied().collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Reads a 16-bit PCM mono RIFF/WAVE file, rejecting any other layout.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::UnsupportedAudio(format!(
            "{}: expected {expected_rate} Hz, got {} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedAudio(format!(
            "{}: expected 16-bit integer PCM",
            path.display()
        )));
    }
    let samples: Vec<f64> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, expected_rate)
}

/// Writes a waveform as 16-bit PCM mono, clipping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::io(path, io_from_hound(e)))?;
    for &s in &w.samples {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::io(path, io_from_hound(e)))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::io(path, io_from_hound(e)))
}

fn io_from_hound(e: hound::Error) -> std::io::Error {
    match e {
        hound::Error::IoError(io) => io,
        other => std::io::Error::other(other.to_string()),
    }
}

/// Test helper: a pure sine tone.
pub fn sine(freq_hz: f64, duration_secs: f64, sample_rate: u32, amplitude: f64) -> Waveform {
    let n = (duration_secs * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| amplitude * (2.0 * PI * freq_hz * i as f64 / sample_rate as f64).sin())
        .collect();
    Waveform {
        samples,
        sample_rate,
    }
}
