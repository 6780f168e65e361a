//! Frequency/bin mapping and classification targets.
//!
//! Formant frequencies are quantized onto the spectrogram's frequency grid so
//! the heatmap rows and spectrogram rows share one coordinate system: bin `b`
//! covers `[(b - 0.5) * w, (b + 0.5) * w)` and maps back to its center `b * w`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::SignalConfig;
use crate::error::{Error, Result};

/// Frequency grid shared by spectrogram rows and heatmap rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinSpec {
    /// Width of one bin in Hz (sample_rate / fft_size).
    pub bin_width: f64,
    pub num_bins: usize,
    /// Highest representable frequency in Hz.
    pub max_hz: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self::canonical()
    }
}

impl BinSpec {
    /// Canonical grid: 31.25 Hz bins, 257 of them, up to 8 kHz.
    pub fn canonical() -> Self {
        Self {
            bin_width: 31.25,
            num_bins: 257,
            max_hz: 8000.0,
        }
    }

    pub fn from_signal(cfg: &SignalConfig) -> Self {
        let bin_width = cfg.sample_rate as f64 / cfg.geometry.fft_size as f64;
        Self {
            bin_width,
            num_bins: cfg.geometry.num_bins(),
            max_hz: cfg.sample_rate as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.bin_width <= 0.0 {
            problems.push(format!("bin_width must be > 0, got {}", self.bin_width));
        }
        if self.num_bins == 0 {
            problems.push("num_bins must be > 0".into());
        }
        if (self.num_bins as f64) * self.bin_width < self.max_hz {
            problems.push(format!(
                "num_bins * bin_width = {} does not cover max_hz = {}",
                self.num_bins as f64 * self.bin_width,
                self.max_hz
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Per-frame formant annotations or predictions, `T x K` in Hz, with a
/// validity mask marking which entries carry usable values.
#[derive(Debug, Clone, PartialEq)]
pub struct FormantTrack {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl FormantTrack {
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::shape(
                "formant track mask",
                format!("{:?}", values.dim()),
                format!("{:?}", valid.dim()),
            ));
        }
        Ok(Self { values, valid })
    }

    /// All entries valid, one constant formant vector per frame.
    pub fn constant(formants: &[f64], num_frames: usize) -> Self {
        let k = formants.len();
        let mut values = Array2::zeros((num_frames, k));
        for t in 0..num_frames {
            for (j, &f) in formants.iter().enumerate() {
                values[(t, j)] = f;
            }
        }
        Self {
            valid: Array2::from_elem((num_frames, k), true),
            values,
        }
    }

    pub fn invalid(num_frames: usize, num_formants: usize) -> Self {
        Self {
            values: Array2::zeros((num_frames, num_formants)),
            valid: Array2::from_elem((num_frames, num_formants), false),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_formants(&self) -> usize {
        self.values.ncols()
    }

    /// Checks range and ordering invariants: valid entries lie in
    /// `(0, max_hz]`, and fully annotated frames are strictly increasing.
    pub fn check_invariants(&self, max_hz: f64) -> Result<()> {
        for t in 0..self.num_frames() {
            for k in 0..self.num_formants() {
                if self.valid[(t, k)] {
                    let f = self.values[(t, k)];
                    if !(f > 0.0 && f <= max_hz) {
                        return Err(Error::FrequencyOutOfRange { hz: f, max_hz });
                    }
                }
            }
            let all_valid = (0..self.num_formants()).all(|k| self.valid[(t, k)]);
            if all_valid {
                for k in 1..self.num_formants() {
                    if self.values[(t, k)] <= self.values[(t, k - 1)] {
                        return Err(Error::InvalidArgument(format!(
                            "frame {t}: formants not strictly increasing"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Smoothed classification targets: one `D x T` map per formant plus an
/// inclusion mask; excluded columns contribute nothing to the loss.
#[derive(Debug, Clone)]
pub struct TargetHeatmapSet {
    pub targets: Vec<Array2<f32>>,
    /// `(t, k)` is true when that column carries a supervised target.
    pub included: Array2<bool>,
    pub smoothing_epsilon: f64,
}

impl TargetHeatmapSet {
    pub fn num_frames(&self) -> usize {
        self.included.nrows()
    }

    pub fn num_heads(&self) -> usize {
        self.targets.len()
    }
}

/// Maps a frequency to its nearest bin index.
pub fn quantize(f: f64, spec: &BinSpec) -> Result<usize> {
    if !f.is_finite() || f < 0.0 || f > spec.max_hz {
        return Err(Error::FrequencyOutOfRange {
            hz: f,
            max_hz: spec.max_hz,
        });
    }
    let bin = (f / spec.bin_width).round() as usize;
    Ok(bin.min(spec.num_bins - 1))
}

/// Maps a bin index back to its center frequency.
pub fn dequantize(b: usize, spec: &BinSpec) -> Result<f64> {
    if b >= spec.num_bins {
        return Err(Error::BinOutOfRange {
            index: b,
            num_bins: spec.num_bins,
        });
    }
    Ok(b as f64 * spec.bin_width)
}

/// Builds label-smoothed per-formant target heatmaps.
///
/// Each valid `(t, k)` column gets `1 - epsilon` on the quantized bin plus
/// `epsilon / num_bins` spread uniformly; invalid columns are zeroed and
/// marked excluded.
pub fn make_targets(track: &FormantTrack, spec: &BinSpec, epsilon: f64) -> Result<TargetHeatmapSet> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "smoothing epsilon must be in [0, 1), got {epsilon}"
        )));
    }
    let (num_frames, num_heads) = track.values.dim();
    let base = (epsilon / spec.num_bins as f64) as f32;
    let peak_add = (1.0 - epsilon) as f32;

    let mut targets = Vec::with_capacity(num_heads);
    let mut included = Array2::from_elem((num_frames, num_heads), false);
    for k in 0..num_heads {
        let mut map = Array2::<f32>::zeros((spec.num_bins, num_frames));
        for t in 0..num_frames {
            if !track.valid[(t, k)] {
                continue;
            }
            let bin = quantize(track.values[(t, k)], spec)?;
            for d in 0..spec.num_bins {
                map[(d, t)] = base;
            }
            map[(bin, t)] += peak_add;
            included[(t, k)] = true;
        }
        targets.push(map);
    }
    Ok(TargetHeatmapSet {
        targets,
        included,
        smoothing_epsilon: epsilon,
    })
}
