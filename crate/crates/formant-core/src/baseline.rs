//! Classical LPC formant estimator.
//!
//! All-pole modeling via the autocorrelation method and Levinson-Durbin,
//! with formant candidates read off the prediction polynomial's complex
//! roots. Serves as the non-learned comparator for the tracker and as an
//! independent oracle for the synthetic corpus.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{pre_emphasize, SignalConfig, Waveform};
use crate::error::{Error, Result};
use crate::quantizer::FormantTrack;

/// Knobs for the LPC analysis; the defaults are standard practice at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpcConfig {
    pub order: usize,
    /// Candidates below this frequency are discarded as pitch/DC artifacts.
    pub min_freq_hz: f64,
    /// Candidates broader than this are discarded as spectral tilt poles.
    pub max_bandwidth_hz: f64,
    /// Apply the shared pre-emphasis filter before analysis.
    pub use_pre_emphasis: bool,
    /// Frames with mean power below this are marked silent.
    pub silence_power: f64,
}

impl Default for LpcConfig {
    fn default() -> Self {
        Self {
            order: 12,
            min_freq_hz: 90.0,
            max_bandwidth_hz: 400.0,
            use_pre_emphasis: true,
            silence_power: 1e-10,
        }
    }
}

/// Autocorrelation-method LPC: returns predictor coefficients `a_1..a_p`
/// such that `x[n] ~ sum_i a_i * x[n-i]`.
pub fn lpc_coefficients(frame: &[f64], order: usize) -> Result<Vec<f64>> {
    if frame.is_empty() {
        return Err(Error::EmptyInput);
    }
    if order == 0 || order >= frame.len() {
        return Err(Error::InvalidArgument(format!(
            "LPC order {order} must be in [1, frame length {})",
            frame.len()
        )));
    }
    let r = autocorrelation(frame, order);
    if r[0] <= 0.0 {
        return Err(Error::SilentFrame);
    }
    levinson_durbin(&r, order)
}

/// Biased autocorrelation for lags `0..=max_lag`.
fn autocorrelation(frame: &[f64], max_lag: usize) -> Vec<f64> {
    let n = frame.len();
    (0..=max_lag)
        .map(|lag| (0..n - lag).map(|i| frame[i] * frame[i + lag]).sum())
        .collect()
}

/// Levinson-Durbin recursion on the Toeplitz normal equations.
fn levinson_durbin(r: &[f64], order: usize) -> Result<Vec<f64>> {
    let mut a = vec![0.0f64; order + 1];
    let mut err = r[0];
    for i in 1..=order {
        let mut acc = r[i];
        for j in 1..i {
            acc -= a[j] * r[i - j];
        }
        let k = acc / err;
        if !k.is_finite() {
            return Err(Error::SilentFrame);
        }
        let prev = a.clone();
        a[i] = k;
        for j in 1..i {
            a[j] = prev[j] - k * prev[i - j];
        }
        err *= 1.0 - k * k;
        if err <= 0.0 {
            // Perfectly predictable frame; the normal equations are singular.
            return Err(Error::SilentFrame);
        }
    }
    Ok(a[1..].to_vec())
}

/// One formant candidate read off a pole.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormantEstimate {
    pub frequency_hz: f64,
    pub bandwidth_hz: f64,
}

/// The `k` lowest surviving formant candidates, ascending; `valid[i]` is
/// false when fewer than `i + 1` candidates survived the filters.
#[derive(Debug, Clone)]
pub struct LpcFormants {
    pub estimates: Vec<FormantEstimate>,
    pub valid: Vec<bool>,
}

/// Extracts formants from predictor coefficients by rooting
/// `1 - sum_i a_i z^-i` via companion-matrix eigenvalues.
pub fn formants_from_lpc(coeffs: &[f64], sample_rate: u32, k: usize) -> LpcFormants {
    let fs = sample_rate as f64;
    let mut candidates: Vec<FormantEstimate> = polynomial_roots(coeffs)
        .into_iter()
        .filter(|z| z.im > 0.0)
        .filter_map(|z| {
            let radius = (z.re * z.re + z.im * z.im).sqrt();
            if radius <= 0.0 || radius >= 1.0 {
                return None;
            }
            let frequency_hz = z.im.atan2(z.re) * fs / (2.0 * std::f64::consts::PI);
            let bandwidth_hz = -radius.ln() * fs / std::f64::consts::PI;
            Some(FormantEstimate {
                frequency_hz,
                bandwidth_hz,
            })
        })
        .collect();
    candidates.sort_by(|a, b| a.frequency_hz.total_cmp(&b.frequency_hz));

    let mut estimates = Vec::with_capacity(k);
    let mut valid = Vec::with_capacity(k);
    for i in 0..k {
        match candidates.get(i) {
            Some(&e) => {
                estimates.push(e);
                valid.push(true);
            }
            None => {
                estimates.push(FormantEstimate {
                    frequency_hz: 0.0,
                    bandwidth_hz: 0.0,
                });
                valid.push(false);
            }
        }
    }
    LpcFormants { estimates, valid }
}

/// Applies the candidate filters from `cfg` before selecting the `k` lowest.
fn formants_filtered(coeffs: &[f64], sample_rate: u32, k: usize, cfg: &LpcConfig) -> LpcFormants {
    let all = formants_from_lpc(coeffs, sample_rate, coeffs.len());
    let surviving: Vec<FormantEstimate> = all
        .estimates
        .into_iter()
        .zip(all.valid)
        .filter(|(e, v)| {
            *v && e.frequency_hz >= cfg.min_freq_hz && e.bandwidth_hz <= cfg.max_bandwidth_hz
        })
        .map(|(e, _)| e)
        .collect();
    let mut estimates = Vec::with_capacity(k);
    let mut valid = Vec::with_capacity(k);
    for i in 0..k {
        match surviving.get(i) {
            Some(&e) => {
                estimates.push(e);
                valid.push(true);
            }
            None => {
                estimates.push(FormantEstimate {
                    frequency_hz: 0.0,
                    bandwidth_hz: 0.0,
                });
                valid.push(false);
            }
        }
    }
    LpcFormants { estimates, valid }
}

/// Roots of `1 - sum_i coeffs[i] * z^-(i+1)` as points in the z-plane.
fn polynomial_roots(coeffs: &[f64]) -> Vec<num_complex::Complex<f64>> {
    // Multiply by z^p: z^p - a_1 z^(p-1) - ... - a_p = 0, a monic polynomial
    // whose companion matrix has the roots as eigenvalues.
    let p = coeffs.len();
    if p == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<f64>::zeros(p, p);
    for i in 1..p {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..p {
        // Monic coefficient of z^(p-1-i) is -coeffs[i].
        companion[(i, p - 1)] = coeffs[p - 1 - i];
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| num_complex::Complex::new(z.re, z.im))
        .collect()
}

/// Per-frame LPC formant track using the same framing as the spectrogram.
pub fn lpc_track(
    w: &Waveform,
    cfg: &SignalConfig,
    lpc: &LpcConfig,
    num_formants: usize,
) -> Result<FormantTrack> {
    let g = cfg.geometry;
    let num_frames = g.frame_count(w.len()).ok_or(Error::UtteranceTooShort {
        len: w.len(),
        min: g.window_length,
    })?;
    let analyzed = if lpc.use_pre_emphasis {
        pre_emphasize(w, cfg.pre_emphasis)?
    } else {
        w.clone()
    };
    let window = cfg.window.coefficients(g.window_length);

    let mut values = Array2::zeros((num_frames, num_formants));
    let mut valid = Array2::from_elem((num_frames, num_formants), false);
    let mut frame = vec![0.0f64; g.window_length];
    for t in 0..num_frames {
        let start = t * g.hop;
        let mut power = 0.0;
        for i in 0..g.window_length {
            frame[i] = analyzed.samples[start + i] * window[i];
            power += frame[i] * frame[i];
        }
        if power / g.window_length as f64 <= lpc.silence_power {
            continue;
        }
        let coeffs = match lpc_coefficients(&frame, lpc.order) {
            Ok(c) => c,
            Err(Error::SilentFrame) => continue,
            Err(e) => return Err(e),
        };
        let formants = formants_filtered(&coeffs, w.sample_rate, num_formants, lpc);
        for k in 0..num_formants {
            if formants.valid[k] {
                values[(t, k)] = formants.estimates[k].frequency_hz;
                valid[(t, k)] = true;
            }
        }
    }
    FormantTrack::new(values, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::sine;
    use crate::synth::{synthesize, Cohort, SyntheticSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller transform.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn recovers_ar2_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let n = 10_000;
        let burn_in = 500;
        let mut x = vec![0.0f64; n + burn_in];
        for i in 2..x.len() {
            x[i] = 1.5 * x[i - 1] - 0.7 * x[i - 2] + gaussian(&mut rng);
        }
        let a = lpc_coefficients(&x[burn_in..], 2).unwrap();
        assert!((a[0] - 1.5).abs() < 1e-2, "a1 = {}", a[0]);
        assert!((a[1] + 0.7).abs() < 1e-2, "a2 = {}", a[1]);
    }

    #[test]
    fn white_noise_reflection_coefficients_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..4096).map(|_| gaussian(&mut rng)).collect();
        let a = lpc_coefficients(&x, 12).unwrap();
        // Stability shows up as all predictor poles inside the unit circle.
        for z in polynomial_roots(&a) {
            assert!(z.norm() < 1.0, "pole at radius {}", z.norm());
        }
    }

    #[test]
    fn sine_produces_conjugate_root_pair_at_tone_frequency() {
        let w = sine(1000.0, 0.032, 16_000, 0.5);
        let window = crate::dsp::WindowKind::Hann.coefficients(512);
        let frame: Vec<f64> = w.samples[..512]
            .iter()
            .zip(&window)
            .map(|(s, win)| s * win)
            .collect();
        let a = lpc_coefficients(&frame, 2).unwrap();
        let formants = formants_from_lpc(&a, 16_000, 1);
        assert!(formants.valid[0]);
        let f = formants.estimates[0].frequency_hz;
        assert!((f - 1000.0).abs() / 1000.0 < 0.01, "estimated {f} Hz");
    }

    #[test]
    fn bandwidth_formula_matches_pole_radius() {
        // Construct coefficients from a known conjugate pole pair.
        let fs = 16_000.0;
        let radius: f64 = 0.99;
        let theta = 2.0 * std::f64::consts::PI * 1000.0 / fs;
        // (1 - r e^{i t} z^-1)(1 - r e^{-i t} z^-1) = 1 - 2 r cos t z^-1 + r^2 z^-2
        let coeffs = [2.0 * radius * theta.cos(), -radius * radius];
        let formants = formants_from_lpc(&coeffs, 16_000, 1);
        assert!(formants.valid[0]);
        assert!((formants.estimates[0].frequency_hz - 1000.0).abs() < 1e-6);
        assert!((formants.estimates[0].bandwidth_hz - 51.185).abs() < 1e-3);
    }

    #[test]
    fn real_axis_roots_contribute_no_formants() {
        // Two real poles: x[n] = 1.3 x[n-1] - 0.4 x[n-2] has roots 0.8, 0.5.
        let coeffs = [1.3, -0.4];
        let formants = formants_from_lpc(&coeffs, 16_000, 3);
        assert!(formants.valid.iter().all(|&v| !v));
    }

    /// Dense Toeplitz solve via Gaussian elimination, independent of the
    /// Levinson recursion.
    fn dense_toeplitz_solve(r: &[f64], order: usize) -> Vec<f64> {
        let mut m = vec![vec![0.0f64; order + 1]; order];
        for i in 0..order {
            for j in 0..order {
                m[i][j] = r[(i as isize - j as isize).unsigned_abs()];
            }
            m[i][order] = r[i + 1];
        }
        for col in 0..order {
            let pivot = (col..order).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()));
            let pivot = pivot.unwrap();
            m.swap(col, pivot);
            let val = m[col][col];
            for j in col..=order {
                m[col][j] /= val;
            }
            for i in 0..order {
                if i != col {
                    let factor = m[i][col];
                    for j in col..=order {
                        m[i][j] -= factor * m[col][j];
                    }
                }
            }
        }
        (0..order).map(|i| m[i][order]).collect()
    }

    #[test]
    fn levinson_matches_dense_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2048)
            .map(|i| (i as f64 * 0.11).sin() + 0.3 * gaussian(&mut rng))
            .collect();
        for order in [2, 4, 8, 12] {
            let r = autocorrelation(&x, order);
            let fast = levinson_durbin(&r, order).unwrap();
            let dense = dense_toeplitz_solve(&r, order);
            for (f, d) in fast.iter().zip(&dense) {
                let rel = (f - d).abs() / d.abs().max(1e-12);
                assert!(rel < 1e-8, "order {order}: {f} vs {d}");
            }
        }
    }

    #[test]
    fn synthetic_vowel_within_30_hz() {
        let cfg = SignalConfig::default();
        let spec = SyntheticSpec {
            f0: 120.0,
            formants: vec![500.0, 1500.0, 2500.0],
            bandwidths: vec![50.0, 70.0, 90.0],
            duration_secs: 0.3,
            ramp_to: None,
            cohort: Cohort::Men,
        };
        let (w, _) = synthesize(&spec, &cfg).unwrap();
        let track = lpc_track(&w, &cfg, &LpcConfig::default(), 3).unwrap();
        let mid = track.num_frames() / 2;
        for k in 0..3 {
            assert!(track.valid[(mid, k)], "formant {k} missing");
            let err = (track.values[(mid, k)] - spec.formants[k]).abs();
            assert!(err < 30.0, "formant {k}: off by {err} Hz");
        }
    }

    #[test]
    fn steady_vowel_estimates_are_stable_across_frames() {
        let cfg = SignalConfig::default();
        let spec = SyntheticSpec {
            f0: 110.0,
            formants: vec![600.0, 1700.0, 2600.0],
            bandwidths: vec![60.0, 80.0, 90.0],
            duration_secs: 0.3,
            ramp_to: None,
            cohort: Cohort::Men,
        };
        let (w, _) = synthesize(&spec, &cfg).unwrap();
        let track = lpc_track(&w, &cfg, &LpcConfig::default(), 3).unwrap();
        for k in 0..3 {
            let vals: Vec<f64> = (0..track.num_frames())
                .filter(|&t| track.valid[(t, k)])
                .map(|t| track.values[(t, k)])
                .collect();
            assert!(vals.len() > track.num_frames() / 2);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(var.sqrt() < 20.0, "formant {k}: std {}", var.sqrt());
        }
    }

    #[test]
    fn silence_yields_all_invalid_frames() {
        let w = Waveform::new(vec![0.0; 8000], 16_000).unwrap();
        let cfg = SignalConfig::default();
        let track = lpc_track(&w, &cfg, &LpcConfig::default(), 3).unwrap();
        assert!(track.valid.iter().all(|&v| !v));
    }

    #[test]
    fn track_frames_align_with_spectrogram_frames() {
        let cfg = SignalConfig::default();
        let w = sine(440.0, 0.2, 16_000, 0.5);
        let spec = crate::dsp::spectrogram(&w, &cfg).unwrap();
        let track = lpc_track(&w, &cfg, &LpcConfig::default(), 3).unwrap();
        assert_eq!(track.num_frames(), spec.num_frames());
    }
}
