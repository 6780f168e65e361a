//! Synthetic vowel generator with exact ground-truth formants.
//!
//! A periodic impulse source is filtered through a cascade of second-order
//! resonators whose center frequencies are the ground-truth formants. The
//! generator returns the exact per-frame formant values it used, so any
//! tracker error measured against a synthetic corpus is attributable to the
//! tracker alone.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{SignalConfig, Waveform};
use crate::error::{Error, Result};
use crate::quantizer::FormantTrack;

/// Speaker group; each group draws formants from a shifted range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Men,
    Women,
    Children,
}

impl Cohort {
    pub fn label(self) -> &'static str {
        match self {
            Cohort::Men => "men",
            Cohort::Women => "women",
            Cohort::Children => "children",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "men" | "m" => Ok(Cohort::Men),
            "women" | "w" => Ok(Cohort::Women),
            "children" | "c" => Ok(Cohort::Children),
            other => Err(Error::InvalidArgument(format!("unknown cohort '{other}'"))),
        }
    }
}

/// Uniform sampling ranges per cohort. These are qualitative, shifted ranges
/// chosen for the synthetic corpus; they are not measurements.
#[derive(Debug, Clone, Copy)]
pub struct CohortRanges {
    pub f0: (f64, f64),
    pub f1: (f64, f64),
    pub f2: (f64, f64),
    pub f3: (f64, f64),
}

pub const MEN_RANGES: CohortRanges = CohortRanges {
    f0: (90.0, 140.0),
    f1: (250.0, 700.0),
    f2: (700.0, 2200.0),
    f3: (2000.0, 3000.0),
};

pub const WOMEN_RANGES: CohortRanges = CohortRanges {
    f0: (160.0, 240.0),
    f1: (300.0, 850.0),
    f2: (850.0, 2500.0),
    f3: (2300.0, 3400.0),
};

pub const CHILDREN_RANGES: CohortRanges = CohortRanges {
    f0: (250.0, 350.0),
    f1: (350.0, 1000.0),
    f2: (1000.0, 2900.0),
    f3: (2600.0, 3800.0),
};

/// Minimum spacing enforced between adjacent sampled formants, Hz.
pub const MIN_FORMANT_GAP: f64 = 150.0;

impl Cohort {
    pub fn ranges(self) -> CohortRanges {
        match self {
            Cohort::Men => MEN_RANGES,
            Cohort::Women => WOMEN_RANGES,
            Cohort::Children => CHILDREN_RANGES,
        }
    }
}

/// Full description of one synthetic utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Source pitch in Hz.
    pub f0: f64,
    /// Formant start frequencies in Hz, strictly increasing.
    pub formants: Vec<f64>,
    /// Resonator bandwidths in Hz, one per formant.
    pub bandwidths: Vec<f64>,
    pub duration_secs: f64,
    /// Optional linear ramp targets; formant `k` drifts from `formants[k]`
    /// to `ramp_to[k]` over the utterance.
    pub ramp_to: Option<Vec<f64>>,
    pub cohort: Cohort,
}

impl SyntheticSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.formants.is_empty() || self.formants.len() != self.bandwidths.len() {
            return Err(Error::InvalidSynthSpec(
                "formants and bandwidths must be non-empty and equal length".into(),
            ));
        }
        for k in 1..self.formants.len() {
            if self.formants[k] <= self.formants[k - 1] {
                return Err(Error::InvalidSynthSpec(
                    "formants must be strictly increasing".into(),
                ));
            }
        }
        for &f in &self.formants {
            if f <= 0.0 || f >= nyquist {
                return Err(Error::InvalidSynthSpec(format!(
                    "formant {f} Hz outside (0, {nyquist})"
                )));
            }
        }
        if let Some(targets) = &self.ramp_to {
            if targets.len() != self.formants.len() {
                return Err(Error::InvalidSynthSpec("ramp_to length mismatch".into()));
            }
            for k in 1..targets.len() {
                if targets[k] <= targets[k - 1] {
                    return Err(Error::InvalidSynthSpec(
                        "ramp targets must stay strictly increasing".into(),
                    ));
                }
            }
            for &f in targets {
                if f <= 0.0 || f >= nyquist {
                    return Err(Error::InvalidSynthSpec(format!(
                        "ramp target {f} Hz outside (0, {nyquist})"
                    )));
                }
            }
        }
        for &bw in &self.bandwidths {
            if bw <= 0.0 {
                return Err(Error::InvalidSynthSpec("bandwidth must be > 0".into()));
            }
        }
        if self.f0 <= 0.0 || self.duration_secs <= 0.0 {
            return Err(Error::InvalidSynthSpec(
                "f0 and duration must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Formant `k` at sample index `n` of `total` samples.
    fn formant_at(&self, k: usize, n: usize, total: usize) -> f64 {
        match &self.ramp_to {
            None => self.formants[k],
            Some(targets) => {
                let frac = if total > 1 {
                    n as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                self.formants[k] + (targets[k] - self.formants[k]) * frac
            }
        }
    }
}

/// Renders the waveform and its exact per-frame formant track.
///
/// The source is an impulse train at `f0`; each formant is imposed by a
/// two-pole resonator with poles at radius `exp(-pi * bw / fs)` and angle
/// `2 pi * f / fs`. Per-frame truth is the instantaneous formant value at
/// the frame start (`t * hop`), matching the exported track convention.
pub fn synthesize(spec: &SyntheticSpec, cfg: &SignalConfig) -> Result<(Waveform, FormantTrack)> {
    spec.validate(cfg.sample_rate)?;
    let fs = cfg.sample_rate as f64;
    let total = (spec.duration_secs * fs).round() as usize;
    let num_frames = cfg
        .geometry
        .frame_count(total)
        .ok_or(Error::UtteranceTooShort {
            len: total,
            min: cfg.geometry.window_length,
        })?;

    // Impulse train source.
    let mut signal = vec![0.0f64; total];
    let period = fs / spec.f0;
    let mut next = 0.0f64;
    while (next.round() as usize) < total {
        signal[next.round() as usize] = 1.0;
        next += period;
    }

    // Cascade of resonators, coefficients updated per sample to follow ramps.
    for k in 0..spec.formants.len() {
        let r = (-std::f64::consts::PI * spec.bandwidths[k] / fs).exp();
        debug_assert!(r < 1.0, "resonator pole radius must be < 1");
        let gain = 1.0 - r;
        let (mut y1, mut y2) = (0.0f64, 0.0f64);
        for n in 0..total {
            let theta = 2.0 * std::f64::consts::PI * spec.formant_at(k, n, total) / fs;
            let y = gain * signal[n] + 2.0 * r * theta.cos() * y1 - r * r * y2;
            y2 = y1;
            y1 = y;
            signal[n] = y;
        }
    }

    // Normalize to a fixed peak so 16-bit export never clips.
    let peak = signal.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = 0.5 / peak;
        for v in &mut signal {
            *v *= scale;
        }
    }

    let k = spec.formants.len();
    let mut values = Array2::zeros((num_frames, k));
    for t in 0..num_frames {
        let n = t * cfg.geometry.hop;
        for j in 0..k {
            values[(t, j)] = spec.formant_at(j, n, total);
        }
    }
    let track = FormantTrack {
        valid: Array2::from_elem((num_frames, k), true),
        values,
    };
    let waveform = Waveform::new(signal, cfg.sample_rate)?;
    Ok((waveform, track))
}

/// Corpus-generation knobs; the defaults produce short steady vowels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub duration_secs: f64,
    /// Base bandwidths for F1..F3.
    pub bandwidth_base: Vec<f64>,
    /// Uniform jitter applied to each base bandwidth, +/- this many Hz.
    pub bandwidth_jitter: f64,
    /// Probability that an utterance carries a linear formant ramp.
    pub ramp_probability: f64,
    /// Maximum relative drift when a ramp is applied.
    pub ramp_max_fraction: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            duration_secs: 0.25,
            bandwidth_base: vec![50.0, 70.0, 90.0],
            bandwidth_jitter: 20.0,
            ramp_probability: 0.0,
            ramp_max_fraction: 0.1,
        }
    }
}

/// One generated utterance, ready to be written to disk or used in memory.
#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub id: String,
    pub cohort: Cohort,
    pub spec: SyntheticSpec,
    pub waveform: Waveform,
    pub track: FormantTrack,
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 step keyed by the utterance index.
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

/// Draws one spec from a cohort's ranges, keeping formants separated by at
/// least [`MIN_FORMANT_GAP`].
pub fn sample_spec(cohort: Cohort, params: &GeneratorParams, rng: &mut ChaCha8Rng) -> SyntheticSpec {
    let ranges = cohort.ranges();
    let f1 = sample_uniform(rng, ranges.f1);
    let f2_lo = ranges.f2.0.max(f1 + MIN_FORMANT_GAP);
    let f2 = sample_uniform(rng, (f2_lo, ranges.f2.1.max(f2_lo + 1.0)));
    let f3_lo = ranges.f3.0.max(f2 + MIN_FORMANT_GAP);
    let f3 = sample_uniform(rng, (f3_lo, ranges.f3.1.max(f3_lo + 1.0)));
    let formants = vec![f1, f2, f3];

    let bandwidths: Vec<f64> = params
        .bandwidth_base
        .iter()
        .map(|&b| b + rng.gen_range(-params.bandwidth_jitter..=params.bandwidth_jitter))
        .collect();

    let ramp_to = if rng.gen_range(0.0..1.0) < params.ramp_probability {
        let mut targets = Vec::with_capacity(formants.len());
        let mut prev = 0.0f64;
        for &f in &formants {
            let drift = f * rng.gen_range(-params.ramp_max_fraction..=params.ramp_max_fraction);
            let t = (f + drift).max(prev + MIN_FORMANT_GAP);
            targets.push(t);
            prev = t;
        }
        Some(targets)
    } else {
        None
    };

    SyntheticSpec {
        f0: sample_uniform(rng, ranges.f0),
        formants,
        bandwidths,
        duration_secs: params.duration_secs,
        ramp_to,
        cohort,
    }
}

/// Generates `n` utterances, cycling cohorts from `mix` uniformly at random.
/// Every utterance is keyed by a seed derived from `seed` and its index, so
/// the corpus is reproducible element by element.
pub fn generate_corpus(
    n: usize,
    mix: &[Cohort],
    params: &GeneratorParams,
    cfg: &SignalConfig,
    seed: u64,
) -> Result<Vec<SyntheticUtterance>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be > 0".into()));
    }
    if mix.is_empty() {
        return Err(Error::InvalidArgument("cohort mix must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let cohort = mix[rng.gen_range(0..mix.len())];
        let spec = sample_spec(cohort, params, &mut rng);
        let (waveform, track) = synthesize(&spec, cfg)?;
        out.push(SyntheticUtterance {
            id: format!("synth{:05}_{}", i, cohort.label()),
            cohort,
            spec,
            waveform,
            track,
        });
    }
    Ok(out)
}

/// Seeded per-cohort test assignment: within each cohort, a round(fraction
/// * n) subset of utterances is marked for the test split.
pub fn assign_test_split(corpus: &[SyntheticUtterance], fraction: f64, seed: u64) -> Vec<bool> {
    let mut is_test = vec![false; corpus.len()];
    if fraction <= 0.0 {
        return is_test;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC0FFEE));
    for cohort in [Cohort::Men, Cohort::Women, Cohort::Children] {
        let mut idx: Vec<usize> = corpus
            .iter()
            .enumerate()
            .filter(|(_, u)| u.cohort == cohort)
            .map(|(i, _)| i)
            .collect();
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n_test = (idx.len() as f64 * fraction).round() as usize;
        for &i in idx.iter().take(n_test) {
            is_test[i] = true;
        }
    }
    is_test
}
