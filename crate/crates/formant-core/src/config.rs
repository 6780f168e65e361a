//! Run configuration: one TOML file covering signal processing, model
//! architecture, training, the LPC baseline, and corpus generation.
//!
//! Every knob has a default, so an empty file is a valid config and
//! `print_defaults` shows the complete set. Validation collects every
//! problem — unknown keys and out-of-range values alike — into a single
//! error so an operator can fix a config in one pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::LpcConfig;
use crate::dsp::SignalConfig;
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, EncoderConfig};
use crate::quantizer::BinSpec;
use crate::synth::{Cohort, GeneratorParams};
use crate::train::TrainConfig;

/// Corpus-generation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub count: usize,
    pub cohorts: Vec<Cohort>,
    pub seed: u64,
    #[serde(flatten)]
    pub params: GeneratorParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 500,
            cohorts: vec![Cohort::Men, Cohort::Women],
            seed: 0,
            params: GeneratorParams::default(),
        }
    }
}

/// Process-level knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeSection {
    /// Worker threads for per-utterance fan-out in track/eval/baseline.
    pub workers: usize,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub signal: SignalConfig,
    pub bins: BinSpec,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub lpc: LpcConfig,
    pub synth: SynthSection,
    pub runtime: RuntimeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl RunConfig {
    /// Parses a TOML string, applying `key.path=value` overrides first and
    /// rejecting unknown keys.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(vec![format!("TOML syntax: {e}")]))?;
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(p) = apply_override(&mut value, o) {
                problems.push(p);
            }
        }
        let reference = toml::Value::try_from(RunConfig::base())
            .expect("default config serializes");
        collect_unknown_keys(&value, &reference, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::InvalidConfig(vec![format!("config structure: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// All defaults; the canonical recipe.
    pub fn base() -> Self {
        Self {
            signal: SignalConfig {
                sample_rate: crate::dsp::CANONICAL_SAMPLE_RATE,
                geometry: crate::dsp::FrameGeometry::canonical(),
                window: crate::dsp::WindowKind::Hann,
                pre_emphasis: 0.97,
                log_floor: 1e-10,
                standardize: true,
            },
            bins: BinSpec::canonical(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            lpc: LpcConfig::default(),
            synth: SynthSection::default(),
            runtime: RuntimeSection::default(),
        }
    }

    /// Renders the full default config as TOML.
    pub fn print_defaults() -> String {
        toml::to_string_pretty(&Self::base()).expect("default config serializes")
    }

    /// Collects every semantic problem across all sections.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut absorb = |r: Result<()>| {
            if let Err(Error::InvalidConfig(mut ps)) = r {
                problems.append(&mut ps);
            }
        };
        absorb(self.signal.validate());
        absorb(self.bins.validate());
        absorb(self.encoder.validate());
        absorb(self.decoder.validate(self.bins.num_bins));
        absorb(self.train.validate());
        if self.lpc.order == 0 {
            problems.push("lpc.order must be > 0".into());
        }
        if self.synth.count == 0 {
            problems.push("synth.count must be > 0".into());
        }
        if self.synth.cohorts.is_empty() {
            problems.push("synth.cohorts must be non-empty".into());
        }
        if self.runtime.workers == 0 {
            problems.push("runtime.workers must be > 0".into());
        }
        // Cross-section consistency: heatmap rows must match spectrogram rows.
        if self.bins.num_bins != self.signal.geometry.num_bins() {
            problems.push(format!(
                "bins.num_bins = {} must equal fft_size/2 + 1 = {}",
                self.bins.num_bins,
                self.signal.geometry.num_bins()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Applies one `section.key=value` override onto the raw TOML value.
fn apply_override(value: &mut toml::Value, spec: &str) -> std::result::Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override '{spec}' is not of the form key.path=value"))?;
    let parsed: toml::Value = toml::from_str(&format!("v = {raw}"))
        .map(|v: toml::Value| v["v"].clone())
        .or_else(|_| {
            toml::from_str(&format!("v = \"{raw}\"")).map(|v: toml::Value| v["v"].clone())
        })
        .map_err(|e| format!("override '{spec}': bad value ({e})"))?;
    let mut node = value;
    let parts: Vec<&str> = path.trim().split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("override '{spec}': '{part}' is not a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let last = parts.last().unwrap();
    node.as_table_mut()
        .ok_or_else(|| format!("override '{spec}': parent is not a table"))?
        .insert(last.to_string(), parsed);
    Ok(())
}

/// Reports every key present in `value` but absent from the reference
/// (default) config shape.
fn collect_unknown_keys(
    value: &toml::Value,
    reference: &toml::Value,
    prefix: &str,
    problems: &mut Vec<String>,
) {
    let (Some(table), Some(ref_table)) = (value.as_table(), reference.as_table()) else {
        return;
    };
    for (key, sub) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match ref_table.get(key) {
            None => problems.push(format!("unknown config key '{path}'")),
            Some(ref_sub) => collect_unknown_keys(sub, ref_sub, &path, problems),
        }
    }
}
