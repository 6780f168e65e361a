//! Training recipe: masked teacher-forced cross-entropy over the decoder
//! heads, Adam with a step-wise annealed learning rate, label smoothing, and
//! per-epoch speed-up augmentation.
//!
//! Heads are conditioned during training the same way as at inference, except
//! the masking bins come from the ground-truth lower formant wherever it is
//! annotated (teacher forcing); frames without a lower annotation fall back
//! to the model's own prediction. A config knob switches individual frames to
//! model predictions with a given probability (scheduled sampling).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, SignalConfig, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::inference;
use crate::model::{
    self, checkpoint, latent_rows_to_matrix, mask_lower, mask_lower_in_place,
    masked_softmax_columns, matrix_to_latent_rows, FormantModel, Grid, HeatmapSet, Real,
    NO_LOWER_BIN,
};
use crate::quantizer::{make_targets, quantize, BinSpec, FormantTrack, TargetHeatmapSet};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimization hyperparameters. The defaults are the full recipe: Adam at
/// 1e-4 annealed by 10 at epochs 300 and 600, smoothing 0.1, and a 20%
/// chance per epoch of speeding any sample up by two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub anneal_epochs: Vec<usize>,
    pub anneal_factor: f64,
    pub smoothing_epsilon: f64,
    pub speedup_probability: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Probability of conditioning on the model's own prediction even where
    /// ground truth exists; 0 keeps pure teacher forcing.
    pub scheduled_sampling: f64,
    /// Additive Gaussian noise amplitude; 0 disables.
    pub noise_sigma: f64,
    /// Keep-fraction lower bound for random time cropping; 1 disables.
    pub crop_min_fraction: f64,
    /// Time-reverse samples with probability 1/2 when set.
    pub reverse_augment: bool,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            anneal_epochs: vec![300, 600],
            anneal_factor: 10.0,
            smoothing_epsilon: 0.1,
            speedup_probability: 0.2,
            batch_size: 8,
            max_epochs: 700,
            seed: 0,
            scheduled_sampling: 0.0,
            noise_sigma: 0.0,
            crop_min_fraction: 1.0,
            reverse_augment: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.initial_lr <= 0.0 {
            problems.push(format!("initial_lr must be > 0, got {}", self.initial_lr));
        }
        if self.anneal_factor <= 0.0 {
            problems.push(format!("anneal_factor must be > 0, got {}", self.anneal_factor));
        }
        if !(0.0..1.0).contains(&self.smoothing_epsilon) {
            problems.push(format!(
                "smoothing_epsilon must be in [0, 1), got {}",
                self.smoothing_epsilon
            ));
        }
        if !(0.0..=1.0).contains(&self.speedup_probability) {
            problems.push(format!(
                "speedup_probability must be in [0, 1], got {}",
                self.speedup_probability
            ));
        }
        if !(0.0..=1.0).contains(&self.scheduled_sampling) {
            problems.push(format!(
                "scheduled_sampling must be in [0, 1], got {}",
                self.scheduled_sampling
            ));
        }
        if !(0.0..=1.0).contains(&self.crop_min_fraction) || self.crop_min_fraction == 0.0 {
            problems.push(format!(
                "crop_min_fraction must be in (0, 1], got {}",
                self.crop_min_fraction
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be > 0".into());
        }
        if self.max_epochs == 0 {
            problems.push("max_epochs must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Learning rate at a zero-based epoch index: the initial rate divided by
/// `anneal_factor` once per anneal epoch already reached.
pub fn learning_rate_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let anneals = cfg.anneal_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.initial_lr / cfg.anneal_factor.powi(anneals as i32)
}

/// One annotated utterance held in memory for training.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub waveform: Waveform,
    pub track: FormantTrack,
}

/// Mean cross-entropy between predicted probability maps and smoothed
/// targets over every included column; excluded columns contribute nothing.
pub fn loss<T: Real>(heatmaps: &HeatmapSet<T>, targets: &TargetHeatmapSet) -> Result<f64> {
    if heatmaps.maps.len() != targets.targets.len() {
        return Err(Error::shape(
            "loss heads",
            targets.targets.len(),
            heatmaps.maps.len(),
        ));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (k, map) in heatmaps.maps.iter().enumerate() {
        let target = &targets.targets[k];
        if map.dim() != target.dim() {
            return Err(Error::shape(
                format!("loss head {k}"),
                format!("{:?}", target.dim()),
                format!("{:?}", map.dim()),
            ));
        }
        for t in 0..map.ncols() {
            if !targets.included[(t, k)] {
                continue;
            }
            let mut ce = 0.0f64;
            for d in 0..map.nrows() {
                let q = target[(d, t)].as_f64();
                if q > 0.0 {
                    let p = map[(d, t)].as_f64().max(1e-300);
                    ce -= q * p.ln();
                }
            }
            sum += ce;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoSupervisedFrames);
    }
    Ok(sum / count as f64)
}

/// Speed-up augmentation: decimate the waveform by two, double every label,
/// invalidate labels pushed past `max_hz`, and remap annotations onto the
/// halved frame grid.
pub fn speed_up_sample(
    sample: &TrainSample,
    signal: &SignalConfig,
    max_hz: f64,
) -> Result<TrainSample> {
    let waveform = dsp::speed_up_by_two(&sample.waveform)?;
    let new_frames = signal
        .geometry
        .frame_count(waveform.len())
        .ok_or(Error::UtteranceTooShort {
            len: waveform.len(),
            min: signal.geometry.window_length,
        })?;
    let k = sample.track.num_formants();
    let mut values = Array2::zeros((new_frames, k));
    let mut valid = Array2::from_elem((new_frames, k), false);
    for t_new in 0..new_frames {
        let t_old = t_new * 2;
        if t_old >= sample.track.num_frames() {
            break;
        }
        for j in 0..k {
            let doubled = sample.track.values[(t_old, j)] * 2.0;
            values[(t_new, j)] = doubled;
            valid[(t_new, j)] = sample.track.valid[(t_old, j)] && doubled <= max_hz;
        }
    }
    Ok(TrainSample {
        id: sample.id.clone(),
        waveform,
        track: FormantTrack { values, valid },
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Applies the configured augmentations to one sample. Speed-up fires with
/// `speedup_probability`; the remaining transforms are off by default.
pub fn augment_sample(
    sample: &TrainSample,
    cfg: &TrainConfig,
    signal: &SignalConfig,
    bins: &BinSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample> {
    let mut out = if rng.gen_range(0.0..1.0) < cfg.speedup_probability {
        speed_up_sample(sample, signal, bins.max_hz)?
    } else {
        sample.clone()
    };

    if cfg.noise_sigma > 0.0 {
        for s in &mut out.waveform.samples {
            *s += cfg.noise_sigma * gaussian(rng);
        }
    }

    if cfg.crop_min_fraction < 1.0 {
        let hop = signal.geometry.hop;
        let frames = signal.geometry.frame_count(out.waveform.len()).unwrap_or(0);
        let min_frames = ((frames as f64) * cfg.crop_min_fraction).ceil() as usize;
        if frames > min_frames.max(1) {
            let keep = rng.gen_range(min_frames.max(1)..=frames);
            let start_frame = rng.gen_range(0..=frames - keep);
            let start = start_frame * hop;
            let len = (keep - 1) * hop + signal.geometry.window_length;
            out.waveform.samples = out.waveform.samples[start..(start + len).min(out.waveform.samples.len())].to_vec();
            let k = out.track.num_formants();
            let mut values = Array2::zeros((keep, k));
            let mut valid = Array2::from_elem((keep, k), false);
            for t in 0..keep {
                for j in 0..k {
                    values[(t, j)] = out.track.values[(start_frame + t, j)];
                    valid[(t, j)] = out.track.valid[(start_frame + t, j)];
                }
            }
            out.track = FormantTrack { values, valid };
        }
    }

    if cfg.reverse_augment && rng.gen_range(0.0..1.0) < 0.5 {
        // Frame alignment after reversal is approximate when the waveform
        // length is not hop-aligned; annotations land on the nearest frame.
        out.waveform.samples.reverse();
        let frames = out.track.num_frames();
        let k = out.track.num_formants();
        let mut values = Array2::zeros((frames, k));
        let mut valid = Array2::from_elem((frames, k), false);
        for t in 0..frames {
            for j in 0..k {
                values[(t, j)] = out.track.values[(frames - 1 - t, j)];
                valid[(t, j)] = out.track.valid[(frames - 1 - t, j)];
            }
        }
        out.track = FormantTrack { values, valid };
    }

    Ok(out)
}

struct PreparedBatch<T> {
    x: Array2<T>,
    grid2: Grid,
    valid2: Vec<bool>,
    grid1: Grid,
    valid1: Vec<bool>,
    /// Per head: `[D, batch * t_max]` smoothed target columns.
    targets: Vec<Array2<T>>,
    /// Per head: which batch columns carry supervision.
    included: Vec<Vec<bool>>,
    /// Per head: quantized gold bin per column, `-1` where unannotated.
    gold_bins: Vec<Vec<i32>>,
}

fn prepare_batch<T: Real>(
    samples: &[&TrainSample],
    signal: &SignalConfig,
    bins: &BinSpec,
    smoothing: f64,
    num_heads: usize,
) -> Result<PreparedBatch<T>> {
    let batch = samples.len();
    let d = bins.num_bins;
    let mut specs = Vec::with_capacity(batch);
    let mut lens = Vec::with_capacity(batch);
    for s in samples {
        let spec = dsp::spectrogram(&s.waveform, signal)?;
        let frames = spec.num_frames().min(s.track.num_frames());
        lens.push(frames);
        specs.push(spec);
    }
    let t_max = *lens.iter().max().unwrap();

    let grid2 = Grid { batch, height: d, width: t_max };
    let grid1 = Grid { batch, height: 1, width: t_max };
    let mut x = Array2::<T>::zeros((1, batch * d * t_max));
    let mut valid2 = vec![false; batch * d * t_max];
    let mut valid1 = vec![false; batch * t_max];
    for (b, spec) in specs.iter().enumerate() {
        for di in 0..d {
            for t in 0..lens[b] {
                x[(0, b * d * t_max + di * t_max + t)] = T::from_f64(spec.values[(di, t)] as f64);
                valid2[b * d * t_max + di * t_max + t] = true;
            }
        }
        for t in 0..lens[b] {
            valid1[b * t_max + t] = true;
        }
    }

    let mut targets = vec![Array2::<T>::zeros((d, batch * t_max)); num_heads];
    let mut included = vec![vec![false; batch * t_max]; num_heads];
    let mut gold_bins = vec![vec![-1i32; batch * t_max]; num_heads];
    for (b, sample) in samples.iter().enumerate() {
        let per_sample = make_targets(&sample.track, bins, smoothing)?;
        for k in 0..num_heads.min(per_sample.num_heads()) {
            for t in 0..lens[b] {
                let col = b * t_max + t;
                if per_sample.included[(t, k)] {
                    included[k][col] = true;
                    gold_bins[k][col] = quantize(sample.track.values[(t, k)], bins)? as i32;
                    for di in 0..d {
                        targets[k][(di, col)] = T::from_f64(per_sample.targets[k][(di, t)].as_f64());
                    }
                }
            }
        }
    }

    Ok(PreparedBatch {
        x,
        grid2,
        valid2,
        grid1,
        valid1,
        targets,
        included,
        gold_bins,
    })
}

struct StepOutcome {
    /// Mean cross-entropy over supervised columns.
    loss: f64,
    /// Columns whose gold bin was swallowed by the conditioning mask.
    masked_out_columns: usize,
}

/// Full forward/backward over one prepared batch, accumulating parameter
/// gradients. Conditioning bins come from ground truth where annotated
/// (teacher forcing) and from the model's running predictions elsewhere.
fn forward_backward<T: Real>(
    model: &mut FormantModel<T>,
    batch: &PreparedBatch<T>,
    scheduled_sampling: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let d = batch.grid2.height;
    let t_max = batch.grid2.width;
    let num_heads = model.num_heads();
    let cols = batch.grid1.cols();

    let z_enc = model.encode_batch(&batch.x, &batch.grid2, &batch.valid2, true, rng);
    let z = latent_rows_to_matrix(&z_enc, d, t_max);

    // First pass: count supervised columns so gradients are scaled by 1/N.
    let mut supervised = 0usize;
    for k in 0..num_heads {
        supervised += batch.included[k].iter().filter(|&&v| v).count();
    }
    if supervised == 0 {
        return Err(Error::NoSupervisedFrames);
    }
    let inv_n = 1.0 / supervised as f64;

    let mut dz = Array2::<T>::zeros((d, cols));
    let mut lower = vec![NO_LOWER_BIN; cols];
    let mut loss_sum = 0.0f64;
    let mut masked_out = 0usize;

    for k in 0..num_heads {
        let z_masked = mask_lower(&z, &lower);
        let logits = model.head_forward(k, &z_masked, &batch.grid1, &batch.valid1, true, rng);
        let probs = masked_softmax_columns(&logits, Some(&lower));

        let mut dlogits = Array2::<T>::zeros((d, cols));
        for col in 0..cols {
            if !batch.included[k][col] {
                continue;
            }
            let support_start = (lower[col] + 1).max(0) as usize;
            let gold = batch.gold_bins[k][col];
            if support_start >= d || gold < support_start as i32 {
                // The conditioning mask removed the answer; skip the column.
                masked_out += 1;
                continue;
            }
            // Renormalize the smoothed target over the surviving support.
            let mut q_sum = 0.0f64;
            for di in support_start..d {
                q_sum += batch.targets[k][(di, col)].as_f64();
            }
            if q_sum <= 0.0 {
                masked_out += 1;
                continue;
            }
            let mut ce = 0.0f64;
            for di in support_start..d {
                let q = batch.targets[k][(di, col)].as_f64() / q_sum;
                let p = probs[(di, col)].as_f64();
                if q > 0.0 {
                    ce -= q * p.max(1e-300).ln();
                }
                dlogits[(di, col)] = T::from_f64((p - q) * inv_n);
            }
            loss_sum += ce;
        }

        let mut dz_k = model.head_backward(k, &dlogits, &batch.grid1, &batch.valid1);
        mask_lower_in_place(&mut dz_k, &lower);
        dz += &dz_k;

        // Conditioning bins for the next head.
        let preds = model::argmax_columns(&probs);
        for col in 0..cols {
            let use_gold = batch.gold_bins[k][col] >= 0
                && (scheduled_sampling <= 0.0 || rng.gen_range(0.0..1.0) >= scheduled_sampling);
            lower[col] = if use_gold {
                batch.gold_bins[k][col]
            } else {
                preds[col] as i32
            };
        }
    }

    let mean_loss = loss_sum * inv_n;
    if !mean_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, step: 0 });
    }
    let dz_enc = matrix_to_latent_rows(&dz, d, t_max);
    model.encode_backward(&dz_enc, &batch.grid2, &batch.valid2);
    Ok(StepOutcome {
        loss: mean_loss,
        masked_out_columns: masked_out,
    })
}

/// Runs the model on one spectrogram with ground-truth conditioning where
/// available, in eval mode; the per-head maps are the teacher-forced
/// heatmaps.
pub fn teacher_forced_forward<T: Real>(
    model: &mut FormantModel<T>,
    s: &Spectrogram,
    track: &FormantTrack,
    bins: &BinSpec,
) -> Result<HeatmapSet<T>> {
    if track.num_frames() != s.num_frames() {
        return Err(Error::shape(
            "teacher-forced frames",
            s.num_frames(),
            track.num_frames(),
        ));
    }
    let z = model.encode(s)?;
    let frames = s.num_frames();
    let mut lower = vec![NO_LOWER_BIN; frames];
    let mut maps = Vec::with_capacity(model.num_heads());
    for k in 0..model.num_heads() {
        let z_masked = mask_lower(&z, &lower);
        let probs = model.decode_head(k, &z_masked, Some(&lower))?;
        let preds = model::argmax_columns(&probs);
        for t in 0..frames {
            lower[t] = if track.valid[(t, k)] {
                quantize(track.values[(t, k)], bins)? as i32
            } else {
                preds[t] as i32
            };
        }
        maps.push(probs);
    }
    Ok(HeatmapSet { maps })
}

/// Adam with bias correction; state is keyed by parameter name so it can be
/// carried across checkpoints.
pub struct Adam<T> {
    pub lr: f64,
    step: u64,
    state: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut FormantModel<T>) {
        self.step += 1;
        let t = self.step;
        let lr = self.lr;
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        let state = &mut self.state;
        model.visit_params_mut(&mut |p| {
            let (m, v) = state
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); p.value.len()], vec![T::zero(); p.value.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i].as_f64();
                let mi = ADAM_BETA1 * m[i].as_f64() + (1.0 - ADAM_BETA1) * g;
                let vi = ADAM_BETA2 * v[i].as_f64() + (1.0 - ADAM_BETA2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                p.value[i] = T::from_f64(p.value[i].as_f64() - update);
            }
        });
    }

    fn export(&self) -> (serde_json::Value, Vec<(String, Vec<T>)>) {
        let mut tensors = Vec::new();
        for (name, (m, v)) in &self.state {
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        (serde_json::json!({ "adam_step": self.step }), tensors)
    }

    fn import(&mut self, meta: &serde_json::Value, tensors: &[(String, Vec<T>)]) {
        if let Some(step) = meta.get("adam_step").and_then(|v| v.as_u64()) {
            self.step = step;
        }
        for (name, values) in tensors {
            if let Some(param) = name.strip_prefix("adam.m.") {
                self.state
                    .entry(param.to_string())
                    .or_insert_with(|| (Vec::new(), Vec::new()))
                    .0 = values.clone();
            } else if let Some(param) = name.strip_prefix("adam.v.") {
                self.state
                    .entry(param.to_string())
                    .or_insert_with(|| (Vec::new(), Vec::new()))
                    .1 = values.clone();
            }
        }
    }
}

/// Per-epoch log record; the probe errors are frame MAE in Hz per formant.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub probe_mae_hz: Vec<f64>,
    /// Supervised columns dropped because teacher masking swallowed the
    /// gold bin (adjacent formants quantizing into the same bin).
    pub masked_out_columns: usize,
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frame MAE per formant of the tracker against gold, over valid gold frames.
pub fn probe_mae<T: Real>(
    model: &mut FormantModel<T>,
    probe: &[TrainSample],
    signal: &SignalConfig,
    bins: &BinSpec,
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0f64; 3];
    let mut counts = vec![0usize; 3];
    for sample in probe {
        let spec = dsp::spectrogram(&sample.waveform, signal)?;
        let (pred, _) = inference::track(model, &spec, bins)?;
        let frames = pred.num_frames().min(sample.track.num_frames());
        let k = pred.num_formants().min(sample.track.num_formants());
        if sums.len() < k {
            sums.resize(k, 0.0);
            counts.resize(k, 0);
        }
        for t in 0..frames {
            for j in 0..k {
                if sample.track.valid[(t, j)] {
                    sums[j] += (pred.values[(t, j)] - sample.track.values[(t, j)]).abs();
                    counts[j] += 1;
                }
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect())
}

/// Orchestrates the epoch loop, metrics log, and checkpointing.
pub struct Trainer<T: Real> {
    pub model: FormantModel<T>,
    pub config: TrainConfig,
    pub signal: SignalConfig,
    pub bins: BinSpec,
    pub adam: Adam<T>,
    pub start_epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model: FormantModel<T>,
        config: TrainConfig,
        signal: SignalConfig,
        bins: BinSpec,
    ) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.initial_lr);
        Ok(Self {
            model,
            config,
            signal,
            bins,
            adam,
            start_epoch: 0,
        })
    }

    /// Restores a trainer from a checkpoint, resuming epoch numbering and
    /// optimizer state when present.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let loaded = checkpoint::load::<T>(path)?;
        let mut adam = Adam::new(config.initial_lr);
        let mut start_epoch = 0;
        if let Some(extra) = &loaded.extra {
            if let Some(e) = extra.meta.get("epoch").and_then(|v| v.as_u64()) {
                start_epoch = e as usize + 1;
            }
            adam.import(&extra.meta, &extra.tensors);
        }
        Ok(Self {
            model: loaded.model,
            config,
            signal: loaded.signal,
            bins: loaded.bin_spec,
            adam,
            start_epoch,
        })
    }

    pub fn save_checkpoint(&self, path: &Path, epoch: usize) -> Result<()> {
        let (mut meta, tensors) = self.adam.export();
        meta["epoch"] = serde_json::json!(epoch);
        let extra = checkpoint::ExtraData {
            meta,
            tensors,
        };
        // Write-then-rename so an interrupted save never corrupts the file.
        let tmp = path.with_extension("ckpt.tmp");
        checkpoint::save(&tmp, &self.model, &self.signal, &self.bins, Some(&extra))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// One pass over the training set. Returns the epoch's metrics.
    pub fn train_epoch(
        &mut self,
        train_set: &[TrainSample],
        probe_set: &[TrainSample],
        epoch: usize,
    ) -> Result<EpochMetrics> {
        if train_set.is_empty() {
            return Err(Error::EmptyInput);
        }
        let lr = learning_rate_at(&self.config, epoch);
        self.adam.lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64));

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut masked_out = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let mut augmented = Vec::with_capacity(chunk.len());
            for &i in chunk {
                augmented.push(augment_sample(
                    &train_set[i],
                    &self.config,
                    &self.signal,
                    &self.bins,
                    &mut rng,
                )?);
            }
            let refs: Vec<&TrainSample> = augmented.iter().collect();
            let batch = prepare_batch::<T>(
                &refs,
                &self.signal,
                &self.bins,
                self.config.smoothing_epsilon,
                self.model.num_heads(),
            )?;
            self.model.zero_grads();
            let outcome =
                forward_backward(&mut self.model, &batch, self.config.scheduled_sampling, &mut rng)
                    .map_err(|e| match e {
                        Error::Diverged { .. } => Error::Diverged { epoch, step: batches },
                        other => other,
                    })?;
            self.adam.step(&mut self.model);
            loss_sum += outcome.loss;
            masked_out += outcome.masked_out_columns;
            batches += 1;
        }

        let probe = if probe_set.is_empty() {
            Vec::new()
        } else {
            probe_mae(&mut self.model, probe_set, &self.signal, &self.bins)?
        };
        Ok(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            probe_mae_hz: probe,
            masked_out_columns: masked_out,
        })
    }

    /// Runs `max_epochs` epochs (continuing from a resume point), appending
    /// one metrics row per epoch and saving checkpoints per config.
    pub fn run(
        &mut self,
        train_set: &[TrainSample],
        probe_set: &[TrainSample],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut metrics = Vec::new();
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(&dir.join("metrics.csv"), self.start_epoch > 0)?),
            None => None,
        };
        for epoch in self.start_epoch..self.config.max_epochs {
            let m = self.train_epoch(train_set, probe_set, epoch)?;
            if let Some(log) = &mut log {
                log.append(&m)?;
            }
            if let Some(dir) = out_dir {
                let periodic = self.config.checkpoint_every > 0
                    && (epoch + 1) % self.config.checkpoint_every == 0;
                if periodic || epoch + 1 == self.config.max_epochs {
                    self.save_checkpoint(&dir.join("model.ckpt"), epoch)?;
                }
            }
            on_epoch(&m);
            metrics.push(m);
        }
        Ok(metrics)
    }
}

/// Append-only CSV metrics log: `epoch,lr,train_loss,probe_mae_f1,...`.
struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        if !append || !path.exists() {
            std::fs::write(path, "epoch,lr,train_loss,probe_mae_f1,probe_mae_f2,probe_mae_f3\n")
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { path: path.into() })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let fmt = |v: Option<&f64>| match v {
            Some(x) if x.is_finite() => format!("{x:.4}"),
            _ => String::new(),
        };
        writeln!(
            f,
            "{},{:e},{:.6},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            fmt(m.probe_mae_hz.first()),
            fmt(m.probe_mae_hz.get(1)),
            fmt(m.probe_mae_hz.get(2)),
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Result of the finite-difference gradient audit.
#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares every analytic parameter gradient against central finite
/// differences on a miniature model (17 bins, 5 frames, a 2-sample batch
/// with one padded sample), in `f64`.
pub fn finite_difference_check(seed: u64) -> Result<GradCheckReport> {
    use crate::model::{DecoderConfig, EncoderConfig};

    let bins = BinSpec {
        bin_width: 31.25,
        num_bins: 17,
        max_hz: 500.0,
    };
    let enc = EncoderConfig {
        channel_plan: vec![1, 4, 4, 1],
        kernel: 3,
        dropout_rate: 0.2,
        uses_batchnorm: true,
    };
    let dec = DecoderConfig {
        bottleneck_plan: vec![17, 6, 17],
        time_kernel: 3,
        bias_enabled: false,
        num_heads: 3,
        dropout_rate: 0.2,
        uses_batchnorm: true,
    };
    let mut model = FormantModel::<f64>::new(enc, dec, bins.num_bins, seed)?;

    // Random input batch and annotations: sample 0 full, sample 1 padded.
    let (d, t_max, batch) = (17usize, 5usize, 2usize);
    let lens = [5usize, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut x = Array2::<f64>::zeros((1, batch * d * t_max));
    let mut valid2 = vec![false; batch * d * t_max];
    let mut valid1 = vec![false; batch * t_max];
    for b in 0..batch {
        for di in 0..d {
            for t in 0..lens[b] {
                x[(0, b * d * t_max + di * t_max + t)] = rng.gen_range(-1.0..1.0);
                valid2[b * d * t_max + di * t_max + t] = true;
            }
        }
        for t in 0..lens[b] {
            valid1[b * t_max + t] = true;
        }
    }
    let mut targets = vec![Array2::<f64>::zeros((d, batch * t_max)); 3];
    let mut included = vec![vec![false; batch * t_max]; 3];
    let mut gold_bins = vec![vec![-1i32; batch * t_max]; 3];
    for b in 0..batch {
        for t in 0..lens[b] {
            let col = b * t_max + t;
            // Ascending gold bins with room between them.
            let g = [rng.gen_range(1..5), rng.gen_range(6..10), rng.gen_range(11..16)];
            for k in 0..3 {
                included[k][col] = true;
                gold_bins[k][col] = g[k];
                let eps = 0.1;
                for di in 0..d {
                    targets[k][(di, col)] = eps / d as f64;
                }
                targets[k][(g[k] as usize, col)] += 1.0 - eps;
            }
        }
    }
    let batch_data = PreparedBatch {
        x,
        grid2: Grid { batch, height: d, width: t_max },
        valid2,
        grid1: Grid { batch, height: 1, width: t_max },
        valid1,
        targets,
        included,
        gold_bins,
    };

    // Fixed dropout draws: reseed identically for every evaluation.
    let eval_seed = derive_seed(seed, 2);
    let eval = |model: &mut FormantModel<f64>| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        forward_backward(model, &batch_data, 0.0, &mut rng).unwrap().loss
    };

    model.zero_grads();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        forward_backward(&mut model, &batch_data, 0.0, &mut rng)?;
    }
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params_mut(&mut |p| analytic.push((p.name.clone(), p.grad.to_vec())));

    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = analytic[pi].1.len();
        for i in 0..len {
            let h = 1e-5;
            let mut lp = 0.0;
            let mut lm = 0.0;
            model.visit_params_mut(&mut |p| {
                if p.name == *name {
                    p.value[i] += h;
                }
            });
            lp += eval(&mut model);
            model.visit_params_mut(&mut |p| {
                if p.name == *name {
                    p.value[i] -= 2.0 * h;
                }
            });
            lm += eval(&mut model);
            model.visit_params_mut(&mut |p| {
                if p.name == *name {
                    p.value[i] += h;
                }
            });
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[pi].1[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{i}] analytic {an:.3e} vs fd {fd:.3e}");
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_error: max_rel,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, EncoderConfig};
    use crate::synth::{generate_corpus, Cohort, GeneratorParams};

    fn tiny_bins() -> BinSpec {
        BinSpec {
            bin_width: 31.25,
            num_bins: 17,
            max_hz: 500.0,
        }
    }

    fn tiny_model(seed: u64) -> FormantModel<f32> {
        let enc = EncoderConfig {
            channel_plan: vec![1, 4, 1],
            kernel: 3,
            dropout_rate: 0.0,
            uses_batchnorm: true,
        };
        let dec = DecoderConfig {
            bottleneck_plan: vec![17, 6, 17],
            time_kernel: 3,
            bias_enabled: false,
            num_heads: 3,
            dropout_rate: 0.0,
            uses_batchnorm: true,
        };
        FormantModel::new(enc, dec, 17, seed).unwrap()
    }

    #[test]
    fn learning_rate_schedule_matches_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate_at(&cfg, 0), 1e-4);
        assert_eq!(learning_rate_at(&cfg, 299), 1e-4);
        assert!((learning_rate_at(&cfg, 300) - 1e-5).abs() < 1e-20);
        assert!((learning_rate_at(&cfg, 599) - 1e-5).abs() < 1e-20);
        assert!((learning_rate_at(&cfg, 600) - 1e-6).abs() < 1e-21);
        assert!((learning_rate_at(&cfg, 699) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn loss_is_zero_for_exact_one_hot_match() {
        let track = FormantTrack::constant(&[100.0, 200.0, 300.0], 2);
        let targets = make_targets(&track, &tiny_bins(), 0.0).unwrap();
        let maps = targets
            .targets
            .iter()
            .map(|t| t.mapv(|v| v))
            .collect::<Vec<_>>();
        let l = loss(&HeatmapSet { maps }, &targets).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_against_uniform_prediction_is_ln_d() {
        let bins = BinSpec::canonical();
        let track = FormantTrack::constant(&[500.0, 1500.0, 2500.0], 1);
        let targets = make_targets(&track, &bins, 0.1).unwrap();
        let uniform = Array2::from_elem((257, 1), 1.0f32 / 257.0);
        let maps = vec![uniform.clone(), uniform.clone(), uniform];
        let l = loss(&HeatmapSet { maps }, &targets).unwrap();
        assert!((l - 257.0f64.ln()).abs() < 1e-6, "{l}");
    }

    #[test]
    fn loss_of_smoothed_target_against_itself_is_its_entropy() {
        let bins = BinSpec::canonical();
        let track = FormantTrack::constant(&[500.0, 1500.0, 2500.0], 1);
        let targets = make_targets(&track, &bins, 0.1).unwrap();
        let maps = targets.targets.clone();
        let l = loss(&HeatmapSet { maps }, &targets).unwrap();
        // Closed form: peak holds 0.9 + 0.1/257, the rest 0.1/257 each.
        let off: f64 = 0.1 / 257.0;
        let peak = 0.9 + off;
        let entropy = -(peak * peak.ln() + 256.0 * off * off.ln());
        assert!((l - entropy).abs() < 1e-5, "{l} vs {entropy}");
    }

    #[test]
    fn loss_with_everything_excluded_errors() {
        let track = FormantTrack::invalid(2, 3);
        let targets = make_targets(&track, &tiny_bins(), 0.1).unwrap();
        let maps = targets.targets.clone();
        assert!(matches!(
            loss(&HeatmapSet { maps }, &targets),
            Err(Error::NoSupervisedFrames)
        ));
    }

    fn sample_with(formants: &[f64], duration: f64) -> TrainSample {
        let cfg = SignalConfig::default();
        let spec = crate::synth::SyntheticSpec {
            f0: 110.0,
            formants: formants.to_vec(),
            bandwidths: vec![50.0, 70.0, 90.0],
            duration_secs: duration,
            ramp_to: None,
            cohort: Cohort::Men,
        };
        let (waveform, track) = crate::synth::synthesize(&spec, &cfg).unwrap();
        TrainSample {
            id: "test".into(),
            waveform,
            track,
        }
    }

    #[test]
    fn speed_up_doubles_labels_and_invalidates_out_of_range() {
        let signal = SignalConfig::default();
        let sample = sample_with(&[500.0, 1500.0, 2500.0], 0.4);
        let fast = speed_up_sample(&sample, &signal, 8000.0).unwrap();
        assert!((fast.track.values[(0, 0)] - 1000.0).abs() < 1e-9);
        assert!((fast.track.values[(0, 1)] - 3000.0).abs() < 1e-9);
        assert!((fast.track.values[(0, 2)] - 5000.0).abs() < 1e-9);
        assert!(fast.track.valid[(0, 2)]);

        let high = sample_with(&[500.0, 1500.0, 4100.0], 0.4);
        let fast = speed_up_sample(&high, &signal, 8000.0).unwrap();
        assert!((fast.track.values[(0, 2)] - 8200.0).abs() < 1e-9);
        assert!(!fast.track.valid[(0, 2)], "8200 Hz must be invalid");
        assert!(fast.track.valid[(0, 0)] && fast.track.valid[(0, 1)]);
    }

    #[test]
    fn speed_up_remaps_frames_by_halving() {
        let signal = SignalConfig::default();
        let mut sample = sample_with(&[400.0, 1400.0, 2400.0], 0.6);
        // Tag frame 40 with a distinctive value.
        sample.track.values[(40, 0)] = 555.0;
        let fast = speed_up_sample(&sample, &signal, 8000.0).unwrap();
        assert!((fast.track.values[(20, 0)] - 1110.0).abs() < 1e-9);
        let expected_frames = signal
            .geometry
            .frame_count(sample.waveform.len().div_ceil(2))
            .unwrap();
        assert_eq!(fast.track.num_frames(), expected_frames);
    }

    #[test]
    fn augmentation_keeps_formant_count() {
        let signal = SignalConfig::default();
        let bins = BinSpec::canonical();
        let cfg = TrainConfig {
            speedup_probability: 1.0,
            ..TrainConfig::default()
        };
        let sample = sample_with(&[500.0, 1500.0, 2500.0], 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment_sample(&sample, &cfg, &signal, &bins, &mut rng).unwrap();
        assert_eq!(out.track.num_formants(), 3);
    }

    #[test]
    fn fixed_seed_reproduces_first_epoch_loss() {
        let signal = SignalConfig::default();
        let bins = tiny_bins();
        let corpus: Vec<TrainSample> = vec![
            sample_with(&[120.0, 280.0, 430.0], 0.2),
            sample_with(&[100.0, 250.0, 400.0], 0.2),
        ];
        // Rescale tracks into the tiny bin range.
        let run = |seed: u64| {
            let model = tiny_model(seed);
            let cfg = TrainConfig {
                seed,
                batch_size: 2,
                max_epochs: 1,
                initial_lr: 1e-3,
                speedup_probability: 0.0,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(model, cfg, signal, bins).unwrap();
            trainer.train_epoch(&corpus, &[], 0).unwrap().train_loss
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a, b);
        let c = run(8);
        assert_ne!(a, c);
    }

    #[test]
    fn teacher_forced_forward_masks_with_gold_bins() {
        let signal = SignalConfig::default();
        let bins = tiny_bins();
        let mut model = tiny_model(3);
        let sample = sample_with(&[120.0, 280.0, 430.0], 0.2);
        let mut spec = dsp::spectrogram(&sample.waveform, &signal).unwrap();
        // Crop the frequency axis to the tiny model's 17 bins.
        spec.values = spec.values.slice(ndarray::s![..17, ..]).to_owned();
        let mut track = sample.track.clone();
        let frames = spec.num_frames().min(track.num_frames());
        track.values = track.values.slice(ndarray::s![..frames, ..]).to_owned();
        track.valid = track.valid.slice(ndarray::s![..frames, ..]).to_owned();

        let maps = teacher_forced_forward(&mut model, &spec, &track, &bins).unwrap();
        // Head 2's map must be zero at and below the gold F1 bin.
        let gold_bin = quantize(track.values[(0, 0)], &bins).unwrap();
        for d in 0..=gold_bin {
            assert_eq!(maps.maps[1][(d, 0)], 0.0);
        }
        // With no valid labels the fallback is the model's own predictions,
        // which is exactly the inference path.
        let invalid = FormantTrack::invalid(frames, 3);
        let forced = teacher_forced_forward(&mut model, &spec, &invalid, &bins).unwrap();
        let (_, free) = inference::track(&mut model, &spec, &bins).unwrap();
        for (a, b) in forced.maps.iter().zip(&free.maps) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tiny_overfit_loss_decreases() {
        let signal = SignalConfig::default();
        let bins = tiny_bins();
        let corpus = vec![sample_with(&[120.0, 280.0, 430.0], 0.2)];
        let cfg = TrainConfig {
            seed: 1,
            batch_size: 1,
            max_epochs: 100,
            initial_lr: 3e-3,
            speedup_probability: 0.0,
            anneal_epochs: vec![],
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(tiny_model(5), cfg, signal, bins).unwrap();
        let first = trainer.train_epoch(&corpus, &[], 0).unwrap().train_loss;
        let mut last = first;
        for epoch in 1..100 {
            last = trainer.train_epoch(&corpus, &[], epoch).unwrap().train_loss;
        }
        assert!(
            last < first * 0.5,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn gradient_check_on_miniature_config() {
        let report = finite_difference_check(11).unwrap();
        assert!(report.checked > 2000, "only {} params checked", report.checked);
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn masked_latent_rows_receive_no_gradient() {
        // All gold bins force masking of low rows for heads 2 and 3; the
        // gradient arriving at those latent rows must be exactly zero.
        let mut model = FormantModel::<f64>::new(
            EncoderConfig {
                channel_plan: vec![1, 3, 1],
                kernel: 3,
                dropout_rate: 0.0,
                uses_batchnorm: true,
            },
            DecoderConfig {
                bottleneck_plan: vec![17, 5, 17],
                time_kernel: 3,
                bias_enabled: false,
                num_heads: 2,
                dropout_rate: 0.0,
                uses_batchnorm: true,
            },
            17,
            9,
        )
        .unwrap();
        let (d, t) = (17usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((1, d * t), |_| rng.gen_range(-1.0..1.0));
        let grid2 = Grid { batch: 1, height: d, width: t };
        let grid1 = Grid { batch: 1, height: 1, width: t };
        let valid2 = vec![true; d * t];
        let valid1 = vec![true; t];

        let z_enc = model.encode_batch(&x, &grid2, &valid2, true, &mut rng);
        let z = latent_rows_to_matrix(&z_enc, d, t);
        let lower = vec![7i32; t];
        let z_masked = mask_lower(&z, &lower);
        let logits = model.head_forward(1, &z_masked, &grid1, &valid1, true, &mut rng);
        let probs = masked_softmax_columns(&logits, Some(&lower));
        let mut dlogits = Array2::<f64>::zeros((d, t));
        for col in 0..t {
            for di in 8..d {
                let q = if di == 12 { 1.0 } else { 0.0 };
                dlogits[(di, col)] = probs[(di, col)] - q;
            }
        }
        let mut dz = model.head_backward(1, &dlogits, &grid1, &valid1);
        mask_lower_in_place(&mut dz, &lower);
        for di in 0..=7 {
            for col in 0..t {
                assert_eq!(dz[(di, col)], 0.0, "masked row {di} leaked gradient");
            }
        }
    }

    #[test]
    fn scheduled_sampling_changes_the_conditioning() {
        // With scheduled_sampling = 1 the masks come from predictions, so a
        // run differs from pure teacher forcing once the heads disagree
        // with gold; both stay finite and deterministic under their seeds.
        let bins = tiny_bins();
        let signal = SignalConfig::default();
        let sample = sample_with(&[120.0, 280.0, 430.0], 0.2);
        let run = |ss: f64| {
            let mut model = tiny_model(33);
            let refs = [&sample];
            let batch = prepare_batch::<f32>(&refs, &signal, &bins, 0.1, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            model.zero_grads();
            forward_backward(&mut model, &batch, ss, &mut rng).unwrap().loss
        };
        let teacher = run(0.0);
        let sampled = run(1.0);
        assert!(teacher.is_finite() && sampled.is_finite());
        assert_ne!(teacher, sampled);
        assert_eq!(sampled, run(1.0), "scheduled sampling is seeded");
    }

    #[test]
    fn colliding_gold_bins_exclude_the_column() {
        // F1 and F2 quantizing to the same bin means the teacher mask
        // swallows head 2's answer; that column must drop out of the loss.
        let bins = tiny_bins();
        let mut model = tiny_model(21);
        let signal = SignalConfig::default();
        let mut sample = sample_with(&[120.0, 280.0, 430.0], 0.2);
        for t in 0..sample.track.num_frames() {
            sample.track.values[(t, 1)] = sample.track.values[(t, 0)] + 10.0;
        }
        let refs = [&sample];
        let batch = prepare_batch::<f32>(&refs, &signal, &bins, 0.1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.zero_grads();
        let outcome = forward_backward(&mut model, &batch, 0.0, &mut rng).unwrap();
        let frames = batch.grid1.cols();
        assert_eq!(outcome.masked_out_columns, frames);
        assert!(outcome.loss.is_finite());
    }

    #[test]
    fn trainer_checkpoint_roundtrip_resumes_epoch_numbering() {
        let signal = SignalConfig::default();
        let bins = tiny_bins();
        let corpus = vec![sample_with(&[120.0, 280.0, 430.0], 0.2)];
        let cfg = TrainConfig {
            seed: 2,
            batch_size: 1,
            max_epochs: 3,
            initial_lr: 1e-3,
            speedup_probability: 0.0,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(tiny_model(6), cfg.clone(), signal, bins).unwrap();
        trainer
            .run(&corpus, &[], Some(dir.path()), |_| {})
            .unwrap();
        let resumed =
            Trainer::<f32>::resume(&dir.path().join("model.ckpt"), cfg).unwrap();
        assert_eq!(resumed.start_epoch, 3);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4, "header plus one row per epoch");
        assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
    }

    #[test]
    fn corpus_smoke_end_to_end_with_augmentation() {
        // A couple of real synthetic vowels through the full epoch path.
        let signal = SignalConfig::default();
        let bins = BinSpec::canonical();
        let utterances = generate_corpus(
            4,
            &[Cohort::Men],
            &GeneratorParams {
                duration_secs: 0.15,
                ..GeneratorParams::default()
            },
            &signal,
            3,
        )
        .unwrap();
        let samples: Vec<TrainSample> = utterances
            .into_iter()
            .map(|u| TrainSample {
                id: u.id,
                waveform: u.waveform,
                track: u.track,
            })
            .collect();
        let cfg = TrainConfig {
            seed: 3,
            batch_size: 2,
            max_epochs: 1,
            initial_lr: 1e-3,
            speedup_probability: 0.5,
            ..TrainConfig::default()
        };
        let model = FormantModel::<f32>::new(
            EncoderConfig {
                channel_plan: vec![1, 4, 1],
                ..EncoderConfig::default()
            },
            DecoderConfig::default(),
            257,
            1,
        )
        .unwrap();
        let mut trainer = Trainer::new(model, cfg, signal, bins).unwrap();
        let metrics = trainer.train_epoch(&samples, &samples[..1], 0).unwrap();
        assert!(metrics.train_loss.is_finite());
        assert_eq!(metrics.probe_mae_hz.len(), 3);
    }
}
