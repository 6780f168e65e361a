//! Greedy sequential decoding: predict F1, mask, predict F2, mask, predict F3.
//!
//! Each head's probability map is renormalized over the bins above the
//! previous head's prediction, so per frame the predicted bins are strictly
//! increasing. Ties in the argmax break toward the lowest bin, keeping the
//! whole pass deterministic. A frame where masking leaves a head without any
//! bins is flagged degenerate in the validity mask and predicts the top bin.

use std::path::Path;

use ndarray::Array2;

use crate::dsp::{FrameGeometry, Spectrogram};
use crate::error::{Error, Result};
use crate::model::{
    argmax_columns, mask_lower, FormantModel, HeatmapSet, Real, NO_LOWER_BIN,
};
use crate::quantizer::{dequantize, BinSpec, FormantTrack};

/// Runs the tracker over one spectrogram.
pub fn track<T: Real>(
    model: &mut FormantModel<T>,
    s: &Spectrogram,
    bins: &BinSpec,
) -> Result<(FormantTrack, HeatmapSet<T>)> {
    if s.num_bins() != bins.num_bins {
        return Err(Error::shape("spectrogram bins", bins.num_bins, s.num_bins()));
    }
    let num_frames = s.num_frames();
    let num_heads = model.num_heads();
    let top_bin = (bins.num_bins - 1) as i32;

    let z = model.encode(s)?;
    let mut lower = vec![NO_LOWER_BIN; num_frames];
    let mut maps = Vec::with_capacity(num_heads);
    let mut values = Array2::zeros((num_frames, num_heads));
    let mut valid = Array2::from_elem((num_frames, num_heads), true);

    for k in 0..num_heads {
        let z_masked = mask_lower(&z, &lower);
        let probs = model.decode_head(k, &z_masked, Some(&lower))?;
        let bin_choices = argmax_columns(&probs);
        for t in 0..num_frames {
            // No support left: the lower head already reached the top bin.
            if lower[t] >= top_bin {
                valid[(t, k)] = false;
            }
            values[(t, k)] = dequantize(bin_choices[t], bins)?;
            lower[t] = bin_choices[t] as i32;
        }
        maps.push(probs);
    }

    Ok((FormantTrack { values, valid }, HeatmapSet { maps }))
}

/// Elementwise maximum over the per-formant maps, for plotting.
pub fn aggregate_heatmaps<T: Real>(h: &HeatmapSet<T>) -> Array2<T> {
    h.aggregate()
}

/// Writes a track as CSV: `frame,time_sec,f1_hz,...,fK_hz,valid`, one row per
/// frame. `valid` is 1 only when every formant in the frame is valid.
pub fn write_track_csv(
    path: &Path,
    track: &FormantTrack,
    geometry: &FrameGeometry,
    sample_rate: u32,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let k = track.num_formants();
    let mut header = vec!["frame".to_string(), "time_sec".to_string()];
    for i in 1..=k {
        header.push(format!("f{i}_hz"));
    }
    header.push("valid".to_string());
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in 0..track.num_frames() {
        let mut record = vec![
            t.to_string(),
            format!("{:.6}", t as f64 * geometry.hop as f64 / sample_rate as f64),
        ];
        for i in 0..k {
            record.push(format!("{:.3}", track.values[(t, i)]));
        }
        let all_valid = (0..k).all(|i| track.valid[(t, i)]);
        record.push(if all_valid { "1" } else { "0" }.to_string());
        writer.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a track CSV produced by [`write_track_csv`].
pub fn read_track_csv(path: &Path, num_formants: usize) -> Result<FormantTrack> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<(Vec<f64>, bool)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let expected = 3 + num_formants;
        if record.len() != expected {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 2,
                reason: format!("expected {expected} columns, got {}", record.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: i + 2,
                reason: format!("bad {what} value '{s}'"),
            })
        };
        let mut freqs = Vec::with_capacity(num_formants);
        for j in 0..num_formants {
            freqs.push(parse(&record[2 + j], "frequency")?);
        }
        let valid = record[2 + num_formants].trim() == "1";
        rows.push((freqs, valid));
    }
    let mut values = Array2::zeros((rows.len(), num_formants));
    let mut valid = Array2::from_elem((rows.len(), num_formants), false);
    for (t, (freqs, ok)) in rows.iter().enumerate() {
        for (j, &f) in freqs.iter().enumerate() {
            values[(t, j)] = f;
            valid[(t, j)] = *ok;
        }
    }
    FormantTrack::new(values, valid)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            line: 0,
            reason: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, EncoderConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> (FormantModel<f32>, BinSpec) {
        let enc = EncoderConfig {
            channel_plan: vec![1, 4, 1],
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
        let model = FormantModel::new(enc, dec, 17, seed).unwrap();
        let bins = BinSpec {
            bin_width: 31.25,
            num_bins: 17,
            max_hz: 500.0,
        };
        (model, bins)
    }

    fn random_spectrogram(bins: usize, frames: usize, rng: &mut ChaCha8Rng) -> Spectrogram {
        Spectrogram {
            values: Array2::from_shape_fn((bins, frames), |_| rng.gen_range(-2.0..2.0f32)),
            geometry: FrameGeometry::canonical(),
            source_sample_rate: 16_000,
        }
    }

    #[test]
    fn predicted_bins_strictly_increase_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..50 {
            let (mut model, bins) = tiny_model(seed);
            let s = random_spectrogram(17, 4, &mut rng);
            let (track, _) = track(&mut model, &s, &bins).unwrap();
            for t in 0..track.num_frames() {
                let b: Vec<i64> = (0..3)
                    .map(|k| (track.values[(t, k)] / bins.bin_width).round() as i64)
                    .collect();
                let degenerate = (0..3).any(|k| !track.valid[(t, k)]);
                if degenerate {
                    // Degeneracy only happens when a lower head hit the top bin.
                    assert!(b.iter().any(|&x| x == 16), "flagged without cause: {b:?}");
                } else {
                    assert!(b[0] < b[1] && b[1] < b[2], "seed {seed} frame {t}: {b:?}");
                }
            }
        }
    }

    #[test]
    fn track_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut model, bins) = tiny_model(9);
        let s = random_spectrogram(17, 5, &mut rng);
        let (t1, h1) = track(&mut model, &s, &bins).unwrap();
        let (t2, h2) = track(&mut model, &s, &bins).unwrap();
        assert_eq!(t1.values, t2.values);
        assert_eq!(t1.valid, t2.valid);
        for (a, b) in h1.maps.iter().zip(&h2.maps) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn outputs_are_exact_bin_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut model, bins) = tiny_model(11);
        let s = random_spectrogram(17, 6, &mut rng);
        let (track, _) = track(&mut model, &s, &bins).unwrap();
        for v in track.values.iter() {
            let rem = v % bins.bin_width;
            assert!(rem.abs() < 1e-9 || (bins.bin_width - rem).abs() < 1e-9);
        }
    }

    #[test]
    fn single_frame_spectrogram_yields_single_row_track() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut model, bins) = tiny_model(13);
        let s = random_spectrogram(17, 1, &mut rng);
        let (track, heatmaps) = track(&mut model, &s, &bins).unwrap();
        assert_eq!(track.num_frames(), 1);
        assert_eq!(heatmaps.maps[0].ncols(), 1);
    }

    #[test]
    fn heatmap_columns_sum_to_one_after_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut model, bins) = tiny_model(17);
        let s = random_spectrogram(17, 4, &mut rng);
        let (_, heatmaps) = track(&mut model, &s, &bins).unwrap();
        for map in &heatmaps.maps {
            for t in 0..map.ncols() {
                let sum: f64 = map.column(t).iter().map(|&v| v as f64).sum();
                assert!((sum - 1.0).abs() < 1e-5, "column sum {sum}");
            }
        }
    }

    #[test]
    fn aggregate_takes_elementwise_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let maps: Vec<Array2<f32>> = (0..3)
            .map(|_| Array2::from_shape_fn((5, 4), |_| rng.gen_range(0.0..1.0f32)))
            .collect();
        let set = HeatmapSet { maps: maps.clone() };
        let agg = aggregate_heatmaps(&set);
        for d in 0..5 {
            for t in 0..4 {
                let expected = maps.iter().map(|m| m[(d, t)]).fold(f32::MIN, f32::max);
                assert_eq!(agg[(d, t)], expected);
            }
        }
        // K identical maps aggregate to that map.
        let same = HeatmapSet {
            maps: vec![maps[0].clone(), maps[0].clone()],
        };
        assert_eq!(aggregate_heatmaps(&same), maps[0]);
    }

    #[test]
    fn track_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.csv");
        let track = FormantTrack::constant(&[500.0, 1500.0, 2500.0], 3);
        write_track_csv(&path, &track, &FrameGeometry::canonical(), 16_000).unwrap();
        let back = read_track_csv(&path, 3).unwrap();
        assert_eq!(back.num_frames(), 3);
        for t in 0..3 {
            for k in 0..3 {
                assert!((back.values[(t, k)] - track.values[(t, k)]).abs() < 1e-6);
                assert!(back.valid[(t, k)]);
            }
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame,time_sec,f1_hz,f2_hz,f3_hz,valid"));
        // time_sec advances by hop / rate = 0.01 s.
        assert!(text.lines().nth(2).unwrap().starts_with("1,0.010000"));
    }
}
