//! Canonical annotation format, dataset manifests, and adapter seams for
//! license-gated corpora.
//!
//! Two CSV schemas make up the on-disk format, both UTF-8 with a header row:
//!
//! * per-utterance annotations:
//!   `frame,f1_hz,f2_hz,f3_hz,valid1,valid2,valid3[,phone_class]`
//!   with `valid*` in `{0,1}`, frequencies as decimal Hz, frames zero-based
//!   on the 10 ms hop grid;
//! * manifests: `id,audio_path,annotation_path,group,vowel,split[,speaker]`
//!   with paths relative to the manifest file and `split` in
//!   `{train,test}`.
//!
//! Loading validates everything up front: ids must be unique, referenced
//! files must exist, and each annotation's frame count must agree with its
//! audio under the configured geometry. A bad manifest loads nothing.

pub mod hillenbrand;
pub mod vtr;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{self, SignalConfig};
use crate::error::{Error, Result};
use crate::eval::{BroadClass, PhoneSegmentation};
use crate::quantizer::FormantTrack;
use crate::train::TrainSample;

/// Which side of the train/test divide an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest row, annotations loaded and validated.
#[derive(Debug, Clone)]
pub struct AnnotatedUtterance {
    pub id: String,
    pub audio_path: PathBuf,
    pub annotation_path: PathBuf,
    pub track: FormantTrack,
    pub segmentation: Option<PhoneSegmentation>,
    pub group: Option<String>,
    pub vowel_label: Option<String>,
    pub speaker: Option<String>,
    pub split: Split,
}

/// A loaded, validated dataset manifest.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<AnnotatedUtterance>,
    pub source_name: String,
}

impl Manifest {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &AnnotatedUtterance> {
        self.entries.iter().filter(move |e| e.split == which)
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedUtterance> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Writes one annotation CSV; the phone-class column appears only when a
/// segmentation is given.
pub fn save_annotation_csv(
    path: &Path,
    track: &FormantTrack,
    segmentation: Option<&PhoneSegmentation>,
) -> Result<()> {
    let k = track.num_formants();
    if k != 3 {
        return Err(Error::InvalidArgument(format!(
            "canonical annotation format carries exactly 3 formants, got {k}"
        )));
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    let mut header = vec![
        "frame", "f1_hz", "f2_hz", "f3_hz", "valid1", "valid2", "valid3",
    ];
    if segmentation.is_some() {
        header.push("phone_class");
    }
    w.write_record(&header)
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    for t in 0..track.num_frames() {
        let mut rec = vec![t.to_string()];
        for j in 0..3 {
            rec.push(format!("{:.3}", track.values[(t, j)]));
        }
        for j in 0..3 {
            rec.push(if track.valid[(t, j)] { "1" } else { "0" }.to_string());
        }
        if let Some(seg) = segmentation {
            let class = seg.class_at(t).map(|c| c.label()).unwrap_or("silence");
            rec.push(class.to_string());
        }
        w.write_record(&rec)
            .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads one annotation CSV back into a track plus optional segmentation.
pub fn load_annotation_csv(path: &Path) -> Result<(FormantTrack, Option<PhoneSegmentation>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { path: path.into(), line: 1, reason: e.to_string() })?
        .clone();
    let has_class = headers.iter().any(|h| h == "phone_class");
    let expected_cols = if has_class { 8 } else { 7 };
    if headers.len() != expected_cols {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            reason: format!("expected {expected_cols} columns, got {}", headers.len()),
        });
    }

    let mut values: Vec<[f64; 3]> = Vec::new();
    let mut valid: Vec<[bool; 3]> = Vec::new();
    let mut labels: Vec<BroadClass> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            line,
            reason: e.to_string(),
        })?;
        if record.len() != expected_cols {
            return Err(Error::Parse {
                path: path.into(),
                line,
                reason: format!("expected {expected_cols} columns, got {}", record.len()),
            });
        }
        let frame: usize = record[0].trim().parse().map_err(|_| Error::Parse {
            path: path.into(),
            line,
            reason: format!("bad frame index '{}'", &record[0]),
        })?;
        if frame != i {
            return Err(Error::Parse {
                path: path.into(),
                line,
                reason: format!("frame index {frame} out of order (expected {i})"),
            });
        }
        let mut freqs = [0.0f64; 3];
        let mut flags = [false; 3];
        for j in 0..3 {
            freqs[j] = record[1 + j].trim().parse().map_err(|_| Error::Parse {
                path: path.into(),
                line,
                reason: format!("bad frequency '{}'", &record[1 + j]),
            })?;
            flags[j] = match record[4 + j].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        path: path.into(),
                        line,
                        reason: format!("valid flag must be 0 or 1, got '{other}'"),
                    })
                }
            };
        }
        values.push(freqs);
        valid.push(flags);
        if has_class {
            labels.push(BroadClass::parse(&record[7]).map_err(|e| Error::Parse {
                path: path.into(),
                line,
                reason: e.to_string(),
            })?);
        }
    }

    let frames = values.len();
    let mut vm = Array2::zeros((frames, 3));
    let mut fm = Array2::from_elem((frames, 3), false);
    for t in 0..frames {
        for j in 0..3 {
            vm[(t, j)] = values[t][j];
            fm[(t, j)] = valid[t][j];
        }
    }
    let track = FormantTrack::new(vm, fm)?;
    let seg = has_class.then(|| PhoneSegmentation::from_frame_labels(&labels));
    Ok((track, seg))
}

/// One row of a manifest CSV before validation.
struct ManifestRow {
    id: String,
    audio_path: String,
    annotation_path: String,
    group: String,
    vowel: String,
    split: Split,
    speaker: String,
}

/// Loads and fully validates a manifest; any problem aborts the load.
pub fn load_manifest(path: &Path, signal: &SignalConfig) -> Result<Manifest> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { path: path.into(), line: 1, reason: e.to_string() })?
        .clone();
    let has_speaker = headers.iter().any(|h| h == "speaker");
    let expected = if has_speaker { 7 } else { 6 };
    if headers.len() != expected {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            reason: format!(
                "manifest header must be id,audio_path,annotation_path,group,vowel,split[,speaker]; got {} columns",
                headers.len()
            ),
        });
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            line,
            reason: e.to_string(),
        })?;
        if record.len() != expected {
            return Err(Error::Parse {
                path: path.into(),
                line,
                reason: format!("expected {expected} columns, got {}", record.len()),
            });
        }
        rows.push(ManifestRow {
            id: record[0].trim().to_string(),
            audio_path: record[1].trim().to_string(),
            annotation_path: record[2].trim().to_string(),
            group: record[3].trim().to_string(),
            vowel: record[4].trim().to_string(),
            split: Split::parse(&record[5]).map_err(|e| Error::Parse {
                path: path.into(),
                line,
                reason: e.to_string(),
            })?,
            speaker: if has_speaker {
                record[6].trim().to_string()
            } else {
                String::new()
            },
        });
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        if !seen.insert(row.id.clone()) {
            return Err(Error::ManifestEntry {
                id: row.id,
                reason: "duplicate id".into(),
            });
        }
        let audio_path = dir.join(&row.audio_path);
        let annotation_path = dir.join(&row.annotation_path);
        if !audio_path.exists() {
            return Err(Error::ManifestEntry {
                id: row.id,
                reason: format!("missing audio file {}", audio_path.display()),
            });
        }
        if !annotation_path.exists() {
            return Err(Error::ManifestEntry {
                id: row.id,
                reason: format!("missing annotation file {}", annotation_path.display()),
            });
        }
        let (track, segmentation) = load_annotation_csv(&annotation_path)?;
        let audio_frames = audio_frame_count(&audio_path, signal).map_err(|e| Error::ManifestEntry {
            id: row.id.clone(),
            reason: e.to_string(),
        })?;
        if track.num_frames() != audio_frames {
            return Err(Error::ManifestEntry {
                id: row.id,
                reason: format!(
                    "annotation has {} frames but audio yields {audio_frames}",
                    track.num_frames()
                ),
            });
        }
        entries.push(AnnotatedUtterance {
            id: row.id,
            audio_path,
            annotation_path,
            track,
            segmentation,
            group: (!row.group.is_empty()).then(|| row.group.clone()),
            vowel_label: (!row.vowel.is_empty()).then(|| row.vowel.clone()),
            speaker: (!row.speaker.is_empty()).then(|| row.speaker.clone()),
            split: row.split,
        });
    }
    Ok(Manifest {
        entries,
        source_name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".into()),
    })
}

fn audio_frame_count(path: &Path, signal: &SignalConfig) -> Result<usize> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;
    let len = reader.duration() as usize;
    signal.geometry.frame_count(len).ok_or(Error::UtteranceTooShort {
        len,
        min: signal.geometry.window_length,
    })
}

/// Writes a manifest CSV (paths are taken verbatim, so pass paths relative
/// to the manifest's directory).
pub fn save_manifest_csv(path: &Path, rows: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    w.write_record(["id", "audio_path", "annotation_path", "group", "vowel", "split"])
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    for r in rows {
        w.write_record([
            r.id.as_str(),
            r.audio_path.as_str(),
            r.annotation_path.as_str(),
            r.group.as_str(),
            r.vowel.as_str(),
            r.split.label(),
        ])
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Plain record used when writing manifests.
#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub annotation_path: String,
    pub group: String,
    pub vowel: String,
    pub split: Split,
}

/// Reassigns splits: within each group, a seeded random `fraction` of
/// speakers (or of utterances when no speaker ids exist) goes to test.
/// Speakers never straddle the two sides.
pub fn split_by_speaker_group(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must be in [0, 1], got {fraction}"
        )));
    }
    // Collect the speaker (or utterance) keys per group, sorted for
    // determinism before the seeded shuffle.
    let mut groups: std::collections::BTreeMap<String, Vec<String>> = Default::default();
    for e in &manifest.entries {
        let group = e.group.clone().unwrap_or_default();
        let key = e.speaker.clone().unwrap_or_else(|| e.id.clone());
        let keys = groups.entry(group).or_default();
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_keys: HashSet<(String, String)> = HashSet::new();
    for (group, mut keys) in groups {
        keys.sort();
        for i in (1..keys.len()).rev() {
            let j = rng.gen_range(0..=i);
            keys.swap(i, j);
        }
        let n_test = (keys.len() as f64 * fraction).round() as usize;
        for key in keys.into_iter().take(n_test) {
            test_keys.insert((group.clone(), key));
        }
    }
    let mut out = manifest.clone();
    for e in &mut out.entries {
        let group = e.group.clone().unwrap_or_default();
        let key = e.speaker.clone().unwrap_or_else(|| e.id.clone());
        e.split = if test_keys.contains(&(group, key)) {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(out)
}

/// Loads the audio for the selected split into training samples.
pub fn to_train_samples(
    manifest: &Manifest,
    which: Split,
    signal: &SignalConfig,
) -> Result<Vec<TrainSample>> {
    manifest
        .split(which)
        .map(|e| {
            let waveform = dsp::read_wav(&e.audio_path, signal.sample_rate)?;
            Ok(TrainSample {
                id: e.id.clone(),
                waveform,
                track: e.track.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, Cohort, GeneratorParams};

    fn write_corpus(dir: &Path, n: usize, seed: u64) -> PathBuf {
        let signal = SignalConfig::default();
        let corpus = generate_corpus(
            n,
            &[Cohort::Men, Cohort::Women],
            &GeneratorParams {
                duration_secs: 0.12,
                ..GeneratorParams::default()
            },
            &signal,
            seed,
        )
        .unwrap();
        let mut rows = Vec::new();
        for u in &corpus {
            let wav = format!("{}.wav", u.id);
            let ann = format!("{}.csv", u.id);
            dsp::write_wav(&dir.join(&wav), &u.waveform).unwrap();
            save_annotation_csv(&dir.join(&ann), &u.track, None).unwrap();
            rows.push(ManifestRecord {
                id: u.id.clone(),
                audio_path: wav,
                annotation_path: ann,
                group: u.cohort.label().to_string(),
                vowel: String::new(),
                split: Split::Train,
            });
        }
        let manifest_path = dir.join("manifest.csv");
        save_manifest_csv(&manifest_path, &rows).unwrap();
        manifest_path
    }

    #[test]
    fn manifest_roundtrip_loads_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), 4, 5);
        let signal = SignalConfig::default();
        let manifest = load_manifest(&path, &signal).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        for e in &manifest.entries {
            assert!(e.track.num_frames() > 0);
            assert!(e.group.is_some());
        }
        let samples = to_train_samples(&manifest, Split::Train, &signal).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0].track.num_frames(), manifest.entries[0].track.num_frames());
    }

    #[test]
    fn missing_audio_names_the_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), 2, 6);
        let signal = SignalConfig::default();
        let manifest = load_manifest(&path, &signal).unwrap();
        std::fs::remove_file(&manifest.entries[1].audio_path).unwrap();
        let err = load_manifest(&path, &signal).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&manifest.entries[1].id), "{msg}");
        assert!(msg.contains("missing audio"), "{msg}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), 2, 7);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let dup = lines[1];
        lines.push(dup);
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = load_manifest(&path, &SignalConfig::default()).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }

    #[test]
    fn wrong_column_count_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("bad.csv");
        std::fs::write(
            &ann,
            "frame,f1_hz,f2_hz,f3_hz,valid1,valid2,valid3\n0,500,1500,2500,1,1\n",
        )
        .unwrap();
        let err = load_annotation_csv(&ann).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn frame_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), 1, 8);
        let signal = SignalConfig::default();
        let manifest = load_manifest(&path, &signal).unwrap();
        // Truncate the annotation by one frame.
        let ann_path = &manifest.entries[0].annotation_path;
        let text = std::fs::read_to_string(ann_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(ann_path, lines[..lines.len() - 1].join("\n")).unwrap();
        let err = load_manifest(&path, &signal).unwrap_err();
        assert!(err.to_string().contains("frames"), "{err}");
    }

    #[test]
    fn annotation_roundtrip_with_segmentation() {
        let dir = tempfile::tempdir().unwrap();
        let track = FormantTrack::constant(&[500.0, 1500.0, 2500.0], 5);
        let seg = PhoneSegmentation::new(
            vec![(0, 2, BroadClass::Stop), (2, 5, BroadClass::Vowel)],
            5,
        )
        .unwrap();
        let path = dir.path().join("ann.csv");
        save_annotation_csv(&path, &track, Some(&seg)).unwrap();
        let (back, back_seg) = load_annotation_csv(&path).unwrap();
        assert_eq!(back.num_frames(), 5);
        assert_eq!(back_seg.unwrap(), seg);
        assert!((back.values[(0, 0)] - 500.0).abs() < 1e-9);
    }

    #[test]
    fn speaker_group_split_is_seeded_and_proportional() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), 18, 9);
        let signal = SignalConfig::default();
        let manifest = load_manifest(&path, &signal).unwrap();

        let a = split_by_speaker_group(&manifest, 1.0 / 3.0, 42).unwrap();
        let b = split_by_speaker_group(&manifest, 1.0 / 3.0, 42).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.split, y.split);
        }
        // Each group sends round(n/3) of its members to test.
        for group in ["men", "women"] {
            let total = manifest
                .entries
                .iter()
                .filter(|e| e.group.as_deref() == Some(group))
                .count();
            let test = a
                .entries
                .iter()
                .filter(|e| e.group.as_deref() == Some(group) && e.split == Split::Test)
                .count();
            assert_eq!(test, (total as f64 / 3.0).round() as usize, "group {group}");
        }
        let none = split_by_speaker_group(&manifest, 0.0, 1).unwrap();
        assert!(none.entries.iter().all(|e| e.split == Split::Train));
    }
}
