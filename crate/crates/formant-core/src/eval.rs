//! Evaluation protocols: frame-wise tracking MAE by broad phone class,
//! vowel-segment estimation error, transition-window MAE around
//! consonant/vowel boundaries, and the per-group vowel polygon export.
//!
//! All metrics accumulate `(sum, count)` cells, so results are invariant to
//! utterance order and empty cells stay visibly empty instead of reading as
//! zero.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::FormantTrack;

/// Broad phone classes used for tracking breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BroadClass {
    Vowel,
    Semivowel,
    Nasal,
    Fricative,
    Affricate,
    Stop,
    Silence,
}

impl BroadClass {
    pub fn label(self) -> &'static str {
        match self {
            BroadClass::Vowel => "vowel",
            BroadClass::Semivowel => "semivowel",
            BroadClass::Nasal => "nasal",
            BroadClass::Fricative => "fricative",
            BroadClass::Affricate => "affricate",
            BroadClass::Stop => "stop",
            BroadClass::Silence => "silence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "vowel" => Ok(BroadClass::Vowel),
            "semivowel" => Ok(BroadClass::Semivowel),
            "nasal" => Ok(BroadClass::Nasal),
            "fricative" => Ok(BroadClass::Fricative),
            "affricate" => Ok(BroadClass::Affricate),
            "stop" => Ok(BroadClass::Stop),
            "silence" => Ok(BroadClass::Silence),
            other => Err(Error::InvalidArgument(format!("unknown phone class '{other}'"))),
        }
    }

    /// Everything that is neither a vowel nor silence.
    pub fn is_consonant(self) -> bool {
        !matches!(self, BroadClass::Vowel | BroadClass::Silence)
    }

    pub fn all() -> [BroadClass; 7] {
        [
            BroadClass::Vowel,
            BroadClass::Semivowel,
            BroadClass::Nasal,
            BroadClass::Fricative,
            BroadClass::Affricate,
            BroadClass::Stop,
            BroadClass::Silence,
        ]
    }
}

/// Maps a TIMIT phone symbol to its broad class using the bundled table.
pub fn phone_to_broad_class(phone: &str) -> Option<BroadClass> {
    static TABLE: OnceLock<BTreeMap<String, BroadClass>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut map = BTreeMap::new();
        for line in include_str!("../data/timit_phone_classes.csv").lines().skip(1) {
            let mut parts = line.split(',');
            if let (Some(phone), Some(class)) = (parts.next(), parts.next()) {
                if let Ok(c) = BroadClass::parse(class) {
                    map.insert(phone.trim().to_string(), c);
                }
            }
        }
        map
    });
    table.get(phone.trim()).copied()
}

/// Non-overlapping, sorted intervals `[start, end)` of broad classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneSegmentation {
    pub intervals: Vec<(usize, usize, BroadClass)>,
}

impl PhoneSegmentation {
    pub fn new(intervals: Vec<(usize, usize, BroadClass)>, num_frames: usize) -> Result<Self> {
        let mut prev_end = 0;
        for &(start, end, _) in &intervals {
            if start >= end {
                return Err(Error::InvalidArgument(format!(
                    "empty interval [{start}, {end})"
                )));
            }
            if start < prev_end {
                return Err(Error::InvalidArgument(format!(
                    "intervals overlap or are unsorted at frame {start}"
                )));
            }
            if end > num_frames {
                return Err(Error::InvalidArgument(format!(
                    "interval end {end} exceeds {num_frames} frames"
                )));
            }
            prev_end = end;
        }
        Ok(Self { intervals })
    }

    /// Builds intervals from one class label per frame.
    pub fn from_frame_labels(labels: &[BroadClass]) -> Self {
        let mut intervals = Vec::new();
        let mut start = 0;
        for t in 1..=labels.len() {
            if t == labels.len() || labels[t] != labels[start] {
                intervals.push((start, t, labels[start]));
                start = t;
            }
        }
        Self { intervals }
    }

    pub fn class_at(&self, frame: usize) -> Option<BroadClass> {
        self.intervals
            .iter()
            .find(|&&(s, e, _)| frame >= s && frame < e)
            .map(|&(_, _, c)| c)
    }
}

/// Accumulating mean-absolute-error cell. An untouched cell renders as
/// absent rather than zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sum: f64,
    pub count: usize,
}

impl Cell {
    pub fn add(&mut self, err: f64) {
        self.sum += err;
        self.count += 1;
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_formants: usize,
    pub tracking: BTreeMap<BroadClass, Vec<Cell>>,
    pub estimation: Vec<Cell>,
    pub transition_cv: Vec<Cell>,
    pub transition_vc: Vec<Cell>,
    /// Transition windows skipped because the boundary sat within three
    /// frames of an utterance edge.
    pub skipped_windows: usize,
    /// Gold-valid frames the prediction had no value for.
    pub missing_predictions: usize,
}

impl EvalReport {
    pub fn new(num_formants: usize) -> Self {
        Self {
            num_formants,
            estimation: vec![Cell::default(); num_formants],
            transition_cv: vec![Cell::default(); num_formants],
            transition_vc: vec![Cell::default(); num_formants],
            ..Self::default()
        }
    }

    /// Frame-wise tracking MAE grouped by broad class; silence frames are
    /// excluded, as are frames without a valid gold annotation.
    pub fn add_tracking(
        &mut self,
        pred: &FormantTrack,
        gold: &FormantTrack,
        seg: &PhoneSegmentation,
    ) -> Result<()> {
        if pred.num_frames() != gold.num_frames() {
            return Err(Error::shape("tracking frames", gold.num_frames(), pred.num_frames()));
        }
        let k = self.num_formants.min(gold.num_formants());
        for &(start, end, class) in &seg.intervals {
            if class == BroadClass::Silence {
                continue;
            }
            for t in start..end.min(gold.num_frames()) {
                for j in 0..k {
                    if !gold.valid[(t, j)] {
                        continue;
                    }
                    if j >= pred.num_formants() || !pred.valid[(t, j)] {
                        self.missing_predictions += 1;
                        continue;
                    }
                    let err = (pred.values[(t, j)] - gold.values[(t, j)]).abs();
                    self.tracking
                        .entry(class)
                        .or_insert_with(|| vec![Cell::default(); self.num_formants])[j]
                        .add(err);
                }
            }
        }
        Ok(())
    }

    /// Vowel-segment estimation: the prediction is averaged over the vowel
    /// interval and compared against one annotated value per formant.
    /// `gold_points[j]` of `None` marks an unannotated formant to skip.
    pub fn add_estimation(
        &mut self,
        pred: &FormantTrack,
        gold_points: &[Option<f64>],
        vowel_interval: (usize, usize),
    ) -> Result<()> {
        let (start, end) = vowel_interval;
        if start >= end || end > pred.num_frames() {
            return Err(Error::InvalidArgument(format!(
                "bad vowel interval [{start}, {end}) for {} frames",
                pred.num_frames()
            )));
        }
        for (j, gold) in gold_points.iter().enumerate().take(self.num_formants) {
            let Some(gold) = gold else { continue };
            let mut sum = 0.0;
            let mut n = 0usize;
            for t in start..end {
                if j < pred.num_formants() && pred.valid[(t, j)] {
                    sum += pred.values[(t, j)];
                    n += 1;
                }
            }
            if n == 0 {
                self.missing_predictions += 1;
                continue;
            }
            self.estimation[j].add((sum / n as f64 - gold).abs());
        }
        Ok(())
    }

    /// Six-frame transition windows: the last three frames of the left
    /// interval plus the first three of the right, wherever a consonant
    /// interval meets a vowel interval. Boundaries within three frames of an
    /// utterance edge are skipped and counted.
    pub fn add_transitions(
        &mut self,
        pred: &FormantTrack,
        gold: &FormantTrack,
        seg: &PhoneSegmentation,
    ) -> Result<()> {
        if pred.num_frames() != gold.num_frames() {
            return Err(Error::shape("transition frames", gold.num_frames(), pred.num_frames()));
        }
        let total = gold.num_frames();
        for w in seg.intervals.windows(2) {
            let (left, right) = (w[0], w[1]);
            if left.1 != right.0 {
                continue; // not adjacent
            }
            let cv = left.2.is_consonant() && right.2 == BroadClass::Vowel;
            let vc = left.2 == BroadClass::Vowel && right.2.is_consonant();
            if !cv && !vc {
                continue;
            }
            let boundary = right.0;
            if boundary < 3 || boundary + 3 > total {
                self.skipped_windows += 1;
                continue;
            }
            let left_lo = left.0.max(left.1.saturating_sub(3));
            let right_hi = right.1.min(right.0 + 3);
            let frames = (left_lo..left.1).chain(right.0..right_hi);
            for t in frames {
                for j in 0..self.num_formants.min(gold.num_formants()) {
                    if !gold.valid[(t, j)] {
                        continue;
                    }
                    if j >= pred.num_formants() || !pred.valid[(t, j)] {
                        self.missing_predictions += 1;
                        continue;
                    }
                    let err = (pred.values[(t, j)] - gold.values[(t, j)]).abs();
                    if cv {
                        self.transition_cv[j].add(err);
                    } else {
                        self.transition_vc[j].add(err);
                    }
                }
            }
        }
        Ok(())
    }

    /// MAE over all tracked classes pooled together, per formant.
    pub fn tracking_overall(&self) -> Vec<Cell> {
        let mut out = vec![Cell::default(); self.num_formants];
        for cells in self.tracking.values() {
            for (o, c) in out.iter_mut().zip(cells) {
                o.sum += c.sum;
                o.count += c.count;
            }
        }
        out
    }

    /// Human-readable aligned table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let fmt_cell = |c: &Cell| match c.mae() {
            Some(v) => format!("{v:8.1} ({:5})", c.count),
            None => format!("{:8} ({:5})", "-", 0),
        };
        out.push_str("tracking MAE in Hz by broad class\n");
        out.push_str(&format!("{:<12}", "class"));
        for j in 1..=self.num_formants {
            out.push_str(&format!("  F{j} mae (count)"));
        }
        out.push('\n');
        for class in BroadClass::all() {
            if class == BroadClass::Silence {
                continue;
            }
            if let Some(cells) = self.tracking.get(&class) {
                out.push_str(&format!("{:<12}", class.label()));
                for c in cells {
                    out.push_str(&format!("  {}", fmt_cell(c)));
                }
                out.push('\n');
            }
        }
        out.push_str("\nestimation MAE in Hz (vowel segments)\n");
        out.push_str(&format!("{:<12}", "all"));
        for c in &self.estimation {
            out.push_str(&format!("  {}", fmt_cell(c)));
        }
        out.push('\n');
        out.push_str("\ntransition MAE in Hz (six-frame windows)\n");
        out.push_str(&format!("{:<12}", "CV"));
        for c in &self.transition_cv {
            out.push_str(&format!("  {}", fmt_cell(c)));
        }
        out.push('\n');
        out.push_str(&format!("{:<12}", "VC"));
        for c in &self.transition_vc {
            out.push_str(&format!("  {}", fmt_cell(c)));
        }
        out.push('\n');
        out.push_str(&format!(
            "\nskipped transition windows: {}\nmissing predictions: {}\n",
            self.skipped_windows, self.missing_predictions
        ));
        out
    }

    /// Machine-readable long-format CSV:
    /// `section,group,formant,mae_hz,count`. Empty cells are omitted.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
        w.write_record(["section", "group", "formant", "mae_hz", "count"])
            .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
        let mut write_cells = |section: &str, group: &str, cells: &[Cell]| -> Result<()> {
            for (j, c) in cells.iter().enumerate() {
                if let Some(mae) = c.mae() {
                    w.write_record([
                        section,
                        group,
                        &format!("f{}", j + 1),
                        &format!("{mae:.3}"),
                        &c.count.to_string(),
                    ])
                    .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
                }
            }
            Ok(())
        };
        for (class, cells) in &self.tracking {
            write_cells("tracking", class.label(), cells)?;
        }
        write_cells("estimation", "all", &self.estimation)?;
        write_cells("transition", "cv", &self.transition_cv)?;
        write_cells("transition", "vc", &self.transition_vc)?;
        Ok(())
    }
}

/// One utterance's contribution to the vowel polygon: its track, vowel
/// label, speaker group, and optionally the vowel interval to average over.
pub struct VowelMeasurement<'a> {
    pub track: &'a FormantTrack,
    pub vowel: &'a str,
    pub group: &'a str,
    pub interval: Option<(usize, usize)>,
}

/// Per-(group, vowel) mean F1/F2 row for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolygonRow {
    pub group: String,
    pub vowel: String,
    pub mean_f1: f64,
    pub mean_f2: f64,
    pub count: usize,
}

/// Averages F1/F2 per utterance over its vowel interval, then per
/// (group, vowel) across utterances. Cells with no contributing utterance
/// are omitted.
pub fn vowel_polygon(measurements: &[VowelMeasurement<'_>]) -> Vec<PolygonRow> {
    let mut cells: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    for m in measurements {
        let (start, end) = m.interval.unwrap_or((0, m.track.num_frames()));
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for t in start..end.min(m.track.num_frames()) {
            for j in 0..2usize.min(m.track.num_formants()) {
                if m.track.valid[(t, j)] {
                    sums[j] += m.track.values[(t, j)];
                    counts[j] += 1;
                }
            }
        }
        if counts[0] == 0 || counts[1] == 0 {
            continue;
        }
        let entry = cells
            .entry((m.group.to_string(), m.vowel.to_string()))
            .or_insert((0.0, 0.0, 0));
        entry.0 += sums[0] / counts[0] as f64;
        entry.1 += sums[1] / counts[1] as f64;
        entry.2 += 1;
    }
    cells
        .into_iter()
        .map(|((group, vowel), (f1, f2, n))| PolygonRow {
            group,
            vowel,
            mean_f1: f1 / n as f64,
            mean_f2: f2 / n as f64,
            count: n,
        })
        .collect()
}

/// Writes polygon rows as CSV: `group,vowel,mean_f1,mean_f2,count`.
pub fn write_polygon_csv(path: &Path, rows: &[PolygonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    w.write_record(["group", "vowel", "mean_f1", "mean_f2", "count"])
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    for r in rows {
        w.write_record([
            r.group.as_str(),
            r.vowel.as_str(),
            &format!("{:.2}", r.mean_f1),
            &format!("{:.2}", r.mean_f2),
            &r.count.to_string(),
        ])
        .map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    }
    Ok(())
}
