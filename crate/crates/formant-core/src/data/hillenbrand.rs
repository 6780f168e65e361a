//! Adapter seam for Hillenbrand-style steady-state vowel tables.
//!
//! Expected layout: a whitespace-separated text table, one utterance per
//! row, with columns
//! `id dur_ms f0 f1 f2 f3 f1_20 f2_20 f3_20 f1_50 f2_50 f3_50 f1_80 f2_80 f3_80`
//! where the first triple is the annotators' steady-point measurement and
//! the rest sample 20%, 50%, and 80% of the vowel duration. A value of 0
//! means unannotated. Lines starting with `#` are comments. The corpus is
//! license-gated; fixtures stand in for the real table.

use std::path::Path;

use crate::error::{Error, Result};

/// Per-utterance vowel measurements in Hz; `None` marks unannotated values.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyRecord {
    pub id: String,
    pub duration_ms: f64,
    pub f0: Option<f64>,
    pub steady: [Option<f64>; 3],
    pub at_20: [Option<f64>; 3],
    pub at_50: [Option<f64>; 3],
    pub at_80: [Option<f64>; 3],
}

impl SteadyRecord {
    /// The single gold value per formant used by the estimation protocol:
    /// the 50% point.
    pub fn gold_midpoint(&self) -> [Option<f64>; 3] {
        self.at_50
    }
}

pub fn read_steady_table(path: &Path) -> Result<Vec<SteadyRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                reason: format!("expected 15 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: i + 1,
                reason: format!("bad {what} '{s}'"),
            })
        };
        let opt = |v: f64| (v > 0.0).then_some(v);
        let triple = |base: usize| -> Result<[Option<f64>; 3]> {
            Ok([
                opt(num(fields[base], "frequency")?),
                opt(num(fields[base + 1], "frequency")?),
                opt(num(fields[base + 2], "frequency")?),
            ])
        };
        out.push(SteadyRecord {
            id: fields[0].to_string(),
            duration_ms: num(fields[1], "duration")?,
            f0: opt(num(fields[2], "f0")?),
            steady: triple(3)?,
            at_20: triple(6)?,
            at_50: triple(9)?,
            at_80: triple(12)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fixture_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steady.dat");
        std::fs::write(
            &path,
            "# id dur f0 steady(3) 20%(3) 50%(3) 80%(3)\n\
             m01ae 250 120 660 1720 2410 650 1700 2400 662 1725 2415 670 1730 2420\n\
             w12iy 230 210 430 2760 0 428 2750 0 432 2762 0 434 2770 0\n",
        )
        .unwrap();
        let records = read_steady_table(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, "m01ae");
        assert_eq!(records[0].steady[0], Some(660.0));
        assert_eq!(records[0].gold_midpoint()[1], Some(1725.0));
        // Missing F3 is None, not zero.
        assert_eq!(records[1].steady[2], None);
        assert_eq!(records[1].gold_midpoint()[2], None);
    }

    #[test]
    fn bad_field_count_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steady.dat");
        std::fs::write(&path, "m01ae 250 120 660\n").unwrap();
        let err = read_steady_table(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
