//! Adapter seam for VTR-style `.fb` annotation files.
//!
//! Expected layout (from the dataset's own conventions): a headerless
//! binary stream of little-endian `f32` values, eight per 10 ms frame —
//! F1..F4 followed by B1..B4, all in kHz. The first three formants are
//! converted to Hz; a non-positive frequency marks the entry invalid. The
//! fourth formant is never manually corrected upstream, so it is dropped
//! here. The corpus itself is license-gated; this reader is exercised by
//! fixture files only.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::quantizer::FormantTrack;

pub const VALUES_PER_FRAME: usize = 8;

/// Reads a `.fb` file into a three-formant track on the 10 ms grid.
pub fn read_fb_track(path: &Path) -> Result<FormantTrack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_fb_bytes(&bytes).map_err(|reason| Error::Parse {
        path: path.into(),
        line: 0,
        reason,
    })
}

fn parse_fb_bytes(bytes: &[u8]) -> std::result::Result<FormantTrack, String> {
    let frame_bytes = VALUES_PER_FRAME * 4;
    if bytes.is_empty() {
        return Err("empty file".into());
    }
    if bytes.len() % frame_bytes != 0 {
        return Err(format!(
            "length {} is not a multiple of {frame_bytes} bytes per frame",
            bytes.len()
        ));
    }
    let frames = bytes.len() / frame_bytes;
    let mut values = Array2::zeros((frames, 3));
    let mut valid = Array2::from_elem((frames, 3), false);
    for t in 0..frames {
        for j in 0..3 {
            let off = t * frame_bytes + j * 4;
            let khz = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !khz.is_finite() {
                return Err(format!("non-finite value at frame {t}"));
            }
            if khz > 0.0 {
                values[(t, j)] = khz as f64 * 1000.0;
                valid[(t, j)] = true;
            }
        }
    }
    FormantTrack::new(values, valid).map_err(|e| e.to_string())
}
