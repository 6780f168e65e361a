//! Single-file checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON header,
//! then a raw little-endian float payload. The header records the encoder and
//! decoder configs, the bin spec, the signal config, and a manifest of named,
//! shape-tagged tensors (parameters, batch-norm buffers, and optional extra
//! tensors such as optimizer state). Loading rebuilds the model from the
//! stored configs and fails on any missing, surplus, or misshapen tensor.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::SignalConfig;
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, EncoderConfig, FormantModel, ParamView, Real};
use crate::quantizer::BinSpec;

const MAGIC: &[u8; 8] = b"FMTRACK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    bin_spec: BinSpec,
    signal: SignalConfig,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
    extra_tensors: Vec<TensorEntry>,
    extra_meta: serde_json::Value,
}

/// Side data stored next to the model, e.g. optimizer state for resuming.
#[derive(Debug, Clone, Default)]
pub struct ExtraData<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<T>)>,
}

/// A checkpoint read back from disk.
pub struct Loaded<T> {
    pub model: FormantModel<T>,
    pub signal: SignalConfig,
    pub bin_spec: BinSpec,
    pub extra: Option<ExtraData<T>>,
}

pub fn save<T: Real>(
    path: &Path,
    model: &FormantModel<T>,
    signal: &SignalConfig,
    bin_spec: &BinSpec,
    extra: Option<&ExtraData<T>>,
) -> Result<()> {
    let mut payload: Vec<T> = Vec::new();
    let mut params = Vec::new();
    model.visit_params(&mut |p: ParamView<'_, T>| {
        params.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: payload.len(),
            len: p.value.len(),
        });
        payload.extend_from_slice(p.value);
    });
    let mut buffers = Vec::new();
    model.visit_buffers(&mut |p: ParamView<'_, T>| {
        buffers.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: payload.len(),
            len: p.value.len(),
        });
        payload.extend_from_slice(p.value);
    });
    let mut extra_tensors = Vec::new();
    let mut extra_meta = serde_json::Value::Null;
    if let Some(extra) = extra {
        extra_meta = extra.meta.clone();
        for (name, values) in &extra.tensors {
            extra_tensors.push(TensorEntry {
                name: name.clone(),
                shape: vec![values.len()],
                offset: payload.len(),
                len: values.len(),
            });
            payload.extend_from_slice(values);
        }
    }

    let header = Header {
        dtype: T::DTYPE.to_string(),
        encoder: model.encoder_config.clone(),
        decoder: model.decoder_config.clone(),
        bin_spec: *bin_spec,
        signal: *signal,
        params,
        buffers,
        extra_tensors,
        extra_meta,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in &payload {
        if T::DTYPE == "f32" {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Loaded<T>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;

    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype '{other}'"))),
    };
    if raw.len() % elem != 0 {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let payload: Vec<T> = raw
        .chunks_exact(elem)
        .map(|c| {
            if elem == 4 {
                T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)
            } else {
                T::from_f64(f64::from_le_bytes(c.try_into().unwrap()))
            }
        })
        .collect();

    let slice_of = |entry: &TensorEntry| -> Result<&[T]> {
        payload
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' out of bounds", entry.name)))
    };

    let mut model = FormantModel::<T>::new(
        header.encoder.clone(),
        header.decoder.clone(),
        header.bin_spec.num_bins,
        0,
    )?;

    fn by_name(entries: &[TensorEntry]) -> std::collections::HashMap<String, TensorEntry> {
        entries
            .iter()
            .map(|e| (e.name.clone(), e.clone()))
            .collect()
    }
    let param_map = by_name(&header.params);
    let buffer_map = by_name(&header.buffers);

    let mut problems: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    model.visit_params_mut(&mut |p| {
        seen.insert(p.name.clone());
        match param_map.get(&p.name) {
            None => problems.push(format!("missing parameter '{}'", p.name)),
            Some(entry) => {
                if entry.len != p.value.len() {
                    problems.push(format!(
                        "parameter '{}': expected {} values, file has {} (shape {:?})",
                        p.name,
                        p.value.len(),
                        entry.len,
                        entry.shape
                    ));
                } else if let Ok(src) = slice_of(entry) {
                    p.value.copy_from_slice(src);
                } else {
                    problems.push(format!("parameter '{}' payload out of bounds", p.name));
                }
            }
        }
    });
    for name in param_map.keys() {
        if !seen.contains(name) {
            problems.push(format!("file has surplus parameter '{name}'"));
        }
    }
    let mut seen_buf = std::collections::HashSet::new();
    model.visit_buffers_mut(&mut |name, values| {
        seen_buf.insert(name.to_string());
        match buffer_map.get(name) {
            None => problems.push(format!("missing buffer '{name}'")),
            Some(entry) => {
                if entry.len != values.len() {
                    problems.push(format!("buffer '{name}': length mismatch"));
                } else if let Ok(src) = slice_of(entry) {
                    values.copy_from_slice(src);
                } else {
                    problems.push(format!("buffer '{name}' payload out of bounds"));
                }
            }
        }
    });
    for name in buffer_map.keys() {
        if !seen_buf.contains(name) {
            problems.push(format!("file has surplus buffer '{name}'"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }

    let extra = if header.extra_tensors.is_empty() && header.extra_meta.is_null() {
        None
    } else {
        let mut tensors = Vec::new();
        for entry in &header.extra_tensors {
            tensors.push((entry.name.clone(), slice_of(entry)?.to_vec()));
        }
        Some(ExtraData {
            meta: header.extra_meta,
            tensors,
        })
    };

    Ok(Loaded {
        model,
        signal: header.signal,
        bin_spec: header.bin_spec,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (FormantModel<f32>, SignalConfig, BinSpec) {
        let enc = EncoderConfig {
            channel_plan: vec![1, 3, 1],
            kernel: 3,
            dropout_rate: 0.1,
            uses_batchnorm: true,
        };
        let dec = DecoderConfig {
            bottleneck_plan: vec![9, 4, 9],
            time_kernel: 3,
            bias_enabled: false,
            num_heads: 2,
            dropout_rate: 0.1,
            uses_batchnorm: true,
        };
        let model = FormantModel::new(enc, dec, 9, 42).unwrap();
        let bin_spec = BinSpec {
            bin_width: 31.25,
            num_bins: 9,
            max_hz: 250.0,
        };
        (model, SignalConfig::default(), bin_spec)
    }

    #[test]
    fn roundtrip_restores_every_parameter() {
        let (model, signal, bins) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &signal, &bins, None).unwrap();
        let loaded = load::<f32>(&path).unwrap();

        let mut orig = Vec::new();
        model.visit_params(&mut |p| orig.push((p.name.clone(), p.value.to_vec())));
        let mut back = Vec::new();
        loaded.model.visit_params(&mut |p| back.push((p.name.clone(), p.value.to_vec())));
        assert_eq!(orig.len(), back.len());
        for ((n1, v1), (n2, v2)) in orig.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        assert_eq!(loaded.bin_spec, bins);
    }

    #[test]
    fn extra_tensors_roundtrip() {
        let (model, signal, bins) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let extra = ExtraData {
            meta: serde_json::json!({"epoch": 17}),
            tensors: vec![("adam.m.test".into(), vec![1.0f32, 2.0, 3.0])],
        };
        save(&path, &model, &signal, &bins, Some(&extra)).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        let extra = loaded.extra.unwrap();
        assert_eq!(extra.meta["epoch"], 17);
        assert_eq!(extra.tensors[0].1, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn mismatched_config_fails_loudly() {
        let (model, signal, bins) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &signal, &bins, None).unwrap();

        // Corrupt the header so the decoder plan disagrees with the tensors.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_str = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let tampered = header_str.replace("[9,4,9]", "[9,5,9]");
        assert_ne!(header_str, tampered);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        std::fs::write(&path, out).unwrap();

        let err = match load::<f32>(&path) {
            Err(e) => e,
            Ok(_) => panic!("tampered checkpoint loaded successfully"),
        };
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn f32_checkpoint_loads_into_f64_model() {
        let (model, signal, bins) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &signal, &bins, None).unwrap();
        let loaded = load::<f64>(&path).unwrap();
        let mut orig = Vec::new();
        model.visit_params(&mut |p| orig.push(p.value.to_vec()));
        let mut back = Vec::new();
        loaded.model.visit_params(&mut |p| back.push(p.value.to_vec()));
        for (v1, v2) in orig.iter().zip(&back) {
            for (a, b) in v1.iter().zip(v2) {
                assert_eq!(*a as f64, *b);
            }
        }
    }
}
