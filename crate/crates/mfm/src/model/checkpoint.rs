//! Single-file parameter checkpoints: a plain-text manifest (config, tensor
//! names, shapes, frozen flags, byte offsets) followed by raw little-endian
//! 32-bit float payloads. Loading validates every tensor against the
//! expected configuration's catalog.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{tensor_catalog, ModelConfig, ParameterStore, Tensor, TuningMode};
use crate::error::{Error, Result};

const MAGIC: &str = "mfm-checkpoint v1";

fn config_line(cfg: &ModelConfig) -> String {
    format!(
        "config {} {} {} {} {} {} {} {} {} {} {}",
        cfg.l,
        cfg.d,
        cfg.h,
        cfg.d_ff,
        cfg.v,
        cfg.d_v,
        cfg.k,
        cfg.r,
        cfg.max_len,
        cfg.max_whole_words,
        cfg.tuning_mode.as_str()
    )
}

fn parse_config_line(line: &str) -> Result<ModelConfig> {
    let bad = |msg: &str| Error::Checkpoint(format!("malformed config line: {msg}"));
    let mut parts = line.split_whitespace();
    if parts.next() != Some("config") {
        return Err(bad("missing 'config' keyword"));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        parts
            .next()
            .ok_or_else(|| bad(&format!("missing field {what}")))?
            .parse::<usize>()
            .map_err(|_| bad(&format!("field {what} is not an integer")))
    };
    let l = next_usize("l")?;
    let d = next_usize("d")?;
    let h = next_usize("h")?;
    let d_ff = next_usize("d_ff")?;
    let v = next_usize("v")?;
    let d_v = next_usize("d_v")?;
    let k = next_usize("k")?;
    let r = next_usize("r")?;
    let max_len = next_usize("max_len")?;
    let max_whole_words = next_usize("max_whole_words")?;
    let mode = parts
        .next()
        .and_then(TuningMode::parse)
        .ok_or_else(|| bad("missing or unknown tuning mode"))?;
    if parts.next().is_some() {
        return Err(bad("trailing fields"));
    }
    Ok(ModelConfig {
        l,
        d,
        h,
        d_ff,
        v,
        d_v,
        k,
        r,
        max_len,
        max_whole_words,
        tuning_mode: mode,
    })
}

/// Write the store to `path` as one self-describing file. Byte-identical for
/// identical parameter values.
pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&config_line(&store.config));
    header.push('\n');
    header.push_str(&format!("tensors {}\n", store.len()));

    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in store.iter() {
        let (rows, cols) = tensor.data.dim();
        header.push_str(&format!(
            "tensor {} {} {} {} {}\n",
            name,
            rows,
            cols,
            if tensor.frozen { 1 } else { 0 },
            payload.len()
        ));
        for &v in tensor.data.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    header.push_str(&format!("data {}\n", payload.len()));

    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

/// Read a checkpoint and validate it against `expected`: the embedded config
/// must match, and the tensor set, shapes, and frozen flags must agree with
/// the catalog for that config.
pub fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<ParameterStore> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let line = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Checkpoint("header is not valid text".into()))?
            .to_string();
        pos += 1;
        Ok(line)
    };

    if next_line(&bytes)? != MAGIC {
        return Err(Error::Checkpoint("unrecognized file magic".into()));
    }
    let cfg = parse_config_line(&next_line(&bytes)?)?;
    if cfg != *expected {
        return Err(Error::Checkpoint(format!(
            "configuration mismatch: file has '{}', expected '{}'",
            config_line(&cfg),
            config_line(expected)
        )));
    }

    let count_line = next_line(&bytes)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("malformed tensor count line".into()))?;

    struct Entry {
        name: String,
        rows: usize,
        cols: usize,
        frozen: bool,
        offset: usize,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&bytes)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "tensor" {
            return Err(Error::Checkpoint(format!("malformed tensor line '{line}'")));
        }
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Checkpoint(format!("bad {what} in line '{line}'")))
        };
        entries.push(Entry {
            name: parts[1].to_string(),
            rows: parse(parts[2], "rows")?,
            cols: parse(parts[3], "cols")?,
            frozen: match parts[4] {
                "0" => false,
                "1" => true,
                _ => return Err(Error::Checkpoint(format!("bad frozen flag in '{line}'"))),
            },
            offset: parse(parts[5], "offset")?,
        });
    }

    let data_line = next_line(&bytes)?;
    let payload_len: usize = data_line
        .strip_prefix("data ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("malformed data line".into()))?;
    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(Error::Checkpoint(format!(
            "payload length mismatch: header says {payload_len}, file has {}",
            payload.len()
        )));
    }

    // The file must contain exactly the catalog of the expected config.
    let catalog = tensor_catalog(expected);
    if entries.len() != catalog.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: file has {}, catalog expects {}",
            entries.len(),
            catalog.len()
        )));
    }
    let mut store = ParameterStore::empty(expected.clone());
    let mut by_name: std::collections::BTreeMap<&str, &Entry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for spec in &catalog {
        let e = by_name.remove(spec.name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("missing tensor '{}' in checkpoint", spec.name))
        })?;
        if e.rows != spec.rows || e.cols != spec.cols {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {}x{}, catalog expects {}x{}",
                spec.name, e.rows, e.cols, spec.rows, spec.cols
            )));
        }
        let frozen = !spec.trainable(expected.tuning_mode);
        if e.frozen != frozen {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' frozen flag {} disagrees with mode {}",
                spec.name,
                e.frozen,
                expected.tuning_mode.as_str()
            )));
        }
        let n = e.rows * e.cols;
        let end = e.offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' payload runs past end of file",
                spec.name
            )));
        }
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let o = e.offset + 4 * i;
            let raw: [u8; 4] = payload[o..o + 4].try_into().expect("4-byte slice");
            values.push(f32::from_le_bytes(raw) as f64);
        }
        let data = Array2::from_shape_vec((e.rows, e.cols), values)
            .expect("shape agrees with length by construction");
        store.insert(spec.name.clone(), Tensor { data, frozen });
    }
    Ok(store)
}
