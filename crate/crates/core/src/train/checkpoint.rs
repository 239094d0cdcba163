//! Checkpoint serialization.
//!
//! Layout: magic `EFNM`, format version (u16 LE), 32-byte SHA-256 digest of
//! the canonical model-config encoding, then one record per tensor:
//! name length (u16 LE), UTF-8 name, rank (u8), extents (u32 LE each),
//! values (f32 LE). Records cover the model parameters, the normalization
//! statistics (`norm.mean`, `norm.std`), and optimizer state (`opt.step`,
//! `opt.m.*`, `opt.v.*`) so training can resume deterministically.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, config_digest, EffNetMini, ModelConfig};
use crate::tensor::Tensor;

use super::adam::Adam;

pub const MAGIC: &[u8; 4] = b"EFNM";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u16,
    /// Hex encoding of the stored config digest.
    pub digest: String,
    pub records: Vec<CheckpointRecord>,
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&CheckpointRecord> {
        self.records.iter().find(|r| r.name == name)
    }
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize model weights, normalization stats and optimizer state.
pub fn save_checkpoint(
    path: &Path,
    model: &EffNetMini,
    channel_mean: [f64; 3],
    channel_std: [f64; 3],
    optimizer: Option<&Adam>,
) -> Result<()> {
    let digest_hex = config_digest(&model.config);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&hex_to_bytes(&digest_hex)?);

    let params = model.params();
    for (name, t) in &params {
        push_record(&mut bytes, name, t.shape(), t.data().iter().map(|&v| v as f32));
    }
    push_record(&mut bytes, "norm.mean", &[3], channel_mean.iter().map(|&v| v as f32));
    push_record(&mut bytes, "norm.std", &[3], channel_std.iter().map(|&v| v as f32));
    if let Some(opt) = optimizer {
        push_record(
            &mut bytes,
            "opt.step",
            &[1],
            std::iter::once(opt.step_count() as f32),
        );
        let (m, v) = opt.moments();
        for (i, (name, t)) in params.iter().enumerate() {
            if i < m.len() {
                push_record(&mut bytes, &format!("opt.m.{name}"), t.shape(), m[i].iter().map(|&x| x as f32));
                push_record(&mut bytes, &format!("opt.v.{name}"), t.shape(), v[i].iter().map(|&x| x as f32));
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// Parse a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::data(format!(
                "checkpoint truncated at byte {} of {}",
                *pos,
                bytes.len()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::data("not a checkpoint: bad magic bytes".to_string()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint format version {version} unsupported (expected {VERSION})"
        )));
    }
    let digest: String = take(&mut pos, 32)?.iter().map(|b| format!("{b:02x}")).collect();

    let mut records = Vec::new();
    while pos < bytes.len() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::data("checkpoint record name is not utf-8".to_string()))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(CheckpointRecord { name, shape, values });
    }
    Ok(Checkpoint {
        version,
        digest,
        records,
    })
}

/// Rebuild a model from config + checkpoint. Refuses to load when the
/// stored digest does not match the config (prevents config/weight skew).
/// Returns the model and the stored normalization statistics.
pub fn restore_model(
    cfg: &ModelConfig,
    ckpt: &Checkpoint,
) -> Result<(EffNetMini, [f64; 3], [f64; 3])> {
    let expected = config_digest(cfg);
    if ckpt.digest != expected {
        return Err(Error::data(format!(
            "checkpoint digest {} does not match config digest {expected}; refusing to load",
            ckpt.digest
        )));
    }
    let by_name: HashMap<&str, &CheckpointRecord> =
        ckpt.records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut model = build_model(cfg)?;
    for (name, p) in model.params_mut() {
        let rec = by_name.get(name.as_str()).ok_or_else(|| {
            Error::data(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if rec.shape != p.shape() {
            return Err(Error::data(format!(
                "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                rec.shape,
                p.shape()
            )));
        }
        let data: Vec<f64> = rec.values.iter().map(|&v| v as f64).collect();
        *p = Tensor::from_vec(p.shape(), data, true)?;
    }
    let stat = |name: &str| -> Result<[f64; 3]> {
        let rec = by_name
            .get(name)
            .ok_or_else(|| Error::data(format!("checkpoint is missing `{name}`")))?;
        if rec.values.len() != 3 {
            return Err(Error::data(format!("`{name}` must have 3 values")));
        }
        Ok([rec.values[0] as f64, rec.values[1] as f64, rec.values[2] as f64])
    };
    let mean = stat("norm.mean")?;
    let std = stat("norm.std")?;
    Ok((model, mean, std))
}

fn hex_to_bytes(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(Error::data(format!("digest hex length {} != 64", hex.len())));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in hex.as_bytes().chunks_exact(2).enumerate() {
        let s = std::str::from_utf8(chunk).map_err(|_| Error::data("bad digest hex".to_string()))?;
        out[i] = u8::from_str_radix(s, 16).map_err(|_| Error::data("bad digest hex".to_string()))?;
    }
    Ok(out)
}
