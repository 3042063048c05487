//! Model checkpoint format.
//!
//! Layout: magic `OAE1`, format version (u32), tensor count (u32), then
//! per tensor: name length (u32) + UTF-8 name, rank (u32), dims (u64
//! each), dtype code (u32, 0 = f32), raw little-endian f32 values. The
//! file ends with a 64-bit FNV-1a checksum of every preceding byte.
//! All integers little-endian.
//!
//! Weights are stored and trained as f32, so `load(save(w))` is bitwise
//! identical to `w`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::files::take;
use super::DataError;
use crate::transformer::{ModelConfig, ModelWeights};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OAE1";
pub const CHECKPOINT_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// How a load treats parameter-name differences between file and model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// File and model must hold exactly the same parameter names.
    Strict,
    /// Missing parameters keep their initial values, extra file entries
    /// are ignored; both are listed in the returned report.
    Permissive,
}

/// Names that differed between file and model during a permissive load.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Model parameters absent from the file.
    pub missing: Vec<String>,
    /// File tensors with no model counterpart.
    pub extra: Vec<String>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty()
    }
}

pub fn save_checkpoint(weights: &ModelWeights<f32>, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, tensor) in weights.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&0u32.to_le_bytes()); // dtype 0 = f32
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint into a fresh parameter set for `cfg`. Shape
/// mismatches on any present tensor are errors in both modes; name-set
/// differences are errors only in strict mode.
pub fn load_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    mode: LoadMode,
) -> Result<(ModelWeights<f32>, LoadReport), DataError> {
    let buf = fs::read(path)?;
    if buf.len() < 8 {
        return Err(DataError::Truncated {
            offset: buf.len() as u64,
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(DataError::ChecksumMismatch { stored, computed });
    }

    let mut off = 0usize;
    let magic = take(body, &mut off, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            expected: "OAE1",
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = read_u32(body, &mut off)?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::UnsupportedVersion { version });
    }
    let count = read_u32(body, &mut off)? as usize;

    let mut entries: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    let mut order: Vec<String> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(body, &mut off)? as usize;
        let name_off = off as u64;
        let name_bytes = take(body, &mut off, name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| DataError::InvalidTensorName { offset: name_off })?
            .to_string();
        let rank = read_u32(body, &mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = take(body, &mut off, 8)?;
            shape.push(u64::from_le_bytes(d.try_into().expect("8 bytes")) as usize);
        }
        let dtype = read_u32(body, &mut off)?;
        if dtype != 0 {
            return Err(DataError::UnknownDtype { dtype, name });
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = take(body, &mut off, 4)?;
            values.push(f32::from_le_bytes(v.try_into().expect("4 bytes")));
        }
        order.push(name.clone());
        entries.insert(name, (shape, values));
    }
    if off != body.len() {
        return Err(DataError::TrailingBytes { offset: off as u64 });
    }

    let mut weights = ModelWeights::<f32>::init(cfg, 0)?;
    let model_names: Vec<String> = weights.iter().map(|(n, _)| n.to_string()).collect();
    let missing: Vec<String> = model_names
        .iter()
        .filter(|n| !entries.contains_key(*n))
        .cloned()
        .collect();
    let extra: Vec<String> = order
        .iter()
        .filter(|n| !model_names.iter().any(|m| m == *n))
        .cloned()
        .collect();
    if mode == LoadMode::Strict && (!missing.is_empty() || !extra.is_empty()) {
        return Err(DataError::NameSetMismatch { missing, extra });
    }

    for (index, name) in model_names.iter().enumerate() {
        let Some((shape, values)) = entries.get(name) else {
            continue;
        };
        if weights.value(index).shape() != shape.as_slice() {
            return Err(DataError::TensorShapeMismatch {
                name: name.clone(),
                expected: weights.value(index).shape().to_vec(),
                got: shape.clone(),
            });
        }
        let tensor = crate::tensor::Tensor::from_vec(shape.clone(), values.clone())
            .map_err(crate::transformer::ModelError::from)?;
        weights.set_value(index, tensor)?;
    }
    Ok((weights, LoadReport { missing, extra }))
}

fn read_u32(buf: &[u8], off: &mut usize) -> Result<u32, DataError> {
    let bytes = take(buf, off, 4)?;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_points: 64,
            groups: 8,
            patch_size: 8,
            enc_channels: 16,
            dec_channels: 24,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_hidden: 8,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.oae");
        let cfg = small_cfg();
        let weights = ModelWeights::<f32>::init(&cfg, 99).unwrap();
        save_checkpoint(&weights, &path).unwrap();
        let (loaded, report) = load_checkpoint(&path, &cfg, LoadMode::Strict).unwrap();
        assert!(report.is_clean());
        for ((na, va), (nb, vb)) in weights.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.shape(), vb.shape());
            assert!(
                va.data()
                    .iter()
                    .zip(vb.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "tensor {na} changed across the round trip"
            );
        }
    }

    #[test]
    fn corrupting_any_single_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.oae");
        let cfg = small_cfg();
        let weights = ModelWeights::<f32>::init(&cfg, 1).unwrap();
        save_checkpoint(&weights, &path).unwrap();
        let clean = std::fs::read(&path).unwrap();
        // Flip one byte in the header, the payload middle, and the
        // trailing checksum itself.
        for &pos in &[5usize, clean.len() / 2, clean.len() - 3] {
            let mut corrupt = clean.clone();
            corrupt[pos] ^= 0x40;
            std::fs::write(&path, &corrupt).unwrap();
            let err = load_checkpoint(&path, &cfg, LoadMode::Strict).unwrap_err();
            assert!(
                matches!(err, DataError::ChecksumMismatch { .. }),
                "byte {pos}: expected checksum failure, got {err:?}"
            );
        }
    }

    #[test]
    fn wrong_width_config_names_the_mismatched_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.oae");
        let cfg = small_cfg();
        let weights = ModelWeights::<f32>::init(&cfg, 1).unwrap();
        save_checkpoint(&weights, &path).unwrap();
        let mut wider = cfg.clone();
        wider.enc_channels = 32;
        let err = load_checkpoint(&path, &wider, LoadMode::Strict).unwrap_err();
        match err {
            DataError::TensorShapeMismatch { name, .. } => {
                assert!(!name.is_empty());
            }
            other => panic!("expected TensorShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn strict_rejects_depth_mismatch_but_permissive_reports_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.oae");
        let cfg = small_cfg();
        let weights = ModelWeights::<f32>::init(&cfg, 1).unwrap();
        save_checkpoint(&weights, &path).unwrap();

        // A deeper encoder has parameters the file does not provide.
        let mut deeper = cfg.clone();
        deeper.enc_depth = 2;
        let err = load_checkpoint(&path, &deeper, LoadMode::Strict).unwrap_err();
        assert!(matches!(err, DataError::NameSetMismatch { .. }));

        let (loaded, report) = load_checkpoint(&path, &deeper, LoadMode::Permissive).unwrap();
        assert!(!report.missing.is_empty());
        assert!(report.extra.is_empty());
        assert!(report.missing.iter().all(|n| n.starts_with("enc.block1")));
        // Parameters present in the file were restored.
        let i = loaded.position_of("embed.fc1.weight").unwrap();
        let j = weights.position_of("embed.fc1.weight").unwrap();
        assert_eq!(loaded.value(i).data(), weights.value(j).data());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.oae");
        let cfg = small_cfg();
        let weights = ModelWeights::<f32>::init(&cfg, 1).unwrap();
        save_checkpoint(&weights, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..6]).unwrap();
        let err = load_checkpoint(&path, &cfg, LoadMode::Strict).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. }));
    }
}
