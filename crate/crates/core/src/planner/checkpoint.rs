//! Checkpoint files: an 8-byte little-endian header length, a JSON header,
//! then every tensor as little-endian `f32` in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{Network, Planner, Tensor};
use super::PlannerConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "pkl-ckpt";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob that follows the header.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: PlannerConfig,
    tensors: Vec<TensorEntry>,
    step: u64,
    rng_state: Option<SplitMix64>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub planner: Planner,
    pub step: u64,
    pub rng: Option<SplitMix64>,
    /// SHA-256 of the file bytes, lowercase hex.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn checkpoint_bytes(planner: &Planner, step: u64, rng: Option<&SplitMix64>) -> Vec<u8> {
    let mut offset = 0;
    let tensors = planner
        .params()
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            };
            offset += 4 * t.data.len();
            e
        })
        .collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: planner.config().clone(),
        tensors,
        step,
        rng_state: rng.cloned(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in planner.params() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes the checkpoint and returns its SHA-256.
pub fn save_checkpoint(
    planner: &Planner,
    step: u64,
    rng: Option<&SplitMix64>,
    path: impl AsRef<Path>,
) -> Result<String> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(planner, step, rng);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let bad = |message: String| Error::Parse {
        path: origin.to_string(),
        message,
    };
    if bytes.len() < 8 {
        return Err(bad("file too short for a checkpoint header".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    let de = &mut serde_json::Deserializer::from_slice(body);
    let header: Header = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: format!("{origin}: header.{}", e.path()),
        message: e.inner().to_string(),
    })?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.format_version as i64,
            expected: CHECKPOINT_VERSION as i64,
        });
    }
    let blob = &bytes[8 + hlen..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob.get(e.offset..e.offset + 4 * n).ok_or_else(|| {
            bad(format!(
                "tensor {} extends past the end of the file",
                e.name
            ))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    let planner = Network::from_params(header.config, params)?;
    Ok(Checkpoint {
        planner,
        step: header.step,
        rng: header.rng_state,
        hash: sha256_hex(bytes),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2D;
    use crate::raster::{BevInput, GridSpec};
    use crate::rng::seeded;

    fn config() -> PlannerConfig {
        PlannerConfig {
            grid: GridSpec {
                n_rows: 16,
                n_cols: 16,
                ..GridSpec::default()
            },
            horizon_steps: 2,
            input_pool: 2,
            widths: vec![3, 4],
            seed: 5,
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut net = Planner::new(config()).unwrap();
        // make the head and bias map non-trivial
        for t in net.params_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v += (i as f32 * 0.37).sin() * 0.1;
            }
        }
        net.refresh();
        let rng = seeded(99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pkl-ckpt");
        let hash = save_checkpoint(&net, 42, Some(&rng), &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.hash, hash);
        assert_eq!(ck.hash, file_sha256(&path).unwrap());
        assert_eq!(ck.step, 42);
        assert_eq!(ck.rng.as_ref(), Some(&rng));
        let mut bev = BevInput::zeros(config().grid, Pose2D::IDENTITY);
        bev.data.iter_mut().step_by(5).for_each(|v| *v = 1);
        let a = net.forward(&bev, None).unwrap();
        let b = ck.planner.forward(&bev, None).unwrap();
        assert_eq!(a.log_block, b.log_block);
        assert_eq!(a.log_within, b.log_within);
        assert_eq!(
            checkpoint_bytes(&ck.planner, 42, Some(&rng)),
            fs::read(&path).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(checkpoint_from_bytes(&[1, 2, 3], "x").is_err());
        let net = Planner::new(config()).unwrap();
        let mut bytes = checkpoint_bytes(&net, 0, None);
        bytes.truncate(bytes.len() - 4);
        assert!(checkpoint_from_bytes(&bytes, "x").is_err());
    }
}
