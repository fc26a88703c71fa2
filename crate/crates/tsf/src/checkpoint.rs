//! Checkpoint container: one binary file framed like the tensor container
//! (magic, header length, JSON header, payload) whose header carries the
//! run manifest and a tensor directory, followed by the concatenated f32
//! payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsf_core::fusion::ModelParams;
use tsf_core::tensor::Tensor;

use crate::error::{io_err, Result, TsfError};
use crate::tsr::TSR_MAGIC;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub arch_hash: String,
    pub n: usize,
    pub c: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    order: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    container: String,
    manifest: CheckpointManifest,
    tensors: Vec<TensorEntry>,
}

/// Hash of everything that pins tensor shapes and meanings: sequence
/// count, channel width, layer plan, and the hypernetwork width.
pub fn arch_hash(n: usize, c: usize) -> String {
    let descriptor = format!(
        "tsf-v1 n={n} c={c} enc=stem7/down3x2/res2 dec=res2/up3x2/out7 hyper={} att-reduction={}",
        tsf_core::backbone::HYPER_HIDDEN,
        tsf_core::fusion::ATTENTION_REDUCTION,
    );
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in descriptor.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn save_checkpoint(path: &Path, model: &ModelParams<f32>, seed: u64) -> Result<()> {
    let manifest = CheckpointManifest {
        arch_hash: arch_hash(model.n, model.channels),
        n: model.n,
        c: model.channels,
        seed,
    };
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.visit(&mut |name, t| {
        entries.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            order: "C".into(),
            offset: payload.len(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = serde_json::to_vec(&CheckpointHeader {
        container: "tsf-checkpoint".into(),
        manifest,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(&TSR_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 12 || bytes[..8] != TSR_MAGIC {
        return Err(TsfError::Container(format!(
            "{} is not a checkpoint container",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(TsfError::Container("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    if header.container != "tsf-checkpoint" {
        return Err(TsfError::Container(format!(
            "unexpected container kind {}",
            header.container
        )));
    }
    let manifest = header.manifest;
    let expected = arch_hash(manifest.n, manifest.c);
    if manifest.arch_hash != expected {
        return Err(TsfError::ArchitectureMismatch(format!(
            "checkpoint hash {} vs supported architecture {expected}",
            manifest.arch_hash
        )));
    }

    let payload = &bytes[12 + hlen..];
    let mut by_name = std::collections::BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != "f32" || e.order != "C" {
            return Err(TsfError::Container(format!(
                "tensor {} has unsupported dtype/order",
                e.name
            )));
        }
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * 4;
        if end > payload.len() {
            return Err(TsfError::Container(format!(
                "tensor {} overruns payload",
                e.name
            )));
        }
        let data: Vec<f32> = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&e.shape, data).map_err(tsf_core::Error::from)?;
        by_name.insert(e.name.clone(), t);
    }

    let mut model = ModelParams::<f32>::new(manifest.seed, manifest.n, manifest.c);
    let mut missing = Vec::new();
    model.visit_mut(&mut |name, t| match by_name.remove(&name) {
        Some(stored) => {
            if stored.shape() == t.shape() {
                *t = stored;
            } else {
                missing.push(format!(
                    "{name}: shape {:?} vs expected {:?}",
                    stored.shape(),
                    t.shape()
                ));
            }
        }
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(TsfError::ArchitectureMismatch(missing.join("; ")));
    }
    if !by_name.is_empty() {
        let extra: Vec<String> = by_name.keys().cloned().collect();
        return Err(TsfError::ArchitectureMismatch(format!(
            "unknown tensors in checkpoint: {}",
            extra.join(", ")
        )));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelParams::<f32>::new(123, 4, 8);
        save_checkpoint(&path, &model, 123).unwrap();
        let (loaded, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.n, 4);
        assert_eq!(manifest.c, 8);
        assert_eq!(manifest.seed, 123);

        let mut originals = std::collections::BTreeMap::new();
        model.visit(&mut |name, t| {
            originals.insert(name, t.clone());
        });
        let mut count = 0;
        loaded.visit(&mut |name, t| {
            let orig = &originals[&name];
            assert_eq!(orig.shape(), t.shape());
            for (a, b) in orig.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
            count += 1;
        });
        assert_eq!(count, originals.len());
    }

    #[test]
    fn tampered_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelParams::<f32>::new(1, 4, 8);
        save_checkpoint(&path, &model, 1).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        // corrupt one hex digit of the arch hash inside the JSON header
        let needle = b"arch_hash";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let digit = pos + needle.len() + 3;
        bytes[digit] = if bytes[digit] == b'0' { b'1' } else { b'0' };
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TsfError::ArchitectureMismatch(_))
        ));
    }
}
