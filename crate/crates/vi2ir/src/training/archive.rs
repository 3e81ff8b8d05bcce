//! Versioned single-file checkpoint container shared by the translation and
//! super-resolution components.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  [8 bytes]  "VI2IRCKP"
//! version u32
//! len     u64       envelope JSON length
//! envelope JSON     { kind, payload, blobs: [{name, len}] }
//! blob data         f64 values, concatenated in table order
//! checksum u64      FNV-1a over every preceding byte
//! ```
//!
//! Writes are atomic (temp file + rename); reads verify the checksum before
//! anything is interpreted, so a corrupt file never yields partial state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VI2IRCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    kind: String,
    payload: serde_json::Value,
    blobs: Vec<BlobInfo>,
}

#[derive(Serialize, Deserialize)]
struct BlobInfo {
    name: String,
    len: usize,
}

/// A parsed archive: component kind, caller-defined manifest, named blobs.
pub struct Archive {
    pub kind: String,
    pub payload: serde_json::Value,
    pub blobs: BTreeMap<String, Vec<f64>>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn write_archive(
    path: &Path,
    kind: &str,
    payload: &serde_json::Value,
    blobs: &[(String, Vec<f64>)],
) -> Result<()> {
    let envelope = Envelope {
        kind: kind.to_string(),
        payload: payload.clone(),
        blobs: blobs
            .iter()
            .map(|(name, data)| BlobInfo {
                name: name.clone(),
                len: data.len(),
            })
            .collect(),
    };
    let env_bytes = serde_json::to_vec(&envelope).expect("envelope serializes");

    let mut out = Vec::with_capacity(
        8 + 4 + 8 + env_bytes.len() + blobs.iter().map(|(_, d)| d.len() * 8).sum::<usize>() + 8,
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(env_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&env_bytes);
    for (_, data) in blobs {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 + 4 + 8 + 8 {
        return Err(Error::CheckpointIntegrity(format!(
            "{}: file too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(Error::CheckpointIntegrity(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    if &body[..8] != MAGIC {
        return Err(Error::CheckpointVersion(format!(
            "{}: not a checkpoint archive",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion(format!(
            "{}: format version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let env_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + env_len > body.len() {
        return Err(Error::CheckpointIntegrity(format!(
            "{}: envelope length {env_len} exceeds file size",
            path.display()
        )));
    }
    let envelope: Envelope = serde_json::from_slice(&body[20..20 + env_len])
        .map_err(|e| Error::CheckpointIntegrity(format!("{}: bad envelope: {e}", path.display())))?;

    let mut offset = 20 + env_len;
    let mut blobs = BTreeMap::new();
    for info in &envelope.blobs {
        let nbytes = info.len * 8;
        if offset + nbytes > body.len() {
            return Err(Error::CheckpointIntegrity(format!(
                "{}: blob '{}' truncated",
                path.display(),
                info.name
            )));
        }
        let data: Vec<f64> = body[offset..offset + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.insert(info.name.clone(), data);
        offset += nbytes;
    }
    if offset != body.len() {
        return Err(Error::CheckpointIntegrity(format!(
            "{}: {} trailing bytes after blobs",
            path.display(),
            body.len() - offset
        )));
    }
    Ok(Archive {
        kind: envelope.kind,
        payload: envelope.payload,
        blobs,
    })
}
