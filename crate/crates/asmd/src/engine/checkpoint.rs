//! Checkpoint container: magic, JSON manifest, raw partition data, sha256.
//!
//! Layout (all integers little-endian):
//!   magic "ASMDCKP1" | manifest_len u64 | manifest JSON |
//!   n_partitions u32 | per partition:
//!     name_len u32 | name utf8 | frozen u8 | n_tensors u32 |
//!     per tensor: rank u32 | dims u64... | data f64...
//!   sha256 of everything above (32 bytes)
//!
//! Writes go to a temp file in the same directory, fsynced, then renamed, so
//! a crash never leaves a half-written checkpoint under the final name.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::ParameterStore;
use super::tensor::Tensor;
use super::EngineError;

const MAGIC: &[u8; 8] = b"ASMDCKP1";

/// Run description stored next to the weights. `extra` carries trainer
/// resume state (rng position, iteration counters, pool contents) as
/// schemaless JSON so the engine stays ignorant of trainer internals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> EngineError {
    EngineError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save(path: &Path, store: &ParameterStore, manifest: &Manifest) -> Result<(), EngineError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let mjson = serde_json::to_vec(manifest)
        .map_err(|e| ck_err(path, format!("manifest encode: {e}")))?;
    buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&mjson);

    buf.extend_from_slice(&(store.partition_count() as u32).to_le_bytes());
    for (name, part) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(part.frozen as u8);
        buf.extend_from_slice(&(part.tensors.len() as u32).to_le_bytes());
        for t in &part.tensors {
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterStore, Manifest), EngineError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() + 32 {
        return Err(ck_err(path, "file too short"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(EngineError::ChecksumMismatch {
            path: path.display().to_string(),
        });
    }

    let mut r = Reader { buf: body, pos: 0, path };
    let magic = r.bytes(8)?;
    if magic != MAGIC {
        return Err(ck_err(path, "bad magic, not a checkpoint"));
    }
    let mlen = r.u64()? as usize;
    let mjson = r.bytes(mlen)?;
    let manifest: Manifest = serde_json::from_slice(mjson)
        .map_err(|e| ck_err(path, format!("manifest decode: {e}")))?;

    let n_parts = r.u32()? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..n_parts {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| ck_err(path, "partition name is not utf8"))?;
        let frozen = r.bytes(1)?[0] != 0;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            tensors.push(Tensor::new(shape, data).unwrap());
        }
        store
            .add_partition(&name, tensors)
            .map_err(|_| ck_err(path, format!("duplicate partition '{name}'")))?;
        store.set_frozen(&name, frozen).unwrap();
    }
    Ok((store, manifest))
}

/// Reads only the manifest, skipping weight validation entirely (the
/// checksum is still verified since it covers the whole file).
pub fn read_manifest(path: &Path) -> Result<Manifest, EngineError> {
    let (_, m) = load(path)?;
    Ok(m)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        if self.pos + n > self.buf.len() {
            return Err(ck_err(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EngineError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, EngineError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}
