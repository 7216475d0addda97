//! Single-file checkpoint format shared by every trainable module: a JSON
//! header (kind, config, parameter table, content hash) followed by raw
//! little-endian f32 data. Round-trips are bit-exact; loads verify the hash.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use gradtape::nn::ParamStore;
use gradtape::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MKUPCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: Value,
    /// Auxiliary values (e.g. hashes of frozen dependencies).
    #[serde(default)]
    pub extra: Value,
    params: Vec<ParamMeta>,
    content_hash: String,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save(
    store: &ParamStore,
    kind: &str,
    config: Value,
    extra: Value,
    path: &Path,
) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut params = Vec::new();
    for p in store.iter() {
        let v = p.value();
        params.push(ParamMeta {
            name: p.name().to_string(),
            shape: v.shape().to_vec(),
        });
        for x in v.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config,
        extra,
        params,
        content_hash: format!("{:016x}", fnv1a(&data)),
    };
    let header_json = serde_json::to_vec(&header)?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&data)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    f.read_exact(&mut u32buf)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;

    let mut data = Vec::new();
    f.read_to_end(&mut data)?;
    let got_hash = format!("{:016x}", fnv1a(&data));
    if got_hash != header.content_hash {
        return Err(Error::Checkpoint(format!(
            "content hash mismatch in {}: header {} vs data {}",
            path.display(),
            header.content_hash,
            got_hash
        )));
    }

    let mut tensors = Vec::with_capacity(header.params.len());
    let mut off = 0usize;
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        if off + 4 * n > data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated data for param {}",
                meta.name
            )));
        }
        let vals: Vec<f32> = (0..n)
            .map(|i| {
                let b = &data[off + 4 * i..off + 4 * i + 4];
                f32::from_le_bytes([b[0], b[1], b[2], b[3]])
            })
            .collect();
        off += 4 * n;
        tensors.push((meta.name.clone(), Tensor::from_vec(&meta.shape, vals)));
    }
    Ok(Checkpoint { header, tensors })
}

/// Load a checkpoint into an existing store, verifying kind and shapes.
pub fn load_into(path: &Path, kind: &str, store: &ParamStore) -> Result<CheckpointHeader> {
    let ckpt = load(path)?;
    if ckpt.header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            ckpt.header.kind
        )));
    }
    store
        .load_state_dict(&ckpt.tensors)
        .map_err(Error::Checkpoint)?;
    Ok(ckpt.header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradtape::nn::{Linear, SplitMix64};

    #[test]
    fn roundtrip_is_bit_exact_and_hash_checked() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let _lin = Linear::new(&mut store, "lin", 7, 5, &mut rng);
        let before = store.content_hash();

        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        save(&store, "test", serde_json::json!({"a": 1}), Value::Null, &path).unwrap();

        // clobber values, then load back
        for p in store.iter() {
            p.set_value(Tensor::zeros(&p.value().shape().to_vec()));
        }
        let header = load_into(&path, "test", &store).unwrap();
        assert_eq!(store.content_hash(), before);
        assert_eq!(header.config["a"], 1);

        // corrupting a payload byte must be detected
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn kind_mismatch_is_refused() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let _lin = Linear::new(&mut store, "lin", 3, 3, &mut rng);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        save(&store, "alpha", Value::Null, Value::Null, &path).unwrap();
        assert!(load_into(&path, "beta", &store).is_err());
    }
}
