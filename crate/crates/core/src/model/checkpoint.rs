//! Binary checkpoint format: magic, version, JSON header, raw f64 payload.
//!
//! Round trips are bit exact. The header lists parameters in name order and
//! the payload stores them in the same order as little-endian f64 blobs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterSpec, LoraSpec, Model, ModelConfig, NamedParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PVLB";

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    provenance: String,
    adapter: Option<AdapterSpec>,
    lora: Option<LoraSpec>,
    params: Vec<ParamMeta>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let params: Vec<ParamMeta> = model
        .params
        .iter()
        .map(|(name, t)| ParamMeta {
            name: name.clone(),
            shape: t.shape.clone(),
            trainable: model.params.is_trainable(name),
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config,
        provenance: model.provenance.clone(),
        adapter: model.adapter,
        lora: model.lora.clone(),
        params,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, t) in model.params.iter() {
        for &x in &t.data {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let mut v4 = [0u8; 4];
    read_exact(&mut f, &mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut l8 = [0u8; 8];
    read_exact(&mut f, &mut l8)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut f, &mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
    header.config.validate()?;

    let expected = Model::expected_param_names(&header.config, &header.adapter, &header.lora);
    let mut found: Vec<&str> = header.params.iter().map(|p| p.name.as_str()).collect();
    found.sort_unstable();
    if found != expected.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
        for name in &found {
            if !expected.iter().any(|e| e == name) {
                return Err(Error::CorruptCheckpoint(format!("unexpected parameter `{name}`")));
            }
        }
        for name in &expected {
            if !found.contains(&name.as_str()) {
                return Err(Error::CorruptCheckpoint(format!("missing parameter `{name}`")));
            }
        }
        return Err(Error::CorruptCheckpoint("duplicate parameter names".into()));
    }

    let mut params = NamedParamStore::default();
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for slot in data.iter_mut() {
            read_exact(&mut f, &mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        params.insert(&meta.name, Tensor::from_vec(&meta.shape, data)?);
        params.set_trainable(&meta.name, meta.trainable)?;
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes after payload".into()));
    }
    Ok(Model {
        config: header.config,
        params,
        adapter: header.adapter,
        lora: header.lora,
        provenance: header.provenance,
        cache: None,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::CorruptCheckpoint("truncated file".into()))
}
