//! `CARP` checkpoint files.
//!
//! Layout (little endian): magic, version u32, blank id u32, config JSON
//! (u32 length + bytes), SHA-256 of the model config JSON (32 bytes), entry
//! count u32, then per entry: name (u32 length + bytes), role tag u8,
//! trainable u8, rank u32, dims u32 each, f32 data row-major.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::read_u32;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Param, ParamStore, Role};
use crate::peft::SchemeId;
use crate::tensor::Tensor;
use crate::transducer::BLANK;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CARP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Scheme the parameters were last trained under; `None` for pretraining.
    pub scheme: Option<SchemeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub digest: [u8; 32],
    pub store: ParamStore<f32>,
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(&json).into()
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, scheme: Option<SchemeId>, store: ParamStore<f32>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.clone(),
                scheme,
            },
            digest: config_digest(model),
            store,
        }
    }

    /// True when the stored digest matches `cfg`. Callers warn on mismatch.
    pub fn digest_matches(&self, cfg: &ModelConfig) -> bool {
        self.digest == config_digest(cfg)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(BLANK as u32).to_le_bytes())?;
        let json = serde_json::to_vec(&self.meta)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&self.digest)?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (name, p) in self.store.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[p.role.tag(), u8::from(p.trainable)])?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("not a checkpoint (magic {magic:?})")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let blank = read_u32(r)?;
        if blank as usize != BLANK {
            return Err(Error::format(format!("checkpoint blank id {blank}, expected {BLANK}")));
        }
        let len = read_u32(r)? as usize;
        let json = read_bytes(r, len)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&json).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let mut digest = [0u8; 32];
        read_exact(r, &mut digest)?;
        let n = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, len)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?;
            let mut tags = [0u8; 2];
            read_exact(r, &mut tags)?;
            let role = Role::from_tag(tags[0])
                .ok_or_else(|| Error::format(format!("{name}: unknown role tag {}", tags[0])))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = read_bytes(r, numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert_param(
                name,
                Param {
                    value: Tensor::new(&shape, data)?,
                    role,
                    trainable: tags[1] != 0,
                },
            );
        }
        Ok(Checkpoint { meta, digest, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| {
            Error::config(format!("cannot open checkpoint {}: {e}; run `car pretrain` first", path.display()))
        })?;
        Self::read(&mut io::BufReader::new(f))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format("checkpoint truncated"),
        _ => Error::Io(e),
    })
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::format("checkpoint truncated"));
    }
    Ok(buf)
}
