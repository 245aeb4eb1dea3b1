//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, stem label, tensor directory) and the tensor payload as
//! little-endian floats. The payload dtype follows the configured precision.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MelSeparator, ModelConfig, Precision};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MELSEPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub stem: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stem: String,
    pub model: MelSeparator,
}

impl Checkpoint {
    pub fn new(stem: impl Into<String>, model: MelSeparator) -> Self {
        Self {
            stem: stem.into(),
            model,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let dtype = match self.model.config.precision {
            Precision::Single => Dtype::F32,
            Precision::Double => Dtype::F64,
        };
        let named = self.model.params.to_named();
        let mut tensors = Vec::with_capacity(named.len());
        let mut payload = Vec::new();
        for (name, t) in &named {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype,
                offset: payload.len(),
            });
            for &v in t.data() {
                match dtype {
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            stem: self.stem.clone(),
            config: self.model.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.version != version {
            return Err(Error::Checkpoint("header/container version mismatch".into()));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;

        let mut loaded = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let size = e.dtype.size();
            let end = e.offset + n * size;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {} truncated", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(size)
                .map(|b| match e.dtype {
                    Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
                    Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
                })
                .collect();
            loaded.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
        }

        let mut params = super::init_params(
            &header.config,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
            super::Init::Standard,
        );
        let names = params.names();
        if names.len() != loaded.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model needs {}",
                loaded.len(),
                names.len()
            )));
        }
        let mut it = loaded.into_iter();
        let mut err = None;
        params.for_each_mut(|name, slot| {
            let (stored, t) = it.next().expect("count checked");
            if err.is_none() && (stored != name || t.shape() != slot.shape()) {
                err = Some(Error::Checkpoint(format!(
                    "expected {name} {:?}, found {stored} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            stem: header.stem,
            model: MelSeparator::new(header.config, params)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
