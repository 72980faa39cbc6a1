//! Serialized model state: a versioned binary container holding the
//! configuration as canonical key-value text followed by length-prefixed
//! named float32 blobs, all little-endian. Round-trips are bit-exact.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::{layer_specs, ModelConfig, Weights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FLOWLITE";
const VERSION: u32 = 1;

/// A trained (or freshly initialized) model: configuration, raw weight
/// blobs keyed by layer path, the step counter and the run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub blobs: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn from_weights(config: &ModelConfig, w: &Weights, step: u64, seed: u64) -> Self {
        let blobs = w
            .iter()
            .map(|(name, t)| (name.clone(), t.data().to_vec()))
            .collect();
        Checkpoint {
            config: config.clone(),
            step,
            seed,
            blobs,
        }
    }

    /// Rebuilds gradient-tracked weight tensors, validating that every blob
    /// the configuration references exists with the right length.
    pub fn to_weights(&self) -> Result<Weights> {
        let specs = layer_specs(&self.config)?;
        let mut map = BTreeMap::new();
        for spec in &specs {
            for (suffix, shape) in [
                ("weight", spec.kernel_shape()),
                ("bias", spec.bias_shape()),
            ] {
                let name = format!("{}.{suffix}", spec.name);
                let data = self
                    .blobs
                    .get(&name)
                    .ok_or_else(|| Error::MissingBlob(name.clone()))?;
                let tensor = Tensor::from_vec(shape, data.clone())?;
                map.insert(name, tensor.tracked());
            }
        }
        Ok(Weights::new(map))
    }

    pub fn encode(&self) -> Vec<u8> {
        let cfg_text = self.config.to_kv();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg_text.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, data) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let cfg_len = r.u32()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let cfg_text = core::str::from_utf8(cfg_bytes)
            .map_err(|_| Error::Config("checkpoint config text is not UTF-8".into()))?;
        let config = ModelConfig::from_kv(cfg_text)?;
        let n_blobs = r.u32()? as usize;
        let mut blobs = BTreeMap::new();
        for _ in 0..n_blobs {
            let name_len = r.u32()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = core::str::from_utf8(name_bytes)
                .map_err(|_| Error::Config("checkpoint blob name is not UTF-8".into()))?
                .into();
            let count = r.u32()? as usize;
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blobs.insert(name, data);
        }
        Ok(Checkpoint {
            config,
            step,
            seed,
            blobs,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                needed: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}
