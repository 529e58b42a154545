//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CSNCKPT\0"
//! version  u32
//! config   u64 length + UTF-8 JSON
//! count    u32
//! tensor*  u32 name length + name, u32 rank, rank x u64 dims, f64 data
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{CrossScaleNet, CrossScaleNetParams, ModelConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CSNCKPT\0";
const VERSION: u32 = 1;

/// Decoded archive before shape validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &CrossScaleNet) -> Self {
        Self {
            config: model.config.clone(),
            tensors: model
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let raw = read_u64(&mut r)?;
        let json_len = read_len(r, raw)?;
        let config: ModelConfig = serde_json::from_slice(&r[..json_len])?;
        r = &r[json_len..];
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let raw = read_u32(&mut r)? as u64;
            let name_len = read_len(r, raw)?;
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            r = &r[name_len..];
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let byte_len = read_len(r, (numel as u64).saturating_mul(8))?;
            let data = r[..byte_len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[byte_len..];
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { config, tensors })
    }

    /// Rebuilds the model, checking names and shapes against the config.
    pub fn into_model(self) -> Result<CrossScaleNet> {
        self.config.validate()?;
        let template =
            CrossScaleNetParams::init(&self.config, &mut rand::rngs::mock::StepRng::new(0, 0));
        let expected = template.shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&self.tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name} holds non-finite values")));
            }
        }
        let mut values = self.tensors.into_iter().map(|(_, t)| t);
        let params = template.map(|_, _| values.next().expect("count checked"));
        CrossScaleNet::from_parts(self.config, params)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len(r: &[u8], len: u64) -> Result<usize> {
    usize::try_from(len)
        .ok()
        .filter(|&n| n <= r.len())
        .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))
}

pub fn save_checkpoint(model: &CrossScaleNet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = Checkpoint::from_model(model).to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CrossScaleNet> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;

    fn model() -> CrossScaleNet {
        let mut c = ModelConfig::new(16, 4, 2);
        c.n_scales = 2;
        c.patch_len = 4;
        c.decomp_kernel = 5;
        c.hidden_dim = 8;
        c.variant = AttentionVariant::CrossSharedKey;
        CrossScaleNet::new(c, 11).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = model();
        let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes)
            .unwrap()
            .into_model()
            .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = Checkpoint::from_model(&model()).to_bytes().unwrap();
        for cut in [0, 7, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ck = Checkpoint::from_model(&model());
        ck.config.hidden_dim = 9;
        assert!(ck.into_model().is_err());
    }
}
