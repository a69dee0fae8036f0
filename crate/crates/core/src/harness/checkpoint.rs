//! Flat binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DUALALN\0"
//! version    u32      1
//! cfg_len    u32      byte length of the config text
//! cfg        UTF-8    TrainConfig in key=value form
//! count      u32      number of parameter blocks
//! block*     name_len u32, name UTF-8, ndim u32, dims u64 x ndim,
//!            values f64 x prod(dims)
//! ```

use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::model::Model;
use super::{HarnessError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DUALALN\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor<f64>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode<T: Scalar>(cfg: &TrainConfig, ps: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = cfg.to_config_string();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, ps.len());
    for (name, t) in ps.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary file so an interrupted save never replaces a good checkpoint.
pub fn save<T: Scalar>(path: &Path, cfg: &TrainConfig, ps: &ParamStore<T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(cfg, ps)).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> std::result::Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let n = r.u32()?;
    let config = TrainConfig::parse(&r.str(n)?).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = r.str(n)?;
        let ndim = r.u32()?;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
        let raw = r.take(len.checked_mul(8).ok_or("shape overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(Checkpoint { config, params })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes).map_err(|msg| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

impl Checkpoint {
    /// Rebuilds the model described by the stored config and copies in every weight.
    pub fn restore<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(&self.config)?;
        if model.params.len() != self.params.len() {
            return Err(HarnessError::Consistency(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| HarnessError::Consistency(format!("unknown parameter {name}")))?;
            let dst = model.params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(HarnessError::Consistency(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.cast();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            channels: [2, 2, 3, 3, 4],
            style_hidden: [3, 2],
            attention_conv: 2,
            attention_hidden: 2,
            precision: super::super::config::Precision::F64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let cfg = tiny();
        let m = Model::<f64>::new(&cfg).unwrap();
        let bytes = encode(&cfg, &m.params);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.config, cfg);
        let back = ck.restore::<f64>().unwrap();
        for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!((n1, a), (n2, b));
        }
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
