//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SASR" | version
//! config_len | config as JSON (UTF-8)
//! vocab_len  | vocab_len × (id_len | article id bytes), vocabulary index order
//! n_tensors  | n_tensors × (name_len | name | ndim | ndim × dim | data)
//! ```
//!
//! Tensor data are little-endian `f32`, row-major.

use std::io::{Read, Write};

use super::network::{Network, Tensor};
use super::{SasrecConfig, SasrecError, SasrecModel};
use crate::corpus::Catalog;

pub const MAGIC: &[u8; 4] = b"SASR";
pub const VERSION: u32 = 1;

pub(crate) fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    put_u32(w, b.len() as u32)?;
    w.write_all(b)
}

pub(crate) fn get_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub(crate) fn put_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    put_bytes(w, name.as_bytes())?;
    put_u32(w, shape.len() as u32)?;
    for &s in shape {
        put_u32(w, s as u32)?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn get_tensor<R: Read>(r: &mut R) -> std::io::Result<(String, Vec<usize>, Vec<f32>)> {
    let name = String::from_utf8(get_bytes(r)?).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let ndim = get_u32(r)? as usize;
    let shape = (0..ndim).map(|_| get_u32(r).map(|v| v as usize)).collect::<std::io::Result<Vec<_>>>()?;
    let len: usize = shape.iter().product();
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((name, shape, data))
}

impl SasrecModel {
    pub fn save<W: Write>(&self, mut w: W, catalog: &Catalog) -> Result<(), SasrecError> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| SasrecError::Checkpoint(e.to_string()))?;
        put_bytes(&mut w, &cfg)?;
        put_u32(&mut w, self.vocab.len() as u32)?;
        for item in &self.vocab {
            put_bytes(&mut w, catalog.article(*item).id.as_bytes())?;
        }
        put_u32(&mut w, self.net.tensors.len() as u32)?;
        for t in &self.net.tensors {
            put_tensor(&mut w, &t.name, &t.shape, &t.data)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R, catalog: &Catalog) -> Result<Self, SasrecError> {
        let bad = |m: String| SasrecError::Checkpoint(m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a sasrec checkpoint".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config: SasrecConfig = serde_json::from_slice(&get_bytes(&mut r)?).map_err(|e| bad(e.to_string()))?;
        let n_vocab = get_u32(&mut r)? as usize;
        let mut vocab = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            let id = String::from_utf8(get_bytes(&mut r)?).map_err(|e| bad(e.to_string()))?;
            vocab.push(catalog.lookup(&id).ok_or_else(|| bad(format!("unknown article `{id}`")))?);
        }
        let n_tensors = get_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let (name, shape, data) = get_tensor(&mut r)?;
            tensors.push(Tensor { name, shape, data });
        }
        let net = Network::from_tensors(config.dims(vocab.len()), tensors).map_err(bad)?;
        Ok(SasrecModel::assemble(config, vocab, net))
    }
}
