//! Weight bundles: an `MGMR` container with a distinct dtype code, a
//! key=value text header and an ordered list of named f32 tensors.

use std::path::Path;

use super::{NeuralError, ParamStore, Result};
use crate::raster::{MAGIC, VERSION};

pub const BUNDLE_DTYPE: u8 = 0x80;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightBundle {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl WeightBundle {
    pub fn from_store(header: &[(String, String)], store: &ParamStore<f32>) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.shape(id).to_vec(), store.get(id).to_vec()))
            .collect();
        Self { header: header.to_vec(), tensors }
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies tensors into `store`, which must already hold the same names and shapes.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(NeuralError::Bundle(format!(
                "bundle has {} tensors, network expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, shape, data) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| NeuralError::Bundle(format!("unexpected tensor {name}")))?;
            if store.shape(id) != shape.as_slice() {
                return Err(NeuralError::Bundle(format!(
                    "tensor {name}: shape {shape:?} does not match network {:?}",
                    store.shape(id)
                )));
            }
            store.get_mut(id).copy_from_slice(data);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(BUNDLE_DTYPE);
        out.push(0);
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NeuralError::Bundle("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(NeuralError::Bundle(format!("unsupported version {version}")));
        }
        let dtype = r.take(2)?[0];
        if dtype != BUNDLE_DTYPE {
            return Err(NeuralError::Bundle(format!("not a weight bundle (dtype {dtype:#x})")));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| NeuralError::Bundle("header is not utf-8".into()))?;
        let header = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| NeuralError::Bundle("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| NeuralError::Bundle("tensor size overflows".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| NeuralError::Bundle("tensor size overflows".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, shape, data));
        }
        Ok(Self { header, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NeuralError::Bundle("truncated bundle".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_bundle(path: impl AsRef<Path>, bundle: &WeightBundle) -> Result<()> {
    std::fs::write(path, bundle.encode())?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<WeightBundle> {
    WeightBundle::decode(&std::fs::read(path)?)
}

pub fn save_bundle(path: impl AsRef<Path>, header: &[(String, String)], store: &ParamStore<f32>) -> Result<()> {
    write_bundle(path, &WeightBundle::from_store(header, store))
}

/// Loads weights into an already constructed network; returns the header.
pub fn load_bundle(path: impl AsRef<Path>, store: &mut ParamStore<f32>) -> Result<Vec<(String, String)>> {
    let bundle = read_bundle(path)?;
    bundle.apply(store)?;
    Ok(bundle.header)
}
