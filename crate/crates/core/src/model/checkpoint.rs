//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "BLDNCKPT"
//! version      u32      1
//! arch_len     u32
//! arch         arch_len bytes, UTF-8 JSON of the resolved ArchConfig
//! count        u32      number of parameter records
//! record*:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   dtype      u8       0 = f32, 1 = f64
//!   rank       u32
//!   dims       rank x u64
//!   payload    product(dims) little-endian scalars, row-major
//! ```
//!
//! Records appear in parameter registration order, so identical models
//! serialise to identical bytes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{ArchConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"BLDNCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Element>(model: &Model<T>) -> Vec<u8> {
    let arch = serde_json::to_vec(model.arch()).expect("ArchConfig serialises");
    let mut out = Vec::with_capacity(64 + arch.len() + model.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_header<'a>(bytes: &'a [u8]) -> Result<(ArchConfig, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let arch: ArchConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format("checkpoint", format!("architecture: {e}")))?;
    Ok((arch, r))
}

/// Architecture and scalar type stored in a checkpoint, without decoding
/// the payload.
pub fn peek(bytes: &[u8]) -> Result<(ArchConfig, DType)> {
    let (arch, mut r) = read_header(bytes)?;
    if r.u32()? == 0 {
        return Err(Error::format("checkpoint", "no parameters"));
    }
    let name_len = r.u32()? as usize;
    r.take(name_len)?;
    let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::format("checkpoint", "bad dtype"))?;
    Ok((arch, dtype))
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Model<T>> {
    let (arch, mut r) = read_header(bytes)?;
    let count = r.u32()? as usize;
    let mut params = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
            .to_string();
        let tag = r.u8()?;
        if DType::from_tag(tag) != Some(T::DTYPE) {
            return Err(Error::format(
                "checkpoint",
                format!("{name} has dtype tag {tag}, expected {}", T::DTYPE.name()),
            ));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("checkpoint", "dimension overflow"))?;
        let size = T::DTYPE.size();
        let payload = r.take(numel.checked_mul(size).ok_or_else(|| Error::format("checkpoint", "payload overflow"))?)?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        if params.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Model::from_parts(arch, params)
}

pub fn save<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<Model<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn arch() -> ArchConfig {
        ArchConfig {
            input_slices: 3,
            height: 8,
            width: 8,
            encoder_channels: vec![2, 2],
            bottleneck_channels: 3,
            decoder_channels: vec![2, 2],
            head_hidden: 0,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for v in Variant::ALL {
            let model = Model::<f32>::new(&arch().with_variant(v), 4).unwrap();
            let bytes = to_bytes(&model);
            let back = from_bytes::<f32>(&bytes).unwrap();
            assert_eq!(back, model);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let model = Model::<f64>::new(&arch(), 4).unwrap();
        let bytes = to_bytes(&model);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let (a, dtype) = peek(&bytes).unwrap();
        assert_eq!(&a, model.arch());
        assert_eq!(dtype, DType::F64);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f64>::new(&arch(), 4).unwrap();
        let bytes = to_bytes(&model);
        assert!(from_bytes::<f32>(&bytes).is_err());
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f64>(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(from_bytes::<f64>(&bad).is_err());
    }
}
