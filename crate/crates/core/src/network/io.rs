//! Model file: `LANMODEL`, format version, config text, parameter table,
//! trailing checksum. All integers little-endian; parameter data is `f32`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::LanConfig;
use super::model::LanModel;
use crate::config::KvConfig;
use crate::engine::{Element, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LANMODEL";
pub const FORMAT_VERSION: u32 = 1;

/// First eight bytes of SHA-256, read little-endian.
pub fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

pub fn to_bytes<T: Element>(model: &LanModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = model.config.to_kv().to_string();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.params.len());
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.len()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("model file: text field is not UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<LanModel<f32>> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            Error::Truncated
        } else {
            Error::BadMagic
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let cfg_text = r.text()?;
    let count = r.len()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rank = r.len()?;
        if rank > 4 {
            return Err(Error::Format(format!("model file: parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(Error::Truncated)?;
        let raw = r.take(numel.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let body_end = r.pos;
    let stored = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "model file: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let computed = checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let config = LanConfig::from_kv(&KvConfig::parse(cfg_text)?, LanConfig::preset("tiny")?)?;
    let mut params = ParamStore::new();
    for (name, t) in entries {
        params.insert(name, t)?;
    }
    let expected = super::model::build_lan::<f32>(&config)?;
    for (name, t) in expected.params.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "load",
                lhs: t.shape().to_vec(),
                rhs: got.shape().to_vec(),
            });
        }
    }
    if params.len() != expected.params.len() {
        return Err(Error::Format(format!(
            "model file: {} parameters, config implies {}",
            params.len(),
            expected.params.len()
        )));
    }
    Ok(LanModel { config, params })
}

pub fn save<T: Element>(model: &LanModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<LanModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_lan;

    fn model() -> LanModel<f32> {
        build_lan(&LanConfig::preset("tiny").unwrap().with_seed(17)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn distinct_diagnostics() {
        let bytes = to_bytes(&model());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated)));
        assert!(matches!(from_bytes(&bytes[..100]), Err(Error::Truncated)));

        let mut bad = bytes.clone();
        let mid = bad.len() - 20;
        bad[mid] ^= 1;
        assert!(matches!(from_bytes(&bad), Err(Error::ChecksumMismatch { .. })));
    }
}
