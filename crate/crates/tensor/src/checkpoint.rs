//! Named-tensor archive (`.tvcw`).
//!
//! Layout: magic `TVCW`, version `u8`, then entries until end of file. Each
//! entry is `u16` name length, UTF-8 name, `u8` rank, `u32` extents, and the
//! raw little-endian `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TVCW";
pub const VERSION: u8 = 1;

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(5 + store.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for p in store.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| TensorError::Format(format!("name too long: {}", p.name)))?;
        let rank = u8::try_from(p.value.rank())
            .map_err(|_| TensorError::Format(format!("rank too large: {}", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &e in p.value.shape() {
            let e = u32::try_from(e).map_err(|_| TensorError::Format("extent overflow".into()))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Format(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while c.pos < bytes.len() {
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| TensorError::Format("name is not UTF-8".into()))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| TensorError::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if store.contains(&name) {
            return Err(TensorError::Format(format!("duplicate entry {name}")));
        }
        store.insert(&name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = to_bytes(store)?;
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        s.insert("b", Tensor::scalar(3.25));
        s.insert("empty", Tensor::zeros(&[0, 4]));
        s
    }

    #[test]
    fn byte_layout_is_exact() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let b = to_bytes(&s).unwrap();
        let mut want = b"TVCW\x01".to_vec();
        want.extend_from_slice(&[1, 0, b'x', 1, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip_preserves_names_and_values() {
        let s = sample();
        let back = from_bytes(&to_bytes(&s).unwrap()).unwrap();
        assert_eq!(back.len(), s.len());
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(from_bytes(&b).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tvcw");
        save(&sample(), &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.get("b").unwrap().item(), 3.25);
    }
}
