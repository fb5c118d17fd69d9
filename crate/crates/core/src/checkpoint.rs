//! Shared binary checkpoint format.
//!
//! ```text
//! magic   "AEMB"
//! version u16 LE
//! record* { name_len u16 LE, name bytes (UTF-8), rank u8,
//!           extents u32 LE * rank, payload f64 LE * prod(extents) }
//! ```
//! Records run to end of file. Writers emit them in sorted name order so
//! identical parameter sets produce identical bytes.

use std::fs;
use std::path::Path;

use spkguard_autograd::Tensor;

use crate::error::{CoreError, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"AEMB";
pub const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

pub fn encode(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("name `{name}` too long")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| bad(format!("rank of `{name}` too large")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| bad(format!("extent of `{name}` too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut params = ParamSet::new();
    while r.pos < bytes.len() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("record name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| bad("payload size overflow"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::new();
        p.insert("ab", Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap());
        let bytes = encode(&p).unwrap();
        assert_eq!(&bytes[..4], b"AEMB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[2, 0]);
        assert_eq!(&bytes[8..10], b"ab");
        assert_eq!(bytes[10], 2);
        assert_eq!(&bytes[11..15], &[1, 0, 0, 0]);
        assert_eq!(&bytes[15..19], &[2, 0, 0, 0]);
        assert_eq!(&bytes[19..27], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 35);
    }

    #[test]
    fn rejects_corruption() {
        assert!(decode(b"NOPE\x01\x00").is_err());
        assert!(decode(b"AEMB\x02\x00").is_err());
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode(&p).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(
            entries in prop::collection::btree_map(
                "[a-z.]{1,12}",
                prop::collection::vec(any::<f64>(), 0..20),
                0..5,
            )
        ) {
            let mut p = ParamSet::new();
            for (name, data) in &entries {
                p.insert(name.clone(), Tensor::vector(data.clone()));
            }
            let bytes = encode(&p).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            for (name, t) in p.iter() {
                let b = back.get(name).unwrap();
                prop_assert_eq!(b.shape(), t.shape());
                for (x, y) in t.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
