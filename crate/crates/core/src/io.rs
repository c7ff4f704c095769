//! `DTEN` tensor files.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! "DTEN" | version: u32 = 1 | dtype: u8 (1 = f64) | rank: u8 | dims: rank × u64 | payload: f64 × Π dims
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTEN";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encoded_len(t: &Tensor) -> usize {
    4 + 4 + 1 + 1 + 8 * t.rank() + 8 * t.len()
}

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.reserve(encoded_len(t));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(Error::TruncatedFile {
            expected: end,
            found: bytes.len(),
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Decodes one record from the front of `bytes`; returns it with the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadMagic);
    }
    let dtype = take(bytes, &mut at, 1)?[0];
    if dtype != DTYPE_F64 {
        return Err(Error::DtypeUnsupported(dtype));
    }
    let rank = take(bytes, &mut at, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let payload = take(bytes, &mut at, 8 * n)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(&shape, data)?, at))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::BadParam(format!(
            "{} trailing bytes after tensor record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn zeros_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.dten");
        let z = Tensor::zeros(&[3, 3]);
        save(&p, &z).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 1 + 1 + 16 + 72);
        assert_eq!(&bytes[..4], b"DTEN");
        assert_eq!(load(&p).unwrap(), z);
    }

    #[test]
    fn random_roundtrip_is_bit_exact() {
        let t = Rng::new(8).normal(0.0, 1e3, &[2, 5, 7]).unwrap();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 1);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1.0f64.to_le_bytes());
    }

    #[test]
    fn negative_cases() {
        let mut b = encode(&Tensor::zeros(&[2]));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::BadMagic)));
        let mut b = encode(&Tensor::zeros(&[2]));
        b[8] = 2;
        assert!(matches!(decode(&b), Err(Error::DtypeUnsupported(2))));
        let b = encode(&Tensor::zeros(&[2]));
        assert!(matches!(
            decode(&b[..b.len() - 3]),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            load("/nonexistent/x.dten"),
            Err(Error::MissingFile(_))
        ));
    }

    proptest! {
        #[test]
        fn load_after_save_is_identity(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let t = Rng::new(seed).normal(0.0, 10.0, &dims).unwrap();
            let bytes = encode(&t);
            prop_assert_eq!(bytes.len(), encoded_len(&t));
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
