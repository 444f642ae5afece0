//! Binary framing shared by checkpoints, datasets and pseudo-label files.
//!
//! Layout: magic line, one UTF-8 JSON line, then tensors framed as
//! `u64 extent count | u64 extents | f64 values`, all little-endian.

use std::io::{BufRead, Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn write_header<W: Write>(w: &mut W, magic: &str, json: &str) -> Result<()> {
    debug_assert!(!json.contains('\n'));
    w.write_all(magic.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(json.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads the magic and JSON lines, returning the JSON text.
pub fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<String> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let found = String::from_utf8_lossy(line.strip_suffix(b"\n").unwrap_or(&line)).into_owned();
    if found != magic {
        let found: String = found.chars().take(32).collect();
        return Err(Error::Format {
            expected: magic.to_string(),
            found,
        });
    }
    let mut json = String::new();
    r.read_line(&mut json)?;
    if !json.ends_with('\n') {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated metadata line",
        )));
    }
    json.pop();
    Ok(json)
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_RANK: u64 = 8;
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(Error::Corrupt(format!("tensor rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut n: u64 = 1;
    for _ in 0..rank {
        let e = read_u64(r)?;
        n = n.saturating_mul(e);
        shape.push(e as usize);
    }
    if n > MAX_ELEMENTS {
        return Err(Error::Corrupt(format!("tensor with {n} elements is implausible")));
    }
    let mut bytes = vec![0u8; n as usize * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_frame_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 1e-300, 0.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 + 16 + 48);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_frame_is_io_error() {
        let t = Tensor::zeros(vec![4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Io(_))));
    }

    #[test]
    fn header_magic_mismatch_names_found() {
        let mut buf = Vec::new();
        write_header(&mut buf, "OTHER1", "{}").unwrap();
        let err = read_header(&mut buf.as_slice(), "PRSFDA1").unwrap_err();
        match err {
            Error::Format { found, .. } => assert_eq!(found, "OTHER1"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
