//! Flat binary tensor files: magic "BMT1", u32 rank, u32 extents, then the
//! row-major f64 payload. All integers and floats little-endian.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BMT1";

pub fn write_bmt(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 + 4 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_bmt(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let fail = |msg: &str| Error::Format { path: path.display().to_string(), msg: msg.to_string() };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(fail("missing BMT1 magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated extent table"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != header + 8 * n {
        return Err(fail(&format!(
            "payload length {} does not match shape {:?}",
            bytes.len() - header,
            shape
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes[header..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::new(data, &shape)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source: e }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_shape_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bmt");
        let t = Tensor::new(vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0], &[2, 3]).unwrap();
        write_bmt(&p, &t).unwrap();
        let r = read_bmt(&p).unwrap();
        assert_eq!(r.shape(), t.shape());
        for (a, b) in r.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bmt");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_bmt(&p).is_err());
        let q = dir.path().join("trunc.bmt");
        std::fs::write(&q, b"BMT1\x01\x00\x00\x00\x02\x00\x00\x00\x00").unwrap();
        assert!(read_bmt(&q).is_err());
    }
}
