//! Little-endian tensor files: `FAMT` magic, u32 version, u32 rank, one u64
//! per dimension, then the `f64` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FAMT";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format("tensor file", format!("truncated input: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format("tensor file", format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::format("tensor file", format!("unsupported version {version}")));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(Error::format("tensor file", format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = read_u64(r)?;
        shape.push(usize::try_from(d).map_err(|_| Error::format("tensor file", "dimension overflow"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor file", "element count overflow"))?;
    let mut bytes = vec![0u8; numel * 8];
    read_exact(r, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format("tensor file", e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"FAMT");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..28], &1u64.to_le_bytes());
        assert_eq!(&buf[28..36], &1.0f64.to_le_bytes());
        assert_eq!(&buf[36..44], &(-2.0f64).to_le_bytes());
        assert_eq!(buf.len(), 44);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor_from(&mut bad.as_slice()).is_err());
        let short = &buf[..buf.len() - 1];
        assert!(read_tensor_from(&mut &short[..]).is_err());
    }
}
