//! Binary tensor container.
//!
//! Layout: `b"PENE"`, format version (`u32`), then records until EOF. Each
//! record is the name length (`u32`), UTF-8 name bytes, rank (`u32`), `rank`
//! dimensions (`u64` each) and the values as `f32`. All integers and floats
//! are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PENE";
pub const FORMAT_VERSION: u32 = 1;

/// Serialises named tensors into any writer.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Checkpoint("truncated record".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)? {
            break;
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated dims".into()))?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(f), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SplitMix64;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = SplitMix64::new(9);
        let mut a = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
        a.data_mut()[0] = f32::MIN_POSITIVE;
        a.data_mut()[1] = -0.0;
        let b = Tensor::<f32>::randn(&[7], 1.0, &mut rng);
        let items = vec![("dec/W_proj".to_string(), a), ("feat/doc-1".to_string(), b)];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &items).unwrap();
        assert_eq!(&buf[..4], b"PENE");
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in items.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.dims(), t1.dims());
            let bits0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensors(&b"NOPE\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::zeros(&[4]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensors(&buf[..]).is_err());
    }

    #[test]
    fn empty_container() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[]).unwrap();
        assert!(read_tensors(&buf[..]).unwrap().is_empty());
    }
}
