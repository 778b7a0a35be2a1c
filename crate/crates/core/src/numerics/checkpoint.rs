//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "SETENCKP"
//! version  u32 LE    currently 1
//! count    u32 LE    number of records
//! record * count:
//!   name_len  u32 LE
//!   name      name_len bytes, UTF-8
//!   ndim      u32 LE
//!   dims      ndim * u64 LE
//!   values    product(dims) * f64 LE (IEEE-754 bits, row-major)
//! ```
//!
//! Records keep their order, and values are stored bit-exactly.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SETENCKP";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, records: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("checkpoint record name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let a = Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::scalar(std::f64::consts::PI);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        let mut again = Vec::new();
        let refs: Vec<(String, &Tensor)> = back.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_checkpoint(&mut again, &refs).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        let t = Tensor::vector(vec![1.0, 2.0]);
        write_checkpoint(&mut buf, &[("t".into(), &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
