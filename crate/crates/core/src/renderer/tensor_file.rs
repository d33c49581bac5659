//! Raw tensor files: `PRTF` magic, `u32` dtype code, `u32` rank, `u64` dims,
//! then the row-major body, all little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"PRTF";

pub fn write_tensor<S: Scalar>(w: &mut impl Write, t: &Tensor<S>) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(S::DTYPE as u32).to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * S::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<S: Scalar>(r: &mut impl Read) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format("not a raw tensor file".into()));
    }
    let code = read_u32(r)?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!("stored {dtype:?}, requested {:?}", S::DTYPE)));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let mut body = vec![0u8; n * dtype.size()];
    r.read_exact(&mut body)?;
    let data = body.chunks_exact(dtype.size()).map(S::read_le).collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<S: Scalar>(path: &std::path::Path, t: &Tensor<S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: &std::path::Path) -> Result<Tensor<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = Rng::new(1);
        let t: Tensor<f64> = rng.normal_tensor(&[2, 3, 4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 3 * 8 + 24 * 8);
        let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let t32: Tensor<f32> = rng.normal_tensor(&[5]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t32).unwrap();
        assert_eq!(read_tensor::<f32>(&mut buf.as_slice()).unwrap(), t32);
        assert!(matches!(read_tensor::<f64>(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_or_foreign_files_fail() {
        let t = Tensor::<f64>::zeros(&[2, 2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor::<f64>(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(matches!(read_tensor::<f64>(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
