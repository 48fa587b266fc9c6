//! Binary tensor serialization: little-endian u64 rank, u64 per dimension,
//! then the row-major f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAX_RANK: u64 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let ctx = "read tensor";
    let rank = read_u64(r, ctx)?;
    if rank > MAX_RANK {
        return Err(Error::invalid("read_tensor", format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u128 = 1;
    for _ in 0..rank {
        let d = read_u64(r, ctx)?;
        numel *= d as u128;
        if numel > (1 << 33) {
            return Err(Error::invalid("read_tensor", "payload too large"));
        }
        shape.push(d as usize);
    }
    let mut data = vec![0.0f64; numel as usize];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf).map_err(|e| Error::io(ctx, e))?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor::from_vec(shape, data)
}

fn read_u64<R: Read>(r: &mut R, ctx: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(ctx, e))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(f);
    write_tensor(&mut w, t).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = std::io::BufReader::new(f);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.25e300, -7.0, 0.1])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 + 2 * 8 + 6 * 8);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let t = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
