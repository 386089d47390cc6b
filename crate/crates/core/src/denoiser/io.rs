//! Flat tensor container: 8-byte magic, `u32` tensor count, then per tensor
//! a `u32` rank, `u32` dims and little-endian `f64` data.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub type Tensor = (Vec<usize>, Vec<f64>);

const MAX_RANK: usize = 8;

pub fn write_tensors<W: Write>(mut w: W, magic: &[u8; 8], tensors: &[(Vec<usize>, &[f64])]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (dims, data) in tensors {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Format("tensor dims disagree with data length".into()));
        }
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_tensors<R: Read>(mut r: R, magic: &[u8; 8]) -> Result<Vec<Tensor>> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = read_u32(&mut r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor rank {rank} too large")));
        }
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((dims, data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = [1.0, -2.5, 3.25, f64::MIN_POSITIVE];
        let b = [7.0];
        let mut buf = Vec::new();
        write_tensors(&mut buf, b"TESTMAG1", &[(vec![2, 2], &a), (vec![1], &b)]).unwrap();
        let back = read_tensors(buf.as_slice(), b"TESTMAG1").unwrap();
        assert_eq!(back, vec![(vec![2, 2], a.to_vec()), (vec![1], b.to_vec())]);
        assert!(read_tensors(buf.as_slice(), b"OTHERMAG").is_err());
        assert!(read_tensors(&buf[..buf.len() - 3], b"TESTMAG1").is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_tensors(extra.as_slice(), b"TESTMAG1").is_err());
    }
}
