//! Flat binary tensor format used for checkpoints: magic "SNFT", version u32,
//! rank u32, dims u32×rank (all little-endian), then the f64 payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::Tensor;

const MAGIC: &[u8; 4] = b"SNFT";
const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {:?}, expected \"SNFT\"", magic),
        });
    }
    let version = read_u32(r, 4)?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {}", version),
        });
    }
    let rank = read_u32(r, 8)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u32(r, 12 + 4 * i)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for i in 0..n {
        r.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: 12 + 4 * rank + 8 * i,
            message: "truncated payload".into(),
        })?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::from_vec(&shape, data)
}

fn read_u32<R: Read>(r: &mut R, offset: usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Parse {
        offset,
        message: "truncated header".into(),
    })?;
    Ok(u32::from_le_bytes(buf))
}
