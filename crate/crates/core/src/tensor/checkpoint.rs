//! Checkpoint files: `CAUDR1`, a little-endian `u32` version, then one record
//! per tensor until end of file. A record is a `u32` name length, the UTF-8
//! name, a `u32` rank, `rank` `u32` dims, and the raw little-endian `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CAUDR1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    encode(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub(crate) fn encode(out: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(t.tensor.rank() as u32).to_le_bytes())?;
        for &d in t.tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.tensor.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn decode(mut bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 6];
    read_exact(&mut bytes, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut bytes, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut tensors = Vec::new();
    while !bytes.is_empty() {
        let len = read_u32(&mut bytes, "name length")? as usize;
        if len > bytes.len() {
            return Err(Error::Format("truncated checkpoint: name".into()));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut bytes, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut bytes, "rank")? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut bytes, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel.checked_mul(4).is_none_or(|n| n > bytes.len()) {
            return Err(Error::Format(format!("truncated checkpoint: data of {name:?}")));
        }
        let data = bytes[..numel * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bytes = &bytes[numel * 4..];
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(tensors)
}

fn read_exact(bytes: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    bytes
        .read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint: {what}")))
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(bytes, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
