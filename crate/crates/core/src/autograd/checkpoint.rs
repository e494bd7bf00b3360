//! `WFT1` weight files.
//!
//! Layout (all integers little-endian): magic `WFT1`, `u32` tensor count, then
//! for each tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32`
//! dimensions, and the values as row-major `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WFT1";

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[(String, Tensor)]) -> Result<(), TensorError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    let count = u32::try_from(tensors.len()).map_err(|_| bad("too many tensors"))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let rank = u8::try_from(tensor.ndim()).map_err(|_| bad(format!("{name}: rank too large")))?;
        out.write_all(&[rank])?;
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| bad(format!("{name}: dimension too large")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.numel() * 4);
        for &v in tensor.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(bad(format!("{name}: value {v} not representable as finite f32")));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(input: &mut R, what: &str) -> Result<[u8; N], TensorError> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, TensorError> {
    let magic: [u8; 4] = read_exact(&mut input, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut input, "tensor count")?);
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(&mut input, "name length")?) as usize;
        let mut name = vec![0u8; name_len];
        input
            .read_exact(&mut name)
            .map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let [rank] = read_exact::<1, _>(&mut input, "rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut input, "dimension")?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input
            .read_exact(&mut raw)
            .map_err(|e| bad(format!("{name}: truncated data: {e}")))?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(bad(format!("{name}: non-finite value")));
            }
            data.push(f64::from(v));
        }
        tensors.push((name.clone(), Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(tensors)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), TensorError> {
    write_checkpoint(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, TensorError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
