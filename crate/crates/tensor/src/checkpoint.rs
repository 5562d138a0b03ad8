//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"KGADCKPT"
//! version u32      currently 1
//! meta    u64 length + UTF-8 JSON document (config, fingerprints, ...)
//! count   u32      number of tensors
//! tensor  repeated: u32 name length, name bytes,
//!                   u8 rank, u64 dims[rank],
//!                   f64 values (row-major, little-endian)
//! ```

use crate::tensor::{Shape, Tensor};
use crate::{Result, TensorError};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"KGADCKPT";
const VERSION: u32 = 1;

/// A named-tensor container with a free-form JSON metadata block.
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        let dims = shape.dims();
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".to_string()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta =
        serde_json::from_slice(&meta_buf).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| TensorError::Checkpoint("non-UTF8 tensor name".to_string()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let shape = match rank[0] {
            1 => Shape::vector(read_u64(&mut r)? as usize),
            2 => {
                let rows = read_u64(&mut r)? as usize;
                let cols = read_u64(&mut r)? as usize;
                Shape::matrix(rows, cols)
            }
            other => {
                return Err(TensorError::Checkpoint(format!("unsupported rank {other}")));
            }
        };
        let mut data = vec![0.0f64; shape.len()];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::from_shape_vec(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes".to_string()));
    }
    Ok(Checkpoint { meta, tensors })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
