//! Versioned binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "TLMCKPT\0"
//! version u32      currently 1
//! header  u32 x 5  vocab_size, context, layers, d_model, heads
//! count   u32      number of named arrays
//! arrays  repeated: name_len u32, name utf-8, ndim u32, dims u32...,
//!                   values f64 x prod(dims)
//! ```
//!
//! `load(save(p))` reproduces `p` bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::model::{LmConfig, TinyLm};

const MAGIC: &[u8; 8] = b"TLMCKPT\0";
const VERSION: u32 = 1;

pub fn save(model: &TinyLm, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let c = &model.config;
    for dim in [c.vocab_size, c.context, c.layers, c.d_model, c.heads] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    }
    let shapes = model.named_shapes();
    let arrays = model.arrays();
    w.write_all(&(shapes.len() as u32).to_le_bytes()).map_err(io)?;
    for ((name, shape), values) in shapes.iter().zip(arrays) {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &x in values {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<TinyLm> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let config = LmConfig {
        vocab_size: read_u32(&mut r, path)? as usize,
        context: read_u32(&mut r, path)? as usize,
        layers: read_u32(&mut r, path)? as usize,
        d_model: read_u32(&mut r, path)? as usize,
        heads: read_u32(&mut r, path)? as usize,
    };
    let mut model = TinyLm::zeros(config)
        .map_err(|e| Error::Checkpoint(format!("{}: invalid header: {e}", path.display())))?;

    let expected = model.named_shapes();
    let count = read_u32(&mut r, path)? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} arrays, found {count}",
            path.display(),
            expected.len()
        )));
    }
    for (arr, (name, shape)) in model.arrays_mut().into_iter().zip(expected) {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, path)?;
        let found = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 array name", path.display())))?;
        if found != name {
            return Err(Error::Checkpoint(format!(
                "{}: expected array {name:?}, found {found:?}",
                path.display()
            )));
        }
        let ndim = read_u32(&mut r, path)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r, path)? as usize);
        }
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "{}: array {name} has shape {dims:?}, expected {shape:?}",
                path.display()
            )));
        }
        let mut buf = [0u8; 8];
        for slot in arr.iter_mut() {
            read_exact(&mut r, &mut buf, path)?;
            *slot = f64::from_le_bytes(buf);
        }
    }
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}
