//! Binary checkpoint format: a versioned header followed by
//! (name, shape, little-endian f64 values) records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

const MAGIC: &[u8; 8] = b"MXDETCKP";
const VERSION: u32 = 1;

pub fn save_checkpoint<R: Real>(path: &Path, params: &[(String, Tensor<R>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = |buf: &[u8]| -> Result<()> {
        w.write_all(buf).map_err(|e| Error::io(path, e))
    };
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let bytes = name.as_bytes();
        write(&(bytes.len() as u32).to_le_bytes())?;
        write(bytes)?;
        write(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            write(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            write(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Vec<(String, Tensor<R>)>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let bad = |msg: &str| Error::Checkpoint { path: path.display().to_string(), msg: msg.into() };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("bad magic; not a checkpoint file"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 parameter name"))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            data.push(R::from_f64_lossy(f64::from_le_bytes(buf)));
        }
        out.push((name, Tensor::from_vec(shape, data)));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
