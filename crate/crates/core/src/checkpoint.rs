//! Parameter checkpoint files: one file per parameter collection.
//!
//! ```text
//! magic b"MHCK" | version u16 | precision u8 | count u32
//! per entry: name_len u16 | name bytes | rank u8 | dims u32 x rank
//! payloads: raw little-endian elements, in entry order
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::{Precision, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MHCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn save_params<F: Real>(params: &ParamSet<F>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(F::PRECISION.flag());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in params.iter() {
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_params<F: Real>(path: &Path) -> Result<ParamSet<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fmt = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 11 {
        return Err(fmt("truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let precision = Precision::from_flag(bytes[6]).ok_or_else(|| fmt("bad precision flag"))?;
    if precision != F::PRECISION {
        return Err(fmt(&format!(
            "precision mismatch: file has {precision:?}, expected {:?}",
            F::PRECISION
        )));
    }
    let count = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let mut pos = 11usize;
    let mut layout: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 2 > bytes.len() {
            return Err(fmt("truncated name table"));
        }
        let nl = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + nl + 1 > bytes.len() {
            return Err(fmt("truncated name table"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| fmt("non-utf8 parameter name"))?
            .to_string();
        pos += nl;
        let rank = bytes[pos] as usize;
        pos += 1;
        if pos + 4 * rank > bytes.len() {
            return Err(fmt("truncated shape table"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        layout.push((name, shape));
    }
    let eb = F::PRECISION.bytes();
    let total: usize = layout
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if bytes.len() != pos + total * eb {
        return Err(fmt(&format!(
            "size mismatch: expected {} payload bytes, found {}",
            total * eb,
            bytes.len() - pos
        )));
    }
    let mut params = ParamSet::new();
    for (name, shape) in layout {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(F::read_le(&bytes[pos..pos + eb]));
            pos += eb;
        }
        params.push(name, Tensor::from_vec(shape, data)?);
    }
    Ok(params)
}
