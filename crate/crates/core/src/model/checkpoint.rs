//! Binary checkpoint format.
//!
//! ```text
//! "ERLB1\n"
//! repeated until EOF:
//!   u64 name_len, name (UTF-8)
//!   u64 rank, rank × u64 dims
//!   product(dims) × f32 data
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Parameters, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"ERLB1\n";

pub fn encode(params: &dyn Parameters) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    params.visit(&mut |name, t| {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

fn read_u64(r: &mut impl Read) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = r.read(&mut buf[filled..]).map_err(|e| Error::Format(e.to_string()))?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(Error::Format("truncated integer".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

fn need_u64(r: &mut impl Read) -> Result<u64> {
    read_u64(r)?.ok_or_else(|| Error::Format("unexpected end of file".into()))
}

pub fn decode(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("missing header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("bad header, expected ERLB1".into()));
    }
    let mut out = Vec::new();
    while let Some(name_len) = read_u64(&mut r)? {
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(|e| Error::Format(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = need_u64(&mut r)?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| need_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &dyn Parameters) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(params))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Overwrites every tensor of `params` from the checkpoint at `path`,
/// keeping each tensor's trainability flag.
pub fn load_into(path: &Path, params: &mut dyn Parameters) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode(BufReader::new(file))?;
    assign(&tensors, params)
}

pub fn assign(tensors: &[(String, Tensor)], params: &mut dyn Parameters) -> Result<()> {
    let mut err = None;
    params.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.iter().find(|(n, _)| n == name) {
            None => err = Some(Error::MissingTensor(name.to_string())),
            Some((_, src)) if src.shape() != t.shape() => {
                err = Some(Error::ShapeMismatch {
                    op: "checkpoint",
                    left: src.shape().to_vec(),
                    right: t.shape().to_vec(),
                })
            }
            Some((_, src)) => t.data_mut().copy_from_slice(src.data()),
        }
    });
    err.map_or(Ok(()), Err)
}
