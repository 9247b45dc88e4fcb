//! Binary checkpoint: "GCCK", u32 version, u32 D, u32 flags, then for each
//! of h1..h4 a u32 layer count and (u32 in, u32 out) per layer, then every
//! weight matrix (row-major) and bias as little-endian f64 in the same order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{CombinerParams, Layer, Mlp};

const MAGIC: &[u8; 4] = b"GCCK";
const VERSION: u32 = 1;
const FLAG_SQUASH: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
}

pub fn checkpoint_to_bytes(p: &CombinerParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * p.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.dim as u32).to_le_bytes());
    let flags = if p.squash_lambda { FLAG_SQUASH } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for m in p.mlps() {
        out.extend_from_slice(&(m.layers.len() as u32).to_le_bytes());
        for l in &m.layers {
            out.extend_from_slice(&(l.n_in as u32).to_le_bytes());
            out.extend_from_slice(&(l.n_out as u32).to_le_bytes());
        }
    }
    for t in p.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<CombinerParams, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let flags = r.u32()?;
    let mut shapes = Vec::with_capacity(4);
    for _ in 0..4 {
        let n = r.u32()? as usize;
        if n == 0 || n > 64 {
            return Err(CheckpointError::Format(format!("implausible layer count {n}")));
        }
        let dims: Vec<(usize, usize)> = (0..n)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<_, CheckpointError>>()?;
        shapes.push(dims);
    }
    let mut mlps = Vec::with_capacity(4);
    for dims in shapes {
        let mut layers = Vec::with_capacity(dims.len());
        for &(n_in, n_out) in &dims {
            layers.push(Layer { n_in, n_out, w: Vec::new(), b: Vec::new() });
        }
        mlps.push(Mlp { layers });
    }
    for m in &mut mlps {
        for l in &mut m.layers {
            l.w = r.f64s(l.n_in * l.n_out)?;
            l.b = r.f64s(l.n_out)?;
        }
        if !m.is_consistent() {
            return Err(CheckpointError::Format("layer widths do not chain".into()));
        }
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let [h1, h2, h3, h4]: [Mlp; 4] = mlps.try_into().expect("four heads");
    CombinerParams::from_parts(dim, h1, h2, h3, h4, flags & FLAG_SQUASH != 0)
        .map_err(|e| CheckpointError::Format(e.to_string()))
}

pub fn write_checkpoint(path: &Path, p: &CombinerParams) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_to_bytes(p)).map_err(|source| CheckpointError::Io { path: path.into(), source })
}

pub fn read_checkpoint(path: &Path) -> Result<CombinerParams, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    checkpoint_from_bytes(&buf)
}
