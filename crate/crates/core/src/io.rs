//! Binary tensor files and named-tensor checkpoints.
//!
//! Tensor file layout (little-endian):
//!
//! ```text
//! "FGDT" | version: u32 | rank: u32 | dims: u64 × rank | dtype: u32 (0 = f32, 1 = f64) | payload
//! ```
//!
//! A checkpoint is a directory holding `params.bin`, the tensor files of every
//! parameter concatenated, and `params.manifest`, one `name,shape,offset` line
//! per tensor where `shape` is `d0xd1x..` and `offset` is the byte offset of
//! that tensor's record in `params.bin`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FGDT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let mut buf = Vec::with_capacity(16 + 8 * t.rank() + width * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(dtype as u32).to_le_bytes());
    match dtype {
        DType::F32 => t.data().iter().for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decode one tensor record; returns it and the number of bytes consumed.
pub fn decode_tensor(buf: &[u8], path: &Path) -> Result<(Tensor, usize)> {
    let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
    let mut r = Reader { buf, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing FGDT magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let dims = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated dims"))?;
    let numel: usize = dims.iter().product();
    let data = match r.u32().ok_or_else(|| bad("truncated header"))? {
        0 => r
            .take(4 * numel)
            .ok_or_else(|| bad("truncated payload"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        1 => r
            .take(8 * numel)
            .ok_or_else(|| bad("truncated payload"))?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        tag => return Err(bad(&format!("unknown dtype tag {tag}"))),
    };
    let t = Tensor::new(dims, data).map_err(|e| bad(&e.to_string()))?;
    Ok((t, r.pos))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t, DType::F64)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&buf, path)?;
    if used != buf.len() {
        return Err(Error::Format { path: path.to_path_buf(), detail: "trailing bytes".into() });
    }
    Ok(t)
}

pub const CHECKPOINT_BIN: &str = "params.bin";
pub const CHECKPOINT_MANIFEST: &str = "params.manifest";

pub fn shape_string(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Write named tensors as a checkpoint directory (created if missing).
pub fn write_checkpoint(dir: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::new();
    let mut manifest = String::from("name,shape,offset\n");
    for (name, t) in tensors {
        manifest.push_str(&format!("{name},{},{}\n", shape_string(t.dims()), bin.len()));
        bin.extend_from_slice(&encode_tensor(t, DType::F64));
    }
    let bin_path = dir.join(CHECKPOINT_BIN);
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    let man_path = dir.join(CHECKPOINT_MANIFEST);
    let mut f = fs::File::create(&man_path).map_err(|e| Error::io(&man_path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&man_path, e))
}

pub fn read_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let bin_path = dir.join(CHECKPOINT_BIN);
    let man_path = dir.join(CHECKPOINT_MANIFEST);
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let manifest = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let bad = |detail: String| Error::Format { path: man_path.clone(), detail };
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(bad(format!("line {}: expected name,shape,offset", lineno + 1)));
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("line {}: bad offset", lineno + 1)))?;
        let rest = bin.get(offset..).ok_or_else(|| bad(format!("offset {offset} beyond {CHECKPOINT_BIN}")))?;
        let (t, _) = decode_tensor(rest, &bin_path)?;
        if shape_string(t.dims()) != shape {
            return Err(bad(format!("{name}: manifest shape {shape} != stored {:?}", t.dims())));
        }
        out.push((name.to_string(), t));
    }
    Ok(out)
}
