//! Parameter checkpoints: a manifest of named tensors followed by their
//! little-endian `f64` data.
//!
//! ```text
//! DFCKPT1\n
//! u64 LE          manifest length in bytes
//! manifest        one line per tensor: name \t d0,d1,... \t byte offset \n
//! data            concatenated f64 LE values, offsets relative to here
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"DFCKPT1\n";

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (name, t) in params.entries() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{offset}\n", dims.join(",")));
        offset += t.numel() * 8;
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, t) in params.entries() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let perr = |offset: usize, message: String| Error::Parse { offset, message };
    if !bytes.starts_with(MAGIC) {
        return Err(perr(0, "not a checkpoint (bad magic)".into()));
    }
    let mut pos = MAGIC.len();
    let len_bytes: [u8; 8] = bytes
        .get(pos..pos + 8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| perr(pos, "truncated manifest length".into()))?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    pos += 8;
    let manifest = bytes
        .get(pos..pos.saturating_add(mlen))
        .ok_or_else(|| perr(pos, "truncated manifest".into()))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| perr(pos, "manifest not UTF-8".into()))?;
    let data = &bytes[pos + mlen..];

    let mut entries = Vec::new();
    let mut expected_offset = 0usize;
    for line in manifest.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset] = fields[..] else {
            return Err(perr(pos, format!("bad manifest line {line:?}")));
        };
        let shape = if dims.is_empty() {
            vec![]
        } else {
            dims.split(',')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| perr(pos, format!("bad shape {dims:?}")))?
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| perr(pos, format!("bad offset {offset:?}")))?;
        if offset != expected_offset {
            return Err(perr(pos, format!("tensor {name} at offset {offset}, expected {expected_offset}")));
        }
        let n: usize = shape.iter().product();
        let raw = data
            .get(offset..offset + n * 8)
            .ok_or_else(|| perr(pos + mlen + data.len(), format!("truncated data for {name}")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name.to_string(), Tensor::new(shape, values)?));
        expected_offset = offset + n * 8;
    }
    if expected_offset != data.len() {
        return Err(perr(pos + mlen + expected_offset, "trailing bytes after tensors".into()));
    }
    Ok(ParamSet::new(entries))
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
