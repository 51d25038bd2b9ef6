//! Self-describing checkpoint files.
//!
//! Layout: the line `KLON1`, the model spec as `key=value` lines, a
//! `params N` line, one `name kind b,c,h,w` line per tensor, the line
//! `data`, then every tensor as little-endian f64 in manifest order.
//! Batch-norm running buffers are included.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nn::ParamKind;
use crate::tensor::{Shape, Tensor};

const MAGIC: &str = "KLON1";

pub fn encode(model: &Model) -> Vec<u8> {
    let mut head = format!("{MAGIC}\n");
    for (k, v) in model.spec.to_kv() {
        head.push_str(&format!("{k}={v}\n"));
    }
    head.push_str(&format!("params {}\n", model.store.len()));
    let mut blob = Vec::new();
    for (_, p) in model.store.iter() {
        let s = p.value.shape().0;
        head.push_str(&format!("{} {} {},{},{},{}\n", p.name, p.kind.as_str(), s[0], s[1], s[2], s[3]));
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    head.push_str("data\n");
    let mut out = head.into_bytes();
    out.extend(blob);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?;
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut spec = ModelSpec::default();
    let count: usize = loop {
        let line = next_line()?;
        if let Some(n) = line.strip_prefix("params ") {
            break n.parse().map_err(|_| bad(format!("bad parameter count {n:?}")))?;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad spec line {line:?}")))?;
        if !spec.set(k, v)? {
            return Err(bad(format!("unknown spec key {k:?}")));
        }
    };
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 {
            return Err(bad(format!("bad tensor line {line:?}")));
        }
        let kind = ParamKind::parse(parts[1]).ok_or_else(|| bad(format!("unknown kind {:?}", parts[1])))?;
        let dims: Vec<usize> = parts[2].split(',').map(|d| d.parse().map_err(|_| bad(format!("bad shape {:?}", parts[2])))).collect::<Result<_>>()?;
        if dims.len() != 4 {
            return Err(bad(format!("bad shape {:?}", parts[2])));
        }
        entries.push((parts[0].to_string(), kind, Shape::new(dims[0], dims[1], dims[2], dims[3])));
    }
    if next_line()? != "data" {
        return Err(bad("missing data marker"));
    }
    let mut model = Model::build(&spec, 0)?;
    if model.store.len() != count {
        return Err(bad(format!("spec builds {} tensors, file has {count}", model.store.len())));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (id, (name, kind, shape)) in ids.into_iter().zip(entries) {
        let p = model.store.param(id);
        if p.name != name || p.kind != kind || p.value.shape() != shape {
            return Err(bad(format!("tensor {name} does not match the architecture (expected {} {:?})", p.name, p.value.shape())));
        }
        let n = shape.numel();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad(format!("truncated data for {name}")))?;
        pos += 8 * n;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *model.store.get_mut(id) = Tensor::from_vec(shape, data)?;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
