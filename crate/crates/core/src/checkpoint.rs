//! Single-file checkpoint: magic, version, config snapshot, named parameter
//! blobs in little-endian order and a trailing SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DuoVqa, ModelConfig};

const MAGIC: &[u8; 8] = b"DUOVQACK";
pub const FORMAT_VERSION: u32 = 1;

fn dtype_code(dt: DType) -> Result<u8> {
    match dt {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes the model to bytes.
pub fn encode_checkpoint(model: &DuoVqa) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    let cfg = serde_json::to_vec(&model.cfg).map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(&cfg);
    put_u32(&mut buf, model.weights().len() as u32);
    for w in model.weights() {
        put_u32(&mut buf, w.name.len() as u32);
        buf.extend_from_slice(w.name.as_bytes());
        let t = w.var.as_tensor();
        buf.push(dtype_code(t.dtype())?);
        put_u32(&mut buf, t.rank() as u32);
        for &d in t.dims() {
            put_u64(&mut buf, d as u64);
        }
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save_checkpoint(model: &DuoVqa, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug)]
struct Blob {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<(ModelConfig, serde_json::Value, Vec<Blob>)> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
    }
    let n = r.u32()? as usize;
    let raw = r.take(n)?;
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let cfg: ModelConfig =
        serde_json::from_value(value.clone()).map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let count = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let (dtype, width) = match r.take(1)?[0] {
            0 => (DType::F32, 4),
            1 => (DType::F64, 8),
            c => return Err(Error::Checkpoint(format!("{name}: unknown dtype code {c}"))),
        };
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let elems: usize = dims.iter().product();
        let data = r.take(elems * width)?.to_vec();
        blobs.push(Blob { name, dtype, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter blobs".into()));
    }
    Ok((cfg, value, blobs))
}

/// First leaf where two JSON trees differ, as a dotted path with both values.
fn first_difference(path: &str, a: &serde_json::Value, b: &serde_json::Value) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                first_difference(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null))
            })
        }
        _ if a == b => None,
        _ => Some(format!("config field `{path}` differs: checkpoint has {a}, model has {b}")),
    }
}

fn blob_tensor(b: &Blob, device: &Device) -> Result<Tensor> {
    let t = match b.dtype {
        DType::F32 => {
            let v: Vec<f32> = b.data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            Tensor::from_vec(v, b.dims.as_slice(), device)?
        }
        _ => {
            let v: Vec<f64> = b.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            Tensor::from_vec(v, b.dims.as_slice(), device)?
        }
    };
    Ok(t)
}

fn assign(model: &DuoVqa, blobs: &[Blob]) -> Result<()> {
    if blobs.len() != model.weights().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            blobs.len(),
            model.weights().len()
        )));
    }
    for (w, b) in model.weights().iter().zip(blobs) {
        if w.name != b.name {
            return Err(Error::Checkpoint(format!("parameter order mismatch: expected {}, found {}", w.name, b.name)));
        }
        if w.var.dims() != b.dims.as_slice() {
            return Err(Error::Checkpoint(format!("{}: shape {:?} does not match {:?}", b.name, b.dims, w.var.dims())));
        }
        let t = blob_tensor(b, model.device())?.to_dtype(w.var.dtype())?;
        w.var.set(&t)?;
    }
    Ok(())
}

/// Rebuilds the model from the stored config and loads every parameter.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<DuoVqa> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, _, blobs) = decode(&bytes)?;
    let dtype = blobs.first().map_or(DType::F32, |b| b.dtype);
    let model = DuoVqa::new(cfg, dtype, device)?;
    assign(&model, &blobs)?;
    Ok(model)
}

/// Loads parameters into an existing model; its config must match the stored one.
pub fn load_into(model: &DuoVqa, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, stored, blobs) = decode(&bytes)?;
    let mine = serde_json::to_value(&model.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(msg) = first_difference("", &stored, &mine) {
        return Err(Error::Checkpoint(msg));
    }
    assign(model, &blobs)
}
