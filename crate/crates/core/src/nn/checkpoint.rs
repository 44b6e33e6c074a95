//! Single-file model checkpoints: magic header, TOML metadata, raw tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::unet::{ModelConfig, ResUNet};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"PATCNNCK";
pub const VERSION: u32 = 1;

/// Training history stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub seed: u64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    meta: TrainingMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ResUNet<T>,
    pub meta: TrainingMeta,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ResUNet<T>, meta: TrainingMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&mut self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            model: self.model.config().clone(),
            meta: self.meta.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut tensors: Vec<(String, Vec<f64>)> = self
            .model
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.iter().map(|v| v.as_f64()).collect()))
            .collect();
        tensors.extend(
            self.model
                .buffers_mut()
                .into_iter()
                .map(|(n, b)| (n, b.iter().map(|v| v.as_f64()).collect())),
        );
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, values) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                write_value::<T>(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(take(&mut r)?) as usize;
        let text = take_vec(&mut r, len)?;
        let text = std::str::from_utf8(&text).map_err(|_| Error::format("checkpoint header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::format(format!("unknown checkpoint dtype {other}"))),
        };
        let mut model = ResUNet::<T>::new(&header.model)?;
        let count = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = String::from_utf8(take_vec(&mut r, nlen)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let n = u64::from_le_bytes(take(&mut r)?) as usize;
            let raw = take_vec(&mut r, n.checked_mul(width).ok_or_else(|| Error::format("tensor too large"))?)?;
            let values: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    } else {
                        T::lit(f64::from_le_bytes(c.try_into().unwrap()))
                    }
                })
                .collect();
            tensors.push((name, values));
        }
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after checkpoint tensors"));
        }
        let mut it = tensors.into_iter();
        let mut assign = |name: &str, dst: &mut Vec<T>| -> Result<()> {
            let (n, v) = it.next().ok_or_else(|| Error::format(format!("checkpoint is missing tensor {name}")))?;
            if n != name || v.len() != dst.len() {
                return Err(Error::format(format!(
                    "checkpoint tensor {n} ({} values) does not match model tensor {name} ({} values)",
                    v.len(),
                    dst.len()
                )));
            }
            *dst = v;
            Ok(())
        };
        for (name, p) in model.params_mut() {
            assign(&name, &mut p.value)?;
        }
        for (name, b) in model.buffers_mut() {
            assign(&name, b)?;
        }
        if it.next().is_some() {
            return Err(Error::format("checkpoint has more tensors than the model"));
        }
        Ok(Checkpoint { model, meta: header.meta })
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_value<T: Scalar>(out: &mut Vec<u8>, v: f64) {
    if T::DTYPE == "f32" {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    } else {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::format("truncated checkpoint"));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn take_vec(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    Ok(b)
}
