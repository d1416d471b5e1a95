//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DDIFFCK\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header, then
//! every tensor listed in the header as little-endian `f64`, in header order.

use std::io::{Read, Write};
use std::path::Path;

use depthdiff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{DepthModel, ModelConfig};
use crate::nn::{Module, ParamVisitor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DDIFFCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub schedule: NoiseSchedule,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Base seed; every random stream is derived from it and the counters above.
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DepthModel,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
}

fn named_tensors(model: &mut DepthModel) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    model.visit_params(&mut ParamVisitor::new(&mut |n, t| out.push((n.to_string(), t.clone()))));
    out
}

pub fn write_checkpoint(out: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let mut model = ckpt.model.clone();
    let tensors = named_tensors(&mut model);
    let header = CheckpointHeader {
        model: model.config.clone(),
        train: ckpt.train.clone(),
        schedule: model.schedule.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        seed: ckpt.seed,
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut buf = Vec::with_capacity(json.len() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let truncated = || Error::Format("checkpoint is truncated".into());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20usize.checked_add(hlen).ok_or_else(truncated)?).ok_or_else(truncated)?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.schedule.validate()?;
    let mut model = DepthModel::new(&header.model, 0)?;
    if header.schedule != model.schedule {
        return Err(Error::Format("stored schedule disagrees with the model configuration".into()));
    }
    let mut offset = 20 + hlen;
    let mut payload = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(truncated)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        offset += 8 * n;
        payload.push((e, data));
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor payload", bytes.len() - offset)));
    }
    let mut payload = payload.into_iter();
    let mut failure: Option<Error> = None;
    model.visit_params(&mut ParamVisitor::new(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match payload.next() {
            Some((e, data)) if e.name == name && e.shape == t.shape() => match Tensor::param(&e.shape, data) {
                Ok(p) => *t = p,
                Err(err) => failure = Some(Error::Format(format!("tensor {name}: {err}"))),
            },
            Some((e, _)) => {
                failure = Some(Error::Format(format!(
                    "expected tensor {name} {:?}, found {} {:?}",
                    t.shape(),
                    e.name,
                    e.shape
                )))
            }
            None => failure = Some(Error::Format(format!("checkpoint lacks tensor {name}"))),
        }
    }));
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some((e, _)) = payload.next() {
        return Err(Error::Format(format!("unexpected extra tensor {}", e.name)));
    }
    Ok(Checkpoint { model, train: header.train, epoch: header.epoch, step: header.step, seed: header.seed })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    crate::data::png::write_file(path, &buf)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
