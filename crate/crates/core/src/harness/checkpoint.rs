//! Binary checkpoints: run config, training state, parameters and optimizer
//! moments in one file.
//!
//! Layout (little endian): magic `PDFNETCK`, `u32` format version, then three
//! length-prefixed JSON blobs (config, state, moment step counts) and a tensor
//! table. Each tensor is a name, a dtype tag, the rank, the dims and the raw
//! values. Files are written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::Moments;
use crate::error::{PdfnetError, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"PDFNETCK";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param.";
const ADAM_M: &str = "adam_m.";
const ADAM_V: &str = "adam_v.";

/// Position of a run, enough to continue it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Current epoch, counted from 0.
    pub epoch: u64,
    /// Next position in this epoch's sample order.
    pub cursor: usize,
    /// Seed of the schedule generator; epoch `e` draws its order and
    /// augmentation seeds from a stream derived from `(rng_seed, e)`.
    pub rng_seed: u64,
    pub best_val_mae: Option<f64>,
    pub best_step: Option<u64>,
}

impl TrainState {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            cursor: 0,
            rng_seed,
            best_val_mae: None,
            best_step: None,
        }
    }
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub params: BTreeMap<String, Tensor>,
    pub moments: BTreeMap<String, Moments>,
}

fn dtype_tag(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(PdfnetError::Data(format!("cannot store {other:?} tensors"))),
    }
}

fn write_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    write_blob(out, name.as_bytes());
    out.push(dtype_tag(t.dtype())?);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PdfnetError::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.blob()?.to_vec()).map_err(|_| PdfnetError::Data("tensor name is not UTF-8".into()))?;
        let tag = self.take(1)?[0];
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match tag {
            0 => {
                let raw = self.take(n * 4)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = self.take(n * 8)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return Err(PdfnetError::Data(format!("unknown dtype tag {other} for {name}"))),
        };
        Ok((name, t))
    }
}

impl Checkpoint {
    /// Snapshot of a live parameter store and optimizer.
    pub fn capture(config: &RunConfig, state: &TrainState, params: &ParamStore, moments: &BTreeMap<String, Moments>) -> Self {
        Self {
            config: config.clone(),
            state: state.clone(),
            params: params.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect(),
            moments: moments.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_blob(&mut out, &serde_json::to_vec(&self.config)?);
        write_blob(&mut out, &serde_json::to_vec(&self.state)?);
        let steps: BTreeMap<&String, u64> = self.moments.iter().map(|(k, m)| (k, m.steps)).collect();
        write_blob(&mut out, &serde_json::to_vec(&steps)?);
        let count = self.params.len() + 2 * self.moments.len();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (name, t) in &self.params {
            write_tensor(&mut out, &format!("{PARAM}{name}"), t)?;
        }
        for (name, m) in &self.moments {
            write_tensor(&mut out, &format!("{ADAM_M}{name}"), &m.m)?;
            write_tensor(&mut out, &format!("{ADAM_V}{name}"), &m.v)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(PdfnetError::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PdfnetError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config: RunConfig = serde_json::from_slice(r.blob()?)?;
        let state: TrainState = serde_json::from_slice(r.blob()?)?;
        let steps: BTreeMap<String, u64> = serde_json::from_slice(r.blob()?)?;
        let count = r.u64()?;
        let mut params = BTreeMap::new();
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_M) {
                ms.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                vs.insert(n.to_string(), t);
            } else {
                return Err(PdfnetError::Data(format!("unexpected tensor {name} in checkpoint")));
            }
        }
        if r.pos != bytes.len() {
            return Err(PdfnetError::Data("trailing bytes after checkpoint".into()));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in ms {
            let v = vs
                .remove(&name)
                .ok_or_else(|| PdfnetError::Data(format!("second moment of {name} missing")))?;
            let steps = *steps
                .get(&name)
                .ok_or_else(|| PdfnetError::Data(format!("step count of {name} missing")))?;
            moments.insert(name, Moments { m, v, steps });
        }
        if let Some(name) = vs.keys().next() {
            return Err(PdfnetError::Data(format!("first moment of {name} missing")));
        }
        Ok(Self {
            config,
            state,
            params,
            moments,
        })
    }

    /// Writes atomically: a temporary sibling is written, synced and renamed.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PdfnetError::NotFound(path.to_path_buf()),
            _ => PdfnetError::io(path, e),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| PdfnetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored parameters into `store`; names and shapes must match.
    pub fn restore_params(&self, store: &ParamStore) -> Result<()> {
        for (name, _) in store.iter() {
            if !self.params.contains_key(name) {
                return Err(PdfnetError::Data(format!("checkpoint lacks parameter {name}")));
            }
        }
        for (name, t) in &self.params {
            store.assign(name, &t.to_device(store.device())?)?;
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        PdfnetError::io(path, e)
    })
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
