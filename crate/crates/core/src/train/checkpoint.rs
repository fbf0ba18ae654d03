use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::arch::{ArchSpec, Model};
use crate::error::{LabError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ALCKPT\0\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub dev_loss: Option<f64>,
    pub spec: ArchSpec,
    pub params: ParamStore,
    /// Absent for parameter-only snapshots.
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ArchSpec,
    step: u64,
    dev_loss: Option<f64>,
    adam_t: Option<u64>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            spec: self.spec.clone(),
            params: self.params.clone(),
        }
    }

    /// Magic, format version, JSON header, then each tensor as
    /// little-endian f64 in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(n, t)| (format!("adam_m/{n}"), t)));
            tensors.extend(opt.v.iter().map(|(n, t)| (format!("adam_v/{n}"), t)));
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: self.spec.clone(),
            step: self.step,
            dev_loss: self.dev_loss,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            tensors: tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let body: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(LabError::Format("truncated checkpoint".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(8)? != MAGIC {
            return Err(LabError::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(LabError::Format(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(hlen)?)?;
        if header.format_version != version {
            return Err(LabError::Format(
                "header and container versions disagree".into(),
            ));
        }
        let mut params = ParamStore::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let data = take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            match name.split_once('/') {
                Some(("param", p)) => params.insert(p, t)?,
                Some(("adam_m", p)) => {
                    m.insert(p.to_string(), t);
                }
                Some(("adam_v", p)) => {
                    v.insert(p.to_string(), t);
                }
                _ => return Err(LabError::Format(format!("unexpected tensor {name}"))),
            }
        }
        if !r.is_empty() {
            return Err(LabError::Format(
                "trailing bytes after checkpoint tensors".into(),
            ));
        }
        let optimizer = header.adam_t.map(|t| AdamState { m, v, t });
        let ck = Self {
            step: header.step,
            dev_loss: header.dev_loss,
            spec: header.spec,
            params,
            optimizer,
        };
        let expected = crate::arch::param_count(&ck.spec)?.total;
        if ck.params.num_scalars() != expected {
            return Err(LabError::Format(format!(
                "checkpoint holds {} parameters, its spec needs {expected}",
                ck.params.num_scalars()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
