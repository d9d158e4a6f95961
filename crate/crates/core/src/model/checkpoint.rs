//! Binary checkpoint files and head replacement.
//!
//! Layout (little-endian): magic `SKCK`, `u32` version, 32-byte SHA-256 of
//! the network config, `u64` iteration, `u32` metadata length and metadata
//! JSON, `u32` tensor count, then per tensor `u32` name length, name, `u8`
//! rank, `u32` dims and the `f64` payload. A trailing `u32` CRC-32 covers
//! every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{NetworkConfig, HEAD_PREFIX};
use super::network::{init_dense, Network};
use super::solver::{SolverConfig, SolverState};
use super::tensor::Tensor;
use super::ModelError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SKCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "solver.momentum.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: NetworkConfig,
    class_names: Vec<String>,
    #[serde(default)]
    solver: Option<SolverConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub class_names: Vec<String>,
    pub iteration: u64,
    pub solver: Option<SolverConfig>,
    pub tensors: Vec<(String, Tensor)>,
    /// Momentum buffers, one per parameter, when solver state is embedded.
    pub momentum: Option<Vec<Tensor>>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, iteration: u64, class_names: Vec<String>) -> Self {
        Self {
            config: net.config().clone(),
            class_names,
            iteration,
            solver: None,
            tensors: net.named_params().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            momentum: None,
        }
    }

    pub fn with_solver(mut self, solver: &SolverConfig, state: &SolverState) -> Self {
        self.solver = Some(solver.clone());
        self.momentum = Some(state.momentum.clone());
        self
    }

    pub fn to_network(&self) -> Result<Network, ModelError> {
        Network::from_named(self.config.clone(), self.tensors.clone())
    }

    pub fn solver_state(&self) -> Option<SolverState> {
        self.momentum.as_ref().map(|m| SolverState { momentum: m.clone() })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            solver: self.solver.clone(),
        })
        .map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.digest());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        let momentum_names: Vec<String> = self
            .momentum
            .iter()
            .flatten()
            .zip(&self.tensors)
            .map(|(_, (n, _))| format!("{MOMENTUM_PREFIX}{n}"))
            .collect();
        let all: Vec<(&str, &Tensor)> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain(momentum_names.iter().map(String::as_str).zip(self.momentum.iter().flatten()))
            .collect();
        put_u32(&mut out, all.len())?;
        for (name, t) in all {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| ModelError::Checkpoint(format!("rank of `{name}` too large")))?;
            out.push(rank);
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 4 {
            return Err(bad("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ModelError::Checkpoint(format!(
                "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
        if meta.config.digest() != digest {
            return Err(bad("config digest does not match metadata"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        let mut momentum = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(_) => momentum.push(t),
                None => tensors.push((name, t)),
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        if !momentum.is_empty() && momentum.len() != tensors.len() {
            return Err(bad("momentum buffer count does not match parameters"));
        }
        Ok(Self {
            config: meta.config,
            class_names: meta.class_names,
            iteration,
            solver: meta.solver,
            tensors,
            momentum: (!momentum.is_empty()).then_some(momentum),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Copies every body tensor of `ckpt` and draws a fresh dense head for
/// `target` (He-uniform weight, zero bias). The body of `target` must match
/// the checkpoint's body name-for-name and shape-for-shape.
pub fn replace_head(ckpt: &Checkpoint, target: &NetworkConfig, class_names: Vec<String>, seed: u64) -> Result<Checkpoint, ModelError> {
    target.validate()?;
    if class_names.len() != target.num_classes {
        return Err(ModelError::Config(format!(
            "{} class names for {} classes",
            class_names.len(),
            target.num_classes
        )));
    }
    let specs = target.param_specs();
    let mut mismatched = Vec::new();
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs.iter().filter(|s| !s.is_head()) {
        match ckpt.tensor(&spec.name) {
            Some(t) if t.shape() == spec.shape.as_slice() => tensors.push((spec.name.clone(), t.clone())),
            _ => mismatched.push(spec.name.clone()),
        }
    }
    for (name, _) in &ckpt.tensors {
        if !name.starts_with(HEAD_PREFIX) && !specs.iter().any(|s| &s.name == name) {
            mismatched.push(name.clone());
        }
    }
    if !mismatched.is_empty() {
        return Err(ModelError::BodyMismatch(mismatched));
    }
    let width = target.feature_width();
    tensors.push(("head.fc.weight".into(), init_dense(target.num_classes, width, seed)));
    tensors.push(("head.fc.bias".into(), Tensor::zeros(vec![target.num_classes])));
    Ok(Checkpoint {
        config: target.clone(),
        class_names,
        iteration: 0,
        solver: None,
        tensors,
        momentum: None,
    })
}
