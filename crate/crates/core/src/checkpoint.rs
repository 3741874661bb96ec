//! Binary checkpoints: magic, format version, a JSON header, then raw little-endian f32 tensors.
//!
//! Nothing time-dependent is stored, so identical runs produce identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::contrastive::{MemoryBank, MomentumQueue, NegativeStore};
use crate::error::{Error, Result};
use crate::nn::{HasParams, Param, Real};
use crate::objective::Sgd;
use crate::training::TrainState;

const MAGIC: &[u8; 8] = b"TACOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StoreHeader {
    Bank { momentum: f64 },
    Queue { capacity: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub epochs_completed: usize,
    pub global_step: u64,
    pub store: Option<StoreHeader>,
    pub tensors: Vec<TensorEntry>,
}

fn err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Writer {
    entries: Vec<TensorEntry>,
    data: Vec<f32>,
}

impl Writer {
    fn add(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
    }

    fn add_params(&mut self, prefix: &str, model: &impl HasParams<f32>) {
        model.visit(prefix, &mut |name, p| self.add(name.to_string(), p.shape.clone(), &p.value));
    }
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = Writer {
        entries: Vec::new(),
        data: Vec::new(),
    };
    w.add_params("net", &state.net);
    if let Some(key) = &state.key {
        w.add_params("key", key);
    }
    for (name, v) in state.optimizer.velocity() {
        w.add(format!("velocity.{name}"), vec![v.len()], v);
    }
    let store = state.store.as_ref().map(|s| {
        let rows = s.vectors();
        let dim = s.dim();
        w.add("store".into(), vec![rows.len() / dim, dim], &rows);
        match s {
            NegativeStore::Bank(b) => StoreHeader::Bank { momentum: b.momentum() },
            NegativeStore::Queue(q) => StoreHeader::Queue { capacity: q.capacity() },
        }
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: f32::DTYPE.to_string(),
        config: state.config.clone(),
        config_hash: state.config.hash()?,
        epochs_completed: state.epochs_completed,
        global_step: state.global_step,
        store,
        tensors: w.entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + header_bytes.len() + 4 * w.data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for v in &w.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn split(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(err(
            path,
            format!("format version {version}, this build reads version {FORMAT_VERSION}"),
        ));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| err(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| err(path, format!("corrupt header: {e}")))?;
    if header.dtype != f32::DTYPE {
        return Err(err(path, format!("unsupported dtype {}", header.dtype)));
    }
    Ok((header, end))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| err(path, e.to_string()))?;
    Ok(split(&bytes, path)?.0)
}

/// The tensor section alone: parameters, optimizer velocity and negative store.
pub fn payload(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| err(path, e.to_string()))?;
    let (_, start) = split(&bytes, path)?;
    Ok(bytes[start..].to_vec())
}

struct Reader<'a> {
    path: &'a Path,
    data: Vec<f32>,
    index: BTreeMap<String, (Vec<usize>, usize)>,
    used: usize,
}

impl Reader<'_> {
    fn take(&mut self, name: &str, shape: Option<&[usize]>) -> Result<Vec<f32>> {
        let (stored, offset) = self
            .index
            .get(name)
            .cloned()
            .ok_or_else(|| err(self.path, format!("missing tensor {name}")))?;
        if let Some(shape) = shape {
            if shape != stored.as_slice() {
                return Err(err(
                    self.path,
                    format!("tensor {name} has shape {stored:?}, model expects {shape:?}"),
                ));
            }
        }
        let len: usize = stored.iter().product();
        let values = self
            .data
            .get(offset..offset + len)
            .ok_or_else(|| err(self.path, format!("tensor {name} runs past the data section")))?
            .to_vec();
        self.used += 1;
        Ok(values)
    }

    fn fill(&mut self, prefix: &str, model: &mut impl HasParams<f32>) -> Result<()> {
        let mut failure = None;
        model.visit_mut(prefix, &mut |name, p: &mut Param<f32>| {
            if failure.is_some() {
                return;
            }
            match self.take(name, Some(&p.shape)) {
                Ok(v) => p.value = v,
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| err(path, e.to_string()))?;
    let (header, start) = split(&bytes, path)?;
    let body = &bytes[start..];
    if body.len() % 4 != 0 {
        return Err(err(path, "data section is not a whole number of f32 values"));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let index = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), (t.shape.clone(), t.offset)))
        .collect();
    let mut r = Reader {
        path,
        data,
        index,
        used: 0,
    };

    let cfg = header.config.clone();
    let mut state = TrainState::init(&cfg, 2)?;
    state.epochs_completed = header.epochs_completed;
    state.global_step = header.global_step;
    r.fill("net", &mut state.net)?;
    if let Some(key) = state.key.as_mut() {
        r.fill("key", key)?;
    }
    let mut velocity = BTreeMap::new();
    for t in &header.tensors {
        if let Some(name) = t.name.strip_prefix("velocity.") {
            velocity.insert(name.to_string(), r.take(&t.name, None)?);
        }
    }
    let mut optimizer = Sgd::new(cfg.schedule.momentum, cfg.schedule.weight_decay);
    optimizer.set_velocity(velocity);
    state.optimizer = optimizer;
    state.store = match &header.store {
        None => None,
        Some(sh) => {
            let dim = cfg.heads.embed_dim;
            let rows = r.take("store", None)?;
            Some(match sh {
                StoreHeader::Bank { momentum } => NegativeStore::Bank(MemoryBank::from_vectors(rows, dim, *momentum)?),
                StoreHeader::Queue { capacity } => {
                    NegativeStore::Queue(MomentumQueue::from_keys(*capacity, dim, &rows)?)
                }
            })
        }
    };
    if r.used != header.tensors.len() {
        return Err(err(
            path,
            format!("{} tensors stored, {} consumed", header.tensors.len(), r.used),
        ));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainMode;
    use crate::contrastive::ContrastiveVariant;
    use crate::transforms::TransformKind;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            mode: TrainMode::Taco,
            transforms: vec![TransformKind::Reverse],
            ..Default::default()
        };
        cfg.heads.embed_dim = 8;
        cfg.heads.task_hidden = 8;
        cfg.contrastive.queue_size = 5;
        cfg
    }

    #[test]
    fn round_trip_both_variants() {
        for variant in [ContrastiveVariant::Instdisc, ContrastiveVariant::Moco] {
            let mut cfg = small();
            cfg.contrastive.variant = variant;
            let mut state = TrainState::init(&cfg, 6).unwrap();
            state.epochs_completed = 3;
            state.global_step = 17;
            let mut v = BTreeMap::new();
            state.net.visit("", &mut |n, p| {
                v.insert(n.to_string(), vec![0.25f32; p.len()]);
            });
            state.optimizer.set_velocity(v);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.bin");
            save(&state, &p).unwrap();
            let back = load(&p).unwrap();
            assert_eq!(back, state);
            let h = read_header(&p).unwrap();
            assert_eq!(h.config_hash, cfg.hash().unwrap());
        }
    }

    #[test]
    fn rejects_corruption_and_version() {
        let state = TrainState::init(&small(), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        save(&state, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[8] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(load(&p).unwrap_err().to_string().contains("format version 9"));

        bytes.truncate(bytes.len() - 4);
        fs::write(&p, &bytes).unwrap();
        assert!(load(&p).is_err());

        fs::write(&p, b"garbage").unwrap();
        assert!(load(&p).unwrap_err().to_string().contains("bad magic"));
    }
}
