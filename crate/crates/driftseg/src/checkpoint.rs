//! Checkpoint archive: a JSON header followed by raw little-endian `f64`
//! payloads, restoring training state bit-for-bit.
//!
//! The header records the network config (and its hash), the step counter,
//! the train-config snapshot, the source validation cases, and the shape of
//! every named array. Student and teacher parameters, both prototype banks,
//! and the negative queue all live in the payload.

use crate::contrast::NegativeQueue;
use crate::net::{ModelState, NetworkConfig};
use crate::proto::PrototypeBank;
use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("payload truncated for array {0}")]
    Truncated(String),
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub config_hash: String,
    pub step_count: u64,
    /// TOML snapshot of the full training configuration.
    pub train_config_toml: String,
    pub source_val_cases: Vec<String>,
    pub student: ModelState,
    pub teacher: ModelState,
    pub source_bank: PrototypeBank,
    pub target_bank: PrototypeBank,
    pub queue_capacity: usize,
    pub queue_write_cursor: u64,
    pub queue_entries: Vec<Array1<f64>>,
}

impl Checkpoint {
    pub fn queue(&self) -> NegativeQueue {
        NegativeQueue::from_entries(
            self.queue_capacity,
            self.queue_entries.clone(),
            self.queue_write_cursor,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    momentum: f64,
    initialized: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    step_count: u64,
    network: NetworkConfig,
    train_config_toml: String,
    source_val_cases: Vec<String>,
    student_step_count: u64,
    teacher_step_count: u64,
    source_bank: BankMeta,
    target_bank: BankMeta,
    queue_capacity: usize,
    queue_write_cursor: u64,
    arrays: Vec<ArrayMeta>,
}

fn push_arrays(
    prefix: &str,
    params: &IndexMap<String, ArrayD<f64>>,
    metas: &mut Vec<ArrayMeta>,
    payload: &mut Vec<(String, ArrayD<f64>)>,
) {
    for (name, arr) in params {
        let full = format!("{prefix}.{name}");
        metas.push(ArrayMeta {
            name: full.clone(),
            shape: arr.shape().to_vec(),
        });
        payload.push((full, arr.clone()));
    }
}

/// Writes the checkpoint; the write is atomic (temp file + rename).
pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut metas = Vec::new();
    let mut payload: Vec<(String, ArrayD<f64>)> = Vec::new();
    push_arrays("student", &checkpoint.student.params, &mut metas, &mut payload);
    push_arrays("teacher", &checkpoint.teacher.params, &mut metas, &mut payload);
    for (label, bank) in [
        ("bank.source", &checkpoint.source_bank),
        ("bank.target", &checkpoint.target_bank),
    ] {
        metas.push(ArrayMeta {
            name: label.to_string(),
            shape: vec![bank.num_classes(), bank.dim()],
        });
        payload.push((label.to_string(), bank.prototypes.clone().into_dyn()));
    }
    let qdim = checkpoint.queue_entries.first().map_or(0, |v| v.len());
    metas.push(ArrayMeta {
        name: "queue.entries".into(),
        shape: vec![checkpoint.queue_entries.len(), qdim],
    });
    {
        let mut q = Array2::zeros((checkpoint.queue_entries.len(), qdim));
        for (i, v) in checkpoint.queue_entries.iter().enumerate() {
            q.row_mut(i).assign(v);
        }
        payload.push(("queue.entries".into(), q.into_dyn()));
    }

    let header = Header {
        version: VERSION,
        config_hash: checkpoint.config_hash.clone(),
        step_count: checkpoint.step_count,
        network: checkpoint.network.clone(),
        train_config_toml: checkpoint.train_config_toml.clone(),
        source_val_cases: checkpoint.source_val_cases.clone(),
        student_step_count: checkpoint.student.step_count,
        teacher_step_count: checkpoint.teacher.step_count,
        source_bank: BankMeta {
            momentum: checkpoint.source_bank.momentum,
            initialized: checkpoint.source_bank.initialized.clone(),
        },
        target_bank: BankMeta {
            momentum: checkpoint.target_bank.momentum,
            initialized: checkpoint.target_bank.initialized.clone(),
        },
        queue_capacity: checkpoint.queue_capacity,
        queue_write_cursor: checkpoint.queue_write_cursor,
        arrays: metas,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        for (_, arr) in &payload {
            for &v in arr.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.version != VERSION {
        return Err(CheckpointError::BadVersion(header.version));
    }

    let mut arrays: IndexMap<String, ArrayD<f64>> = IndexMap::new();
    for meta in &header.arrays {
        let count: usize = meta.shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        f.read_exact(&mut buf)
            .map_err(|_| CheckpointError::Truncated(meta.name.clone()))?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        arrays.insert(meta.name.clone(), arr);
    }

    let take_prefixed = |arrays: &IndexMap<String, ArrayD<f64>>, prefix: &str| {
        arrays
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .and_then(|rest| rest.strip_prefix('.'))
                    .map(|rest| (rest.to_string(), v.clone()))
            })
            .collect::<IndexMap<String, ArrayD<f64>>>()
    };
    let student = ModelState {
        params: take_prefixed(&arrays, "student"),
        step_count: header.student_step_count,
    };
    let teacher = ModelState {
        params: take_prefixed(&arrays, "teacher"),
        step_count: header.teacher_step_count,
    };

    let bank_from = |name: &str, meta: &BankMeta| -> Result<PrototypeBank, CheckpointError> {
        let arr = arrays
            .get(name)
            .ok_or_else(|| CheckpointError::BadHeader(format!("missing {name}")))?;
        let prototypes = arr
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        Ok(PrototypeBank {
            prototypes,
            initialized: meta.initialized.clone(),
            momentum: meta.momentum,
        })
    };
    let source_bank = bank_from("bank.source", &header.source_bank)?;
    let target_bank = bank_from("bank.target", &header.target_bank)?;

    let queue_arr = arrays
        .get("queue.entries")
        .ok_or_else(|| CheckpointError::BadHeader("missing queue".into()))?
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let queue_entries: Vec<Array1<f64>> = queue_arr
        .rows()
        .into_iter()
        .map(|r| r.to_owned())
        .collect();

    Ok(Checkpoint {
        network: header.network,
        config_hash: header.config_hash,
        step_count: header.step_count,
        train_config_toml: header.train_config_toml,
        source_val_cases: header.source_val_cases,
        student,
        teacher,
        source_bank,
        target_bank,
        queue_capacity: header.queue_capacity,
        queue_write_cursor: header.queue_write_cursor,
        queue_entries,
    })
}
