//! Checkpoints: `manifest.json` plus `tensors.bin`, a flat run of
//! little-endian f32 arrays (value, first and second Adam moments for each
//! parameter; the query of each memory sample).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lqa_core::config::RunConfig;
use lqa_core::error::{Error, Result};
use lqa_core::memory::{MemoryBuffer, MemoryEntry};
use lqa_core::nn::Param;
use lqa_core::query::{QueryEncoder, QueryVector};
use lqa_core::taskgen::Sample;
use lqa_core::trainer::Trainer;
use lqa_core::vocab::Vocab;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Optimizer steps taken; memory queries carry 0.
    pub steps: u64,
    /// Byte offset into the tensor file.
    pub offset: u64,
    /// Whether Adam moments follow the value.
    pub moments: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryRecord {
    pub task_id: u32,
    pub sample: Sample,
    pub source_hash: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: RunConfig,
    pub encoder: QueryEncoder,
    pub vocab: Vec<String>,
    pub learned: Vec<u32>,
    pub stages: usize,
    pub global_step: u64,
    pub boundaries: Vec<(u32, f64)>,
    pub memory: Vec<MemoryRecord>,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the tensor file.
    pub tensors_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn push_f32(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32(bytes: &[u8], offset: &mut usize, n: usize) -> Result<Vec<f32>> {
    let end = *offset + 4 * n;
    let chunk = bytes
        .get(*offset..end)
        .ok_or_else(|| Error::Checkpoint(format!("tensor file truncated at byte {}", *offset)))?;
    *offset = end;
    Ok(chunk
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Every trainer parameter with a stable name, in file order.
fn named_params(t: &Trainer) -> Vec<(String, &Param<f32>)> {
    let mut v = t.model.params();
    let p = &t.pool;
    v.push(("prompt.general".into(), &p.general));
    for (i, x) in p.format.iter().enumerate() {
        v.push((format!("prompt.format.{i}"), x));
    }
    for (i, x) in p.unseen.iter().enumerate() {
        v.push((format!("prompt.unseen.{i}"), x));
    }
    for (id, x) in &p.task {
        v.push((format!("prompt.task.{id}"), x));
    }
    for (i, x) in p.meta.iter().enumerate() {
        v.push((format!("prompt.meta.{i}"), x));
    }
    for (id, x) in &p.task_keys {
        v.push((format!("key.task.{id}"), x));
    }
    for (i, x) in p.meta_keys.iter().enumerate() {
        v.push((format!("key.meta.{i}"), x));
    }
    v
}

/// Serializes the trainer into `(manifest, tensor bytes)`.
pub fn encode(t: &Trainer) -> (Manifest, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in named_params(t) {
        tensors.push(TensorEntry {
            name,
            rows: p.rows,
            cols: p.cols,
            steps: p.steps,
            offset: bytes.len() as u64,
            moments: true,
        });
        push_f32(&mut bytes, &p.value);
        push_f32(&mut bytes, &p.m);
        push_f32(&mut bytes, &p.v);
    }
    for (i, e) in t.memory.entries.iter().enumerate() {
        tensors.push(TensorEntry {
            name: format!("memory.{i}.query"),
            rows: 1,
            cols: e.query.values.len(),
            steps: 0,
            offset: bytes.len() as u64,
            moments: false,
        });
        push_f32(&mut bytes, &e.query.values);
    }
    let manifest = Manifest {
        version: VERSION,
        config: t.config.clone(),
        encoder: t.encoder,
        vocab: t.vocab.tokens().to_vec(),
        learned: t.learned.clone(),
        stages: t.stages,
        global_step: t.global_step,
        boundaries: t.boundaries.iter().map(|(&k, &v)| (k, v)).collect(),
        memory: t
            .memory
            .entries
            .iter()
            .map(|e| MemoryRecord {
                task_id: e.task_id,
                sample: e.sample.clone(),
                source_hash: e.query.source_hash,
            })
            .collect(),
        tensors,
        tensors_sha256: sha256_hex(&bytes),
    };
    (manifest, bytes)
}

pub fn manifest_text(m: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    s
}

/// Digest of a whole checkpoint: SHA-256 over the manifest text and the
/// tensor bytes.
pub fn digest(manifest: &str, tensors: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest.as_bytes());
    h.update(tensors);
    hex::encode(h.finalize())
}

/// Writes the checkpoint and returns its digest.
pub fn save(t: &Trainer, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let (m, bytes) = encode(t);
    let text = manifest_text(&m);
    fs::write(dir.join(TENSORS), &bytes)?;
    fs::write(dir.join(MANIFEST), &text)?;
    Ok(digest(&text, &bytes))
}

/// Digest of a checkpoint on disk, without loading it.
pub fn digest_dir(dir: &Path) -> Result<String> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let bytes = fs::read(dir.join(TENSORS))?;
    Ok(digest(&text, &bytes))
}

fn restore(p: &mut Param<f32>, e: &TensorEntry, bytes: &[u8]) -> Result<()> {
    if (p.rows, p.cols) != (e.rows, e.cols) || !e.moments {
        return Err(Error::Checkpoint(format!(
            "tensor {} is {}x{}, expected {}x{}",
            e.name, e.rows, e.cols, p.rows, p.cols
        )));
    }
    let mut off = e.offset as usize;
    let n = p.len();
    p.value = read_f32(bytes, &mut off, n)?;
    p.m = read_f32(bytes, &mut off, n)?;
    p.v = read_f32(bytes, &mut off, n)?;
    p.steps = e.steps;
    p.zero_grad();
    Ok(())
}

/// Loads and verifies a checkpoint: the tensor digest must match, and the
/// configured query encoder must reproduce every stored memory query.
pub fn load(dir: &Path) -> Result<Trainer> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let bytes = fs::read(dir.join(TENSORS))?;
    let found = sha256_hex(&bytes);
    if found != m.tensors_sha256 {
        return Err(Error::DigestMismatch {
            what: TENSORS.into(),
            expected: m.tensors_sha256,
            found,
        });
    }
    if m.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", m.version)));
    }
    if m.encoder != m.config.encoder() {
        return Err(Error::EncoderMismatch(format!(
            "checkpoint encoder {:?} differs from configured {:?}",
            m.encoder,
            m.config.encoder()
        )));
    }
    let mut t = Trainer::new(m.config.clone(), Vocab::from_tokens(m.vocab.clone()))?;
    let by_name: BTreeMap<&str, &TensorEntry> = m.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    // Task prompts and keys exist only for tasks seen so far.
    for e in &m.tensors {
        if let Some(id) = e.name.strip_prefix("prompt.task.") {
            let id: u32 = id.parse().map_err(|_| Error::Checkpoint(format!("bad tensor name {}", e.name)))?;
            t.pool.task.insert(id, Param::zeros(e.rows, e.cols));
        } else if let Some(id) = e.name.strip_prefix("key.task.") {
            let id: u32 = id.parse().map_err(|_| Error::Checkpoint(format!("bad tensor name {}", e.name)))?;
            t.pool.task_keys.insert(id, Param::zeros(e.rows, e.cols));
        }
    }
    let names: Vec<String> = named_params(&t).into_iter().map(|(n, _)| n).collect();
    let mut params: Vec<&mut Param<f32>> = t.model.params_mut();
    let pool = &mut t.pool;
    params.push(&mut pool.general);
    params.extend(pool.format.iter_mut());
    params.extend(pool.unseen.iter_mut());
    params.extend(pool.task.values_mut());
    params.extend(pool.meta.iter_mut());
    params.extend(pool.task_keys.values_mut());
    params.extend(pool.meta_keys.iter_mut());
    if params.len() != names.len() {
        return Err(Error::Checkpoint("parameter layout mismatch".into()));
    }
    for (name, p) in names.iter().zip(params) {
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        restore(p, e, &bytes)?;
    }
    let mut entries = Vec::with_capacity(m.memory.len());
    for (i, r) in m.memory.iter().enumerate() {
        let e = by_name
            .get(format!("memory.{i}.query").as_str())
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing query of memory sample {i}")))?;
        let mut off = e.offset as usize;
        let values = read_f32(&bytes, &mut off, e.cols)?;
        let fresh = t.encoder.encode(&r.sample.context, &r.sample.full_question())?;
        if fresh.values != values || fresh.source_hash != r.source_hash {
            return Err(Error::EncoderMismatch(format!(
                "memory sample {i} encodes differently under the configured encoder"
            )));
        }
        entries.push(MemoryEntry {
            sample: r.sample.clone(),
            query: QueryVector {
                values,
                source_hash: r.source_hash,
            },
            task_id: r.task_id,
        });
    }
    t.memory = MemoryBuffer { entries };
    t.learned = m.learned;
    t.stages = m.stages;
    t.global_step = m.global_step;
    t.boundaries = m.boundaries.into_iter().collect();
    Ok(t)
}
