//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `AFSSLCKP` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `h` (`u64`) |
//! | h | UTF-8 JSON [`CheckpointHeader`] |
//! | rest | `f64` payload; each tensor's values in row-major order at its recorded offset |
//!
//! Files are written to a temporary sibling and renamed into place, so a failed write never
//! clobbers the previous checkpoint.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::NetState;

pub const MAGIC: &[u8; 8] = b"AFSSLCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub method: String,
    /// Epochs completed.
    pub epoch: usize,
    pub global_step: usize,
    pub ema_tau: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub online: NetState,
    pub target: Option<NetState>,
    pub momentum: Vec<Tensor>,
}

const GROUPS: [&str; 5] = ["param", "buffer", "target.param", "target.buffer", "momentum"];

fn collect(snap: &Snapshot) -> Vec<(&'static str, String, Tensor)> {
    let mut out = Vec::new();
    let push_state = |state: &NetState, pg: &'static str, bg: &'static str, out: &mut Vec<(&'static str, String, Tensor)>| {
        for e in state.params.entries() {
            out.push((pg, e.name.clone(), e.value.clone()));
        }
        for (name, v) in state.buffers.entries() {
            out.push((bg, name.clone(), v.clone().into_dyn()));
        }
    };
    push_state(&snap.online, GROUPS[0], GROUPS[1], &mut out);
    if let Some(t) = &snap.target {
        push_state(t, GROUPS[2], GROUPS[3], &mut out);
    }
    for (e, m) in snap.online.params.entries().iter().zip(&snap.momentum) {
        out.push((GROUPS[4], e.name.clone(), m.clone()));
    }
    out
}

pub fn save(path: &Path, header: &CheckpointHeader, snap: &Snapshot) -> Result<()> {
    let tensors = collect(snap);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (group, name, t) in &tensors {
        entries.push(TensorEntry { group: group.to_string(), name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.len();
    }
    let header = CheckpointHeader { tensors: entries, ..header.clone() };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + offset * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, t) in &tensors {
        for v in t.as_standard_layout().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads the header and payload without interpreting it.
pub fn read(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let payload = &bytes[20 + hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let needed = header.tensors.iter().map(|t| t.offset + t.shape.iter().product::<usize>()).max().unwrap_or(0);
    if values.len() < needed {
        return Err(bad("truncated payload"));
    }
    Ok((header, values))
}

/// Loads into `template`, which fixes the expected names and shapes.
pub fn load(path: &Path, template: &Snapshot) -> Result<(CheckpointHeader, Snapshot)> {
    let (header, values) = read(path)?;
    let expected = collect(template);
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!("{} holds {} tensors, model expects {}", path.display(), header.tensors.len(), expected.len())));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((group, name, t), entry) in expected.iter().zip(&header.tensors) {
        if entry.group != *group || entry.name != *name || entry.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: file has {}:{} {:?}, model expects {group}:{name} {:?}",
                entry.group,
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let n = t.len();
        loaded.push(Tensor::from_shape_vec(IxDyn(&entry.shape), values[entry.offset..entry.offset + n].to_vec()).expect("shape checked"));
    }
    let mut snap = template.clone();
    let mut it = loaded.into_iter();
    let fill = |state: &mut NetState, it: &mut std::vec::IntoIter<Tensor>| {
        for e in state.params.entries_mut() {
            e.value = it.next().unwrap();
        }
        for (_, v) in state.buffers.entries_mut() {
            *v = it.next().unwrap().into_dimensionality::<ndarray::Ix1>().map(Array1::from).unwrap();
        }
    };
    fill(&mut snap.online, &mut it);
    if let Some(t) = snap.target.as_mut() {
        fill(t, &mut it);
    }
    for m in snap.momentum.iter_mut() {
        *m = it.next().unwrap();
    }
    Ok((header, snap))
}
