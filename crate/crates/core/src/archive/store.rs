//! On-disk archive layout.
//!
//! A directory holds `manifest.json` plus one `snap_<seq>.bin` per entry.
//! A blob is the magic `PDOSNAP\0`, a little-endian `u32` format version, a
//! `u32` header length, a JSON header, and then the header's arrays as raw
//! little-endian `f64` values in the order the header lists them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentSnapshot, Archive, ArchiveKind, ArchiveStore, MapElitesGrid, Origin};
use crate::nn::Topology;
use crate::normalizer::{Normalizer, RunningMeanStd};
use crate::optim::Adam;
use crate::policy::{ActionSpace, Policy, ValueFunction};
use crate::rl::AgentState;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PDOSNAP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl AdamHeader {
    fn of(a: &Adam) -> Self {
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        }
    }

    fn with(self, m: Vec<f64>, v: Vec<f64>) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
            m,
            v,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobHeader {
    fitness: f64,
    bd: Option<Vec<f64>>,
    origin: Origin,
    iteration: usize,
    learner_id: usize,
    seq: u64,
    policy_topology: Topology,
    action_space: ActionSpace,
    value_topology: Topology,
    policy_opt: AdamHeader,
    value_opt: AdamHeader,
    obs_count: f64,
    ret_count: f64,
    running_return: f64,
    gamma: f64,
    /// Lengths of the trailing arrays: policy params, value params, policy
    /// Adam m and v, value Adam m and v, obs mean and var, return mean and var.
    arrays: Vec<usize>,
}

pub fn encode_snapshot(s: &AgentSnapshot) -> Result<Vec<u8>> {
    let a = &s.agent;
    let arrays: [&[f64]; 10] = [
        a.policy.params(),
        a.value.params(),
        &a.policy_opt.m,
        &a.policy_opt.v,
        &a.value_opt.m,
        &a.value_opt.v,
        &a.normalizer.obs.mean,
        &a.normalizer.obs.var,
        &a.normalizer.ret.mean,
        &a.normalizer.ret.var,
    ];
    let header = BlobHeader {
        fitness: s.fitness,
        bd: s.bd.clone(),
        origin: s.origin,
        iteration: s.iteration,
        learner_id: s.learner_id,
        seq: s.seq,
        policy_topology: a.policy.topology().clone(),
        action_space: a.policy.action_space(),
        value_topology: a.value.topology().clone(),
        policy_opt: AdamHeader::of(&a.policy_opt),
        value_opt: AdamHeader::of(&a.value_opt),
        obs_count: a.normalizer.obs.count,
        ret_count: a.normalizer.ret.count,
        running_return: a.normalizer.running_return,
        gamma: a.normalizer.gamma,
        arrays: arrays.iter().map(|x| x.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * header.arrays.iter().sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for arr in arrays {
        for x in arr {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("truncated snapshot".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")))
}

pub fn decode_snapshot(mut bytes: &[u8]) -> Result<AgentSnapshot> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut bytes)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut bytes)? as usize;
    let h: BlobHeader = serde_json::from_slice(take(&mut bytes, len)?)?;
    if h.arrays.len() != 10 {
        return Err(Error::Format("expected 10 arrays".into()));
    }
    let mut arrays = Vec::with_capacity(10);
    for &n in &h.arrays {
        let raw = take(&mut bytes, n * 8)?;
        arrays.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<f64>>(),
        );
    }
    if !bytes.is_empty() {
        return Err(Error::Format("trailing bytes".into()));
    }
    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("ten arrays");
    let policy = Policy::from_parts(h.policy_topology, h.action_space, next())?;
    let value = ValueFunction::from_parts(h.value_topology, next())?;
    let policy_opt = h.policy_opt.with(next(), next());
    let value_opt = h.value_opt.with(next(), next());
    let obs = RunningMeanStd {
        mean: next(),
        var: next(),
        count: h.obs_count,
    };
    let ret = RunningMeanStd {
        mean: next(),
        var: next(),
        count: h.ret_count,
    };
    Ok(AgentSnapshot {
        agent: AgentState {
            policy,
            value,
            policy_opt,
            value_opt,
            normalizer: Normalizer {
                obs,
                ret,
                running_return: h.running_return,
                gamma: h.gamma,
            },
        },
        fitness: h.fitness,
        bd: h.bd,
        origin: h.origin,
        iteration: h.iteration,
        learner_id: h.learner_id,
        seq: h.seq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub cell: Option<[usize; 2]>,
    pub fitness: f64,
    pub bd: Option<Vec<f64>>,
    pub origin: Origin,
    pub iteration: usize,
    pub learner_id: usize,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: ArchiveKind,
    pub next_seq: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Writes the archive into `dir`, replacing any previous contents' manifest
/// and removing blobs that are no longer referenced.
pub fn save_archive(archive: &Archive, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let cell_of = |s: &AgentSnapshot| match &archive.store {
        ArchiveStore::Grid(g) => s.bd.as_deref().and_then(|bd| g.cell_index(bd).ok()),
        ArchiveStore::Queue(_) => None,
    };
    let mut entries = Vec::new();
    for s in archive.entries() {
        let file = format!("snap_{}.bin", s.seq);
        let path = dir.join(&file);
        if !path.exists() {
            let tmp = dir.join(format!("{file}.tmp"));
            fs::write(&tmp, encode_snapshot(s)?)?;
            fs::rename(&tmp, &path)?;
        }
        entries.push(ManifestEntry {
            file,
            cell: cell_of(s),
            fitness: s.fitness,
            bd: s.bd.clone(),
            origin: s.origin,
            iteration: s.iteration,
            learner_id: s.learner_id,
            seq: s.seq,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: archive.kind(),
        next_seq: archive.next_seq,
        entries,
    };
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join("manifest.json"))?;
    for e in fs::read_dir(dir)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.starts_with("snap_") && name.ends_with(".bin") && !manifest.entries.iter().any(|m| m.file == name) {
            fs::remove_file(dir.join(name))?;
        }
    }
    if let ArchiveStore::Grid(g) = &archive.store {
        fs::write(dir.join("heatmap.csv"), heatmap_csv(g))?;
    }
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

pub fn load_archive(dir: &Path) -> Result<Archive> {
    let m = load_manifest(dir)?;
    let mut archive = Archive::new(&m.kind);
    let mut snaps = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        snaps.push(decode_snapshot(&fs::read(dir.join(&e.file))?)?);
    }
    // Restore in age order with the stored stamps so ties resolve as before.
    snaps.sort_by_key(|s| s.seq);
    for s in snaps {
        let seq = s.seq;
        archive.next_seq = seq;
        archive.add(s)?;
    }
    archive.next_seq = m.next_seq;
    Ok(archive)
}

/// Grid fitness as CSV: line `i` holds the cells whose first descriptor
/// falls in bin `i`, one column per bin of the second. Empty cells read
/// `null`.
pub fn heatmap_csv(grid: &MapElitesGrid) -> String {
    let mut out = String::new();
    for i in 0..grid.shape[0] {
        let row: Vec<String> = (0..grid.shape[1])
            .map(|j| match grid.cell([i, j]) {
                Some(s) => format!("{}", s.fitness),
                None => "null".to_string(),
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
