//! On-disk formats: offline datasets, MDPs and network checkpoints.
//!
//! # Dataset file (`version 1`)
//!
//! Little-endian throughout.
//!
//! | offset | size       | field                                        |
//! |--------|------------|----------------------------------------------|
//! | 0      | 8          | magic `BCRLDATA`                              |
//! | 8      | 4          | format version (`u32`)                        |
//! | 12     | 4          | `|S|` (`u32`)                                 |
//! | 16     | 4          | `|A|` (`u32`)                                 |
//! | 20     | 4          | reserved, zero                                |
//! | 24     | 8          | record count `N` (`u64`)                      |
//! | 32     | 8          | source seed (`u64`)                           |
//! | 40     | 8          | checksum of the generating MDP (`u64`)        |
//! | 48     | 8·|S||A|   | sampling distribution `ν[s][a]` (`f64`)       |
//! | …      | 24·N       | records `(s: u32, a: u32, r: f64, s': u32, 0: u32)` |
//! | end    | 32         | SHA-256 of every preceding byte               |
//!
//! A plain-text sidecar `<file>.meta` repeats the header fields and the
//! digest in `key = value` form.
//!
//! # Checkpoint file (`version 1`)
//!
//! Two text lines, `bcrl-checkpoint v1` and the architecture descriptor,
//! then the parameter count (`u64`), the parameters (`f64`) and a SHA-256
//! trailer over everything before it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bcrl_core::mdp::{FiniteMdp, OfflineDataset, StateActionDist, Transition};
use bcrl_core::net::{Architecture, TrainableNet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"BCRLDATA";
pub const DATASET_VERSION: u32 = 1;
pub const RECORD_BYTES: usize = 24;
const HEADER_BYTES: usize = 48;
const DIGEST_BYTES: usize = 32;
const CHECKPOINT_MAGIC: &str = "bcrl-checkpoint v1";

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Sidecar metadata for a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub num_states: u32,
    pub num_actions: u32,
    pub records: u64,
    pub source_seed: u64,
    pub mdp_checksum: String,
    pub sha256: String,
}

/// A dataset read back from disk together with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub data: OfflineDataset,
    pub num_states: usize,
    pub num_actions: usize,
    pub mdp_checksum: u64,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

pub fn encode_dataset(data: &OfflineDataset, mdp: &FiniteMdp) -> Result<Vec<u8>> {
    data.validate(mdp)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut out = Vec::with_capacity(HEADER_BYTES + 8 * ns * na + RECORD_BYTES * data.len() + DIGEST_BYTES);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ns as u32).to_le_bytes());
    out.extend_from_slice(&(na as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&data.source_seed().to_le_bytes());
    out.extend_from_slice(&mdp.checksum().to_le_bytes());
    for w in data.source_dist().weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for t in data.transitions() {
        out.extend_from_slice(&(t.state as u32).to_le_bytes());
        out.extend_from_slice(&(t.action as u32).to_le_bytes());
        out.extend_from_slice(&t.reward.to_le_bytes());
        out.extend_from_slice(&(t.next_state as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
    }
    let d = digest(&out);
    out.extend_from_slice(&d);
    Ok(out)
}

/// Writes the dataset file and its `.meta` sidecar. The tuples must be
/// consistent with `mdp`.
pub fn save_dataset(path: &Path, data: &OfflineDataset, mdp: &FiniteMdp) -> Result<DatasetMeta> {
    let bytes = encode_dataset(data, mdp)?;
    let meta = DatasetMeta {
        format_version: DATASET_VERSION,
        num_states: mdp.num_states() as u32,
        num_actions: mdp.num_actions() as u32,
        records: data.len() as u64,
        source_seed: data.source_seed(),
        mdp_checksum: format!("{:016x}", mdp.checksum()),
        sha256: hex::encode(&bytes[bytes.len() - DIGEST_BYTES..]),
    };
    write_atomic(path, &bytes)?;
    let text = toml::to_string(&meta).map_err(|e| HarnessError::format(meta_path(path), e.to_string()))?;
    write_atomic(&meta_path(path), text.as_bytes())?;
    Ok(meta)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Parses a dataset file image. Nothing is returned unless the whole file
/// is well formed.
pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<StoredDataset> {
    let bad = |reason: String| HarnessError::format(path, reason);
    if bytes.len() < HEADER_BYTES + DIGEST_BYTES {
        return Err(bad(format!("truncated: {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(bad("not a dataset file (bad magic)".into()));
    }
    let mut c = Cursor { bytes, pos: 8 };
    let version = c.u32();
    if version != DATASET_VERSION {
        return Err(bad(format!("format version {version}, expected {DATASET_VERSION}")));
    }
    let ns = c.u32() as usize;
    let na = c.u32() as usize;
    let reserved = c.u32();
    let n = c.u64();
    let source_seed = c.u64();
    let mdp_checksum = c.u64();
    if reserved != 0 || ns == 0 || na == 0 {
        return Err(bad("corrupt header".into()));
    }
    let expected = (ns as u128 * na as u128 * 8) + (n as u128 * RECORD_BYTES as u128) + (HEADER_BYTES + DIGEST_BYTES) as u128;
    if (bytes.len() as u128) < expected {
        return Err(bad(format!("truncated: {} bytes, header declares {expected}", bytes.len())));
    }
    if (bytes.len() as u128) > expected {
        return Err(bad(format!("{} trailing bytes", bytes.len() as u128 - expected)));
    }
    let body = bytes.len() - DIGEST_BYTES;
    if digest(&bytes[..body])[..] != bytes[body..] {
        return Err(bad("SHA-256 mismatch".into()));
    }
    let weights: Vec<f64> = (0..ns * na).map(|_| c.f64()).collect();
    let dist = StateActionDist::new(ns, na, weights)?;
    let mut transitions = Vec::with_capacity(n as usize);
    for i in 0..n {
        let (state, action, reward, next_state, pad) = (c.u32() as usize, c.u32() as usize, c.f64(), c.u32() as usize, c.u32());
        if state >= ns || action >= na || next_state >= ns || pad != 0 || !reward.is_finite() {
            return Err(bad(format!("record {i} is out of range")));
        }
        transitions.push(Transition { state, action, reward, next_state });
    }
    Ok(StoredDataset { data: OfflineDataset::new(transitions, source_seed, dist), num_states: ns, num_actions: na, mdp_checksum })
}

pub fn load_dataset(path: &Path) -> Result<StoredDataset> {
    decode_dataset(path, &read(path)?)
}

/// [`load_dataset`], then checks the file against `mdp`: shapes, the MDP
/// checksum and every reward.
pub fn load_dataset_for(path: &Path, mdp: &FiniteMdp) -> Result<OfflineDataset> {
    let stored = load_dataset(path)?;
    if stored.mdp_checksum != mdp.checksum() {
        return Err(HarnessError::format(
            path,
            format!("generated from MDP {:016x}, not {:016x}", stored.mdp_checksum, mdp.checksum()),
        ));
    }
    stored.data.validate(mdp)?;
    Ok(stored.data)
}

pub fn load_dataset_meta(path: &Path) -> Result<DatasetMeta> {
    let p = meta_path(path);
    let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
    toml::from_str(&text).map_err(|e| HarnessError::format(&p, e.to_string()))
}

/// Text form of a [`FiniteMdp`]. Floats are written in shortest
/// round-trip decimal, so a save/load cycle is bit exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub initial: Vec<f64>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
}

impl MdpDocument {
    pub fn from_mdp(mdp: &FiniteMdp) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        Self {
            states: ns,
            actions: na,
            gamma: mdp.gamma(),
            initial: mdp.initial_dist().to_vec(),
            reward: (0..ns).map(|s| (0..na).map(|a| mdp.reward(s, a)).collect()).collect(),
            transition: (0..ns).map(|s| (0..na).map(|a| mdp.transition_row(s, a).to_vec()).collect()).collect(),
        }
    }

    pub fn to_mdp(&self) -> Result<FiniteMdp> {
        let (ns, na) = (self.states, self.actions);
        let mut shape = Vec::new();
        if self.reward.len() != ns || self.reward.iter().any(|r| r.len() != na) {
            shape.push(format!("reward must be {ns}x{na}"));
        }
        if self.transition.len() != ns || self.transition.iter().any(|r| r.len() != na || r.iter().any(|p| p.len() != ns)) {
            shape.push(format!("transition must be {ns}x{na}x{ns}"));
        }
        if !shape.is_empty() {
            return Err(HarnessError::Validation(shape));
        }
        let transition = self.transition.iter().flatten().flatten().copied().collect();
        let reward = self.reward.iter().flatten().copied().collect();
        Ok(FiniteMdp::new(ns, na, transition, reward, self.gamma, self.initial.clone())?)
    }
}

pub fn save_mdp(path: &Path, mdp: &FiniteMdp) -> Result<()> {
    let text = toml::to_string(&MdpDocument::from_mdp(mdp)).map_err(|e| HarnessError::format(path, e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn load_mdp(path: &Path) -> Result<FiniteMdp> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let doc: MdpDocument = toml::from_str(&text).map_err(|e| HarnessError::format(path, e.to_string()))?;
    doc.to_mdp()
}

pub fn encode_checkpoint(net: &TrainableNet) -> Vec<u8> {
    let mut out = format!("{CHECKPOINT_MAGIC}\n{}\n", net.architecture().descriptor()).into_bytes();
    out.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let d = digest(&out);
    out.extend_from_slice(&d);
    out
}

pub fn save_checkpoint(path: &Path, net: &TrainableNet) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net))
}

/// Loads parameters for `arch`; a file written for any other architecture
/// is rejected.
pub fn load_checkpoint(path: &Path, arch: &Architecture) -> Result<TrainableNet> {
    let bytes = read(path)?;
    let bad = |reason: String| HarnessError::format(path, reason);
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let (Some(magic), Some(descriptor), Some(rest)) = (lines.next(), lines.next(), lines.next()) else {
        return Err(bad("truncated checkpoint header".into()));
    };
    if magic != CHECKPOINT_MAGIC.as_bytes() {
        return Err(bad("not a checkpoint (bad magic or version)".into()));
    }
    let found = String::from_utf8_lossy(descriptor);
    if found != arch.descriptor() {
        return Err(bad(format!("descriptor mismatch: file has `{found}`, expected `{}`", arch.descriptor())));
    }
    if rest.len() < 8 + DIGEST_BYTES {
        return Err(bad("truncated checkpoint body".into()));
    }
    let count = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
    if count != arch.num_params() as u64 || rest.len() as u64 != 8 + 8 * count + DIGEST_BYTES as u64 {
        return Err(bad(format!("parameter block of {} bytes does not hold {} parameters", rest.len(), arch.num_params())));
    }
    let body = bytes.len() - DIGEST_BYTES;
    if digest(&bytes[..body])[..] != bytes[body..] {
        return Err(bad("SHA-256 mismatch".into()));
    }
    let params = rest[8..rest.len() - DIGEST_BYTES]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(TrainableNet::from_params(arch.clone(), params)?)
}
