//! Binary parameter files with a JSON sidecar manifest.
//!
//! Layout: magic `UINAVCK1`, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u32` rows, `u32` cols and `rows * cols`
//! little-endian `f32` values. The manifest lives next to it at
//! `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentError, AgentNet, ArgumentVocab};
use crate::nn::{NnError, ParamStore, Tensor};
use crate::referee::RefereeNet;
use crate::{D_ELEM, D_TEXT, N_MAX};

const MAGIC: &[u8; 8] = b"UINAVCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated or malformed: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint incompatible: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Agent,
    Referee,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<ArgumentVocab>,
    pub template_hash: String,
    pub n_max: usize,
    pub d_text: usize,
    pub d_elem: usize,
    pub param_count: usize,
    pub params_sha256: String,
}

pub fn encode_params(ps: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ps.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ps.len() as u32).to_le_bytes());
    for (_, name, t) in ps.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_params(buf: &[u8]) -> Result<ParamStore<f32>, CheckpointError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf, at: MAGIC.len() };
    let count = r.u32()?;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        if names.contains(&name) {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Malformed(format!("{name} shape overflows")))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        names.push(name);
        tensors.push(Tensor::from_vec(rows, cols, data)?);
    }
    if r.at != buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(ParamStore::from_parts(names, tensors))
}

/// SHA-256 of the binary encoding; equal hashes mean bit-identical params.
pub fn params_hash(ps: &ParamStore<f32>) -> String {
    hex::encode(Sha256::digest(encode_params(ps)))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn manifest_for(kind: ModelKind, ps: &ParamStore<f32>, vocab: Option<ArgumentVocab>, template_hash: &str) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        kind,
        vocab,
        template_hash: template_hash.to_owned(),
        n_max: N_MAX,
        d_text: D_TEXT,
        d_elem: D_ELEM,
        param_count: ps.count(),
        params_sha256: params_hash(ps),
    }
}

pub fn save(path: &Path, ps: &ParamStore<f32>, manifest: &Manifest) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_params(ps))?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, Manifest), CheckpointError> {
    let ps = decode_params(&fs::read(path)?)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Mismatch(format!("format version {}", manifest.format_version)));
    }
    if (manifest.n_max, manifest.d_text, manifest.d_elem) != (N_MAX, D_TEXT, D_ELEM) {
        return Err(CheckpointError::Mismatch(format!(
            "feature dimensions N_max={} D_text={} D_elem={}",
            manifest.n_max, manifest.d_text, manifest.d_elem
        )));
    }
    if manifest.params_sha256 != params_hash(&ps) {
        return Err(CheckpointError::Mismatch("parameter hash differs from manifest".into()));
    }
    Ok((ps, manifest))
}

fn check_expectations(m: &Manifest, kind: ModelKind, template_hash: Option<&str>) -> Result<(), CheckpointError> {
    if m.kind != kind {
        return Err(CheckpointError::Mismatch(format!("expected a {kind:?} checkpoint, found {:?}", m.kind)));
    }
    if let Some(h) = template_hash {
        if m.template_hash != h {
            return Err(CheckpointError::Mismatch("template registry hash differs".into()));
        }
    }
    Ok(())
}

pub fn save_agent(path: &Path, net: &AgentNet, template_hash: &str) -> Result<(), CheckpointError> {
    let m = manifest_for(ModelKind::Agent, &net.params, Some(net.vocab.clone()), template_hash);
    save(path, &net.params, &m)
}

/// Loads an agent, refusing when the manifest disagrees with the expected
/// template registry or argument vocabulary.
pub fn load_agent(
    path: &Path,
    template_hash: Option<&str>,
    vocab: Option<&ArgumentVocab>,
) -> Result<AgentNet, CheckpointError> {
    let (ps, m) = load(path)?;
    check_expectations(&m, ModelKind::Agent, template_hash)?;
    let stored = m
        .vocab
        .ok_or_else(|| CheckpointError::Mismatch("agent manifest lacks a vocabulary".into()))?;
    if let Some(v) = vocab {
        if *v != stored {
            return Err(CheckpointError::Mismatch("argument vocabulary differs".into()));
        }
    }
    AgentNet::from_params(stored, ps).map_err(|e| match e {
        AgentError::Nn(n) => CheckpointError::Mismatch(n.to_string()),
        other => other.into(),
    })
}

pub fn save_referee(path: &Path, net: &RefereeNet, template_hash: &str) -> Result<(), CheckpointError> {
    let m = manifest_for(ModelKind::Referee, &net.params, None, template_hash);
    save(path, &net.params, &m)
}

pub fn load_referee(path: &Path, template_hash: Option<&str>) -> Result<RefereeNet, CheckpointError> {
    let (ps, m) = load(path)?;
    check_expectations(&m, ModelKind::Referee, template_hash)?;
    RefereeNet::from_params(ps).map_err(|e| CheckpointError::Mismatch(e.to_string()))
}
