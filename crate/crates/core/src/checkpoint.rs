//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `COTMDPCK` |
//! | 4     | format version (1) |
//! | 4     | architecture kind (0 policy, 1 value/classifier, 2 value/td) |
//! | 4×4   | window, hidden, vocab size, outputs |
//! | 8     | vocabulary fingerprint |
//! | 8     | init seed |
//! | 8     | parameter count |
//! | 8×n   | parameters as f64 |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::MlpShape;

const MAGIC: &[u8; 8] = b"COTMDPCK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 16 + 8 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Policy,
    ValueClassifier,
    ValueTd,
}

impl ArchKind {
    fn code(self) -> u32 {
        match self {
            ArchKind::Policy => 0,
            ArchKind::ValueClassifier => 1,
            ArchKind::ValueTd => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(ArchKind::Policy),
            1 => Some(ArchKind::ValueClassifier),
            2 => Some(ArchKind::ValueTd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub kind: ArchKind,
    pub shape: MlpShape,
    pub vocab_fingerprint: u64,
    pub seed: u64,
}

/// What a loader insists on. `None` dimensions are taken from the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expect {
    pub kind: ArchKind,
    pub vocab_fingerprint: u64,
    pub window: Option<usize>,
    pub hidden: Option<usize>,
}

pub fn encode(header: &CheckpointHeader, params: &[f64]) -> Vec<u8> {
    let s = header.shape;
    let mut out = Vec::with_capacity(HEADER_LEN + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header.kind.code().to_le_bytes());
    for d in [s.window, s.hidden, s.vocab_size(), s.outputs] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&header.vocab_fingerprint.to_le_bytes());
    out.extend_from_slice(&header.seed.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], expect: &Expect) -> std::result::Result<(CheckpointHeader, Vec<f64>), String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("file too short ({} bytes)", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let kind = ArchKind::from_code(u32_at(12)).ok_or("unknown architecture kind")?;
    if kind != expect.kind {
        return Err(format!("architecture {kind:?}, expected {:?}", expect.kind));
    }
    let (window, hidden, vocab, outputs) = (
        u32_at(16) as usize,
        u32_at(20) as usize,
        u32_at(24) as usize,
        u32_at(28) as usize,
    );
    let fingerprint = u64_at(32);
    if fingerprint != expect.vocab_fingerprint {
        return Err(format!(
            "vocabulary fingerprint {fingerprint:016x}, expected {:016x}",
            expect.vocab_fingerprint
        ));
    }
    if let Some(w) = expect.window.filter(|&w| w != window) {
        return Err(format!("context window {window}, expected {w}"));
    }
    if let Some(h) = expect.hidden.filter(|&h| h != hidden) {
        return Err(format!("hidden width {hidden}, expected {h}"));
    }
    let shape = MlpShape::new(vocab, window, hidden, outputs);
    let count = u64_at(48) as usize;
    if count != shape.param_count() {
        return Err(format!(
            "{count} parameters, architecture implies {}",
            shape.param_count()
        ));
    }
    if bytes.len() != HEADER_LEN + count * 8 {
        return Err(format!("length {} does not match parameter count", bytes.len()));
    }
    let params: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err("non-finite parameter".into());
    }
    Ok((
        CheckpointHeader {
            kind,
            shape,
            vocab_fingerprint: fingerprint,
            seed: u64_at(40),
        },
        params,
    ))
}

pub fn write(path: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    let bytes = encode(header, params);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path, expect: &Expect) -> Result<(CheckpointHeader, Vec<f64>)> {
    let bytes = fs::read(path)?;
    decode(&bytes, expect).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
