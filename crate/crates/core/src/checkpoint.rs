//! Checkpoint persistence.
//!
//! Binary layout (little-endian): magic `TAVG`, version `u32`, kind `u8`
//! (0 = online, 1 = sma), 3 pad bytes, iteration `u64`, param_count `u64`,
//! then `param_count` f64 values. 28 header bytes plus 8 per parameter.
//!
//! Writes go through a temp file in the same directory followed by a rename,
//! so a concurrently reading sweep worker never sees a partial file. The
//! format does not store `run_id`; callers re-attach it from context (for
//! sweep output, the directory layout).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TAVG";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_HEADER_LEN: usize = 28;

/// Which model a checkpoint holds: the optimizer's iterate or the running
/// average of iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Online,
    Sma,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Online => "online",
            CheckpointKind::Sma => "sma",
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            CheckpointKind::Online => 0,
            CheckpointKind::Sma => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CheckpointKind::Online),
            1 => Ok(CheckpointKind::Sma),
            other => Err(Error::Format(format!("unknown checkpoint kind byte {other}"))),
        }
    }
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_id: String,
    pub iteration: u64,
    pub kind: CheckpointKind,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(
        run_id: impl Into<String>,
        iteration: u64,
        kind: CheckpointKind,
        params: ParamVector,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            iteration,
            kind,
            params,
        }
    }
}

/// Write `bytes` to `path` atomically (temp file + rename).
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_file_name(format!(
        "{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into())
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Serialize a checkpoint to its binary file. Refuses non-finite parameters
/// before touching the filesystem.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if !ckpt.params.is_finite() {
        return Err(Error::NonFinite(format!(
            "checkpoint '{}' at iteration {}",
            ckpt.run_id, ckpt.iteration
        )));
    }
    let n = ckpt.params.len();
    let mut buf = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * n);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(ckpt.kind.to_byte());
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&ckpt.iteration.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in ckpt.params.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

/// Read a checkpoint back. `run_id` is left empty; the format does not carry it.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} bytes, need {CHECKPOINT_HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version > CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let kind = CheckpointKind::from_byte(bytes[8])?;
    let iteration = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let expected = CHECKPOINT_HEADER_LEN + 8 * count;
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: bytes.len(),
        });
    }
    let values = bytes[CHECKPOINT_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    Ok(Checkpoint {
        run_id: String::new(),
        iteration,
        kind,
        params: ParamVector::new(values)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(values: Vec<f64>) -> Checkpoint {
        Checkpoint::new("run", 42, CheckpointKind::Sma, ParamVector::new(values).unwrap())
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = ckpt(vec![1.0, -2.5, 0.0]);
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.iteration, 42);
        assert_eq!(back.kind, CheckpointKind::Sma);
    }

    #[test]
    fn file_length_is_header_plus_payload() {
        // Field widths: magic 4 + version 4 + kind 1 + pad 3 + iteration 8
        // + count 8 = 28, then 8 bytes per value.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("len.ckpt");
        let c = ckpt(vec![0.25; 7]);
        save_checkpoint(&c, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, CHECKPOINT_HEADER_LEN + 8 * 7);
    }

    #[test]
    fn nan_refused_and_no_file_created() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ckpt");
        let mut c = ckpt(vec![1.0, 2.0]);
        c.params.as_mut_slice()[1] = f64::NAN;
        let err = save_checkpoint(&c, &path).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(!path.exists());
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt(vec![1.0]), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&ckpt(vec![1.0, 2.0, 3.0]), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::PayloadLength { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&ckpt(vec![1.0]), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
