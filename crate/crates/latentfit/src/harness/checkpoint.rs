//! Versioned binary checkpoints.
//!
//! Layout: an 8-byte magic string, a little-endian u32 format version, a
//! length-prefixed UTF-8 topology descriptor, then the flat f64 parameter
//! vector in little-endian order. Everything is fixed-width or
//! length-prefixed, so save → load → save reproduces the file byte for
//! byte — the property the determinism checks lean on.

use std::path::Path;

use super::HarnessError;
use crate::numkit::Vector;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LFITCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained artifact: a topology descriptor identifying what the
/// parameters mean, and the parameters themselves.
///
/// The descriptor is a single human-readable line (e.g.
/// `ddm d=2 hidden=64,64 act=tanh schedule=linear:0.995:0.85:50`); loaders
/// compare it verbatim against the topology they expect.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub params: Vector,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let desc = ckpt.descriptor.as_bytes();
    let mut out = Vec::with_capacity(8 + 4 + 4 + desc.len() + 8 + 8 * ckpt.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc);
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for v in ckpt.params.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    std::fs::write(path, checkpoint_bytes(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| {
        HarnessError::Config(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    parse_checkpoint(&bytes)
        .map_err(|msg| HarnessError::Config(format!("{}: {msg}", path.display())))
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, String> {
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], String> {
        if *off + n > bytes.len() {
            return Err("truncated checkpoint".into());
        }
        let slice = &bytes[*off..*off + n];
        *off += n;
        Ok(slice)
    };
    if take(&mut off, 8)? != CHECKPOINT_MAGIC {
        return Err("bad magic: not a checkpoint file".into());
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        ));
    }
    let desc_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let descriptor = String::from_utf8(take(&mut off, desc_len)?.to_vec())
        .map_err(|_| "descriptor is not UTF-8".to_string())?;
    let n = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let mut params = Vector::zeros(n);
    for i in 0..n {
        params[i] = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    }
    if off != bytes.len() {
        return Err("trailing bytes after parameter vector".into());
    }
    Ok(Checkpoint { descriptor, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = Checkpoint {
            descriptor: "gmm k=2 d=2".into(),
            params: Vector::from_column_slice(&[1.0, -2.5, 0.0, f64::MIN_POSITIVE, 1e300]),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&path, &loaded).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = Checkpoint {
            descriptor: "vi linear_gaussian d=3 k=1 n=4".into(),
            params: Vector::from_column_slice(&[0.1, 0.2]),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn empty_parameter_vector_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = Checkpoint {
            descriptor: "x".into(),
            params: Vector::zeros(0),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }
}
