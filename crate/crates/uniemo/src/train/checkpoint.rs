//! Self-describing binary checkpoint container.
//!
//! Layout: magic `UEMO`, format version, the config snapshot as text, the
//! step counter and RNG state, then an array directory (name, shape, byte
//! length, SHA-256 digest) followed by raw little-endian `f64` payloads in
//! directory order. Every array is checksummed so corruption is an error
//! rather than silently wrong weights.

use crate::autograd::Array;
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::train::optim::AdamW;
use crate::{Error, Result};
use indexmap::IndexMap;
use ndarray::IxDyn;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"UEMO";

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Config snapshot in the flat text format.
    pub config_text: String,
    /// Completed steps.
    pub step: u64,
    /// Training generator state at the snapshot point.
    pub rng: RngState,
    /// Named arrays: parameters plus optimizer moments under
    /// `optim.m.<name>` / `optim.v.<name>`.
    pub arrays: IndexMap<String, Array>,
}

impl Checkpoint {
    /// Assemble a checkpoint from live training state.
    pub fn from_state(
        config_text: String,
        step: u64,
        rng: RngState,
        params: &ParamStore,
        optimizer: &AdamW,
    ) -> Checkpoint {
        let mut arrays = IndexMap::new();
        for (name, value) in params.iter() {
            arrays.insert(name.clone(), value.clone());
        }
        for (name, value) in &optimizer.m {
            arrays.insert(format!("optim.m.{name}"), value.clone());
        }
        for (name, value) in &optimizer.v {
            arrays.insert(format!("optim.v.{name}"), value.clone());
        }
        Checkpoint {
            config_text,
            step,
            rng,
            arrays,
        }
    }

    /// The model parameters (everything not under `optim.`).
    pub fn params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, value) in &self.arrays {
            if !name.starts_with("optim.") {
                store.insert(name.clone(), value.clone());
            }
        }
        store
    }

    /// Restore optimizer moments into a fresh optimizer shell.
    pub fn restore_moments(&self, optimizer: &mut AdamW) {
        for (name, value) in &self.arrays {
            if let Some(param) = name.strip_prefix("optim.m.") {
                optimizer.m.insert(param.to_string(), value.clone());
            } else if let Some(param) = name.strip_prefix("optim.v.") {
                optimizer.v.insert(param.to_string(), value.clone());
            }
        }
        optimizer.step = self.step;
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::invalid("checkpoint file truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }
}

/// Serialize and write a checkpoint.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let mut header = Vec::new();
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_bytes(&mut header, checkpoint.config_text.as_bytes());
    header.extend_from_slice(&checkpoint.step.to_le_bytes());
    header.extend_from_slice(&checkpoint.rng.seed);
    header.extend_from_slice(&checkpoint.rng.stream.to_le_bytes());
    header.extend_from_slice(&checkpoint.rng.word_pos.to_le_bytes());
    header.extend_from_slice(&(checkpoint.arrays.len() as u64).to_le_bytes());

    let mut payload = Vec::new();
    for (name, value) in &checkpoint.arrays {
        let mut bytes = Vec::with_capacity(value.len() * 8);
        for v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&bytes);
        write_bytes(&mut header, name.as_bytes());
        header.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
        for &d in value.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        header.extend_from_slice(&digest);
        payload.extend_from_slice(&bytes);
    }

    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&header).map_err(io_err(path))?;
    file.write_all(&payload).map_err(io_err(path))?;
    Ok(())
}

/// Read and verify a checkpoint: magic, version, and every array digest.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "checkpoint has format version {version} but this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let config_text = String::from_utf8(r.blob()?.to_vec())
        .map_err(|_| Error::invalid("checkpoint config snapshot is not UTF-8"))?;
    let step = r.u64()?;
    let rng = RngState {
        seed: r.take(32)?.try_into().unwrap(),
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    let count = r.u64()? as usize;
    let mut directory = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.blob()?.to_vec())
            .map_err(|_| Error::invalid("checkpoint array name is not UTF-8"))?;
        let ndim = r.u64()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let byte_len = r.u64()? as usize;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        directory.push((name, dims, byte_len, digest));
    }
    let mut arrays = IndexMap::new();
    for (name, dims, byte_len, digest) in directory {
        let raw = r.take(byte_len)?;
        let actual: [u8; 32] = Sha256::digest(raw).into();
        if actual != digest {
            return Err(Error::invalid(format!(
                "checksum mismatch in checkpoint array {name}"
            )));
        }
        let expected = dims.iter().product::<usize>() * 8;
        if byte_len != expected {
            return Err(Error::invalid(format!(
                "array {name} has {byte_len} bytes for shape {dims:?}"
            )));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = Array::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::invalid(format!("array {name}: {e}")))?;
        arrays.insert(name, array);
    }
    Ok(Checkpoint {
        config_text,
        step,
        rng,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use tempfile::tempdir;

    fn sample_checkpoint() -> Checkpoint {
        let mut generator = rng::seeded(5);
        let mut params = ParamStore::new();
        params.insert(
            "encoder.w",
            Array::from_shape_fn(IxDyn(&[3, 4]), |_| generator.gen_range(-1.0..1.0)),
        );
        params.insert(
            "head.bias",
            Array::from_shape_fn(IxDyn(&[4]), |_| generator.gen_range(-1.0..1.0)),
        );
        let mut optimizer = AdamW::new(0.9, 0.95, 0.05);
        optimizer.m.insert(
            "encoder.w".to_string(),
            Array::from_elem(IxDyn(&[3, 4]), 0.125),
        );
        optimizer.v.insert(
            "encoder.w".to_string(),
            Array::from_elem(IxDyn(&[3, 4]), 0.25),
        );
        let mut train_rng = rng::seeded(77);
        let _ = train_rng.gen_range(0..1000);
        Checkpoint::from_state(
            "seed = 42\n".to_string(),
            150,
            rng::capture(&train_rng),
            &params,
            &optimizer,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let checkpoint = sample_checkpoint();
        save_checkpoint(&checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint, loaded);
        // Bitwise equality, not just numeric closeness.
        for (name, value) in &checkpoint.arrays {
            let other = &loaded.arrays[name];
            for (a, b) in value.iter().zip(other.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rng_state_resumes_the_same_stream() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let checkpoint = sample_checkpoint();
        save_checkpoint(&checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut a = rng::restore(&checkpoint.rng);
        let mut b = rng::restore(&loaded.rng);
        for _ in 0..16 {
            assert_eq!(rng::next_seed(&mut a), rng::next_seed(&mut b));
        }
    }

    #[test]
    fn wrong_version_errors_naming_both_versions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version field follows the 4-byte magic
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "message was {err:?}");
        assert!(err.contains("version 1"), "message was {err:?}");
    }

    #[test]
    fn tampered_payload_is_a_checksum_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 5;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "message was {err:?}");
    }

    #[test]
    fn not_a_checkpoint_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        std::fs::write(&path, b"just some text").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("not a checkpoint"), "message was {err:?}");
    }

    #[test]
    fn params_and_moments_split_back_out() {
        let checkpoint = sample_checkpoint();
        let params = checkpoint.params();
        assert_eq!(params.len(), 2);
        assert!(params.contains("encoder.w"));
        assert!(params.contains("head.bias"));
        let mut optimizer = AdamW::new(0.9, 0.95, 0.05);
        checkpoint.restore_moments(&mut optimizer);
        assert_eq!(optimizer.step, 150);
        assert_eq!(optimizer.m["encoder.w"][[0, 0]], 0.125);
        assert_eq!(optimizer.v["encoder.w"][[1, 2]], 0.25);
    }
}
