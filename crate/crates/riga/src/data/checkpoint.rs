//! Model checkpoints: a small little-endian binary container holding
//! training metadata and every named parameter tensor in double precision.
//!
//! Layout: `"RIGA"` magic, u32 format version, u64 seed, u64 step count,
//! u64 config hash, u64 tensor count, then per tensor a u32 name length,
//! the UTF-8 name, a u32 rank, u64 dims and the f64 payload. Everything is
//! little-endian and the round trip is bit-exact.

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"RIGA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub seed: u64,
    pub steps: u64,
    pub config_hash: u64,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load_checkpoint_bytes(&std::fs::read(path)?)
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + ckpt.params.total_numel() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.steps.to_le_bytes());
    out.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for (name, value, _) in ckpt.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Cursor over the byte stream; every read checks the remaining length
/// before touching or allocating anything, so corrupt or truncated input
/// fails with an offset instead of panicking or overallocating.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::parse(
                self.pos,
                format!("truncated {what}: need {n} bytes, {available} left"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let seed = r.u64("seed")?;
    let steps = r.u64("step count")?;
    let config_hash = r.u64("config hash")?;
    let count = r.u64("tensor count")?;

    let mut params = ParamStore::new();
    for i in 0..count {
        let name_start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::parse(name_start, "tensor name is not valid UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::parse(
                r.pos,
                format!("tensor {name:?} has unsupported rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::parse(r.pos, format!("tensor {name:?} dimensions overflow"))
            })?;
            shape.push(d);
        }
        // Length check before allocation guards against huge declared dims.
        let payload_start = r.pos;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| {
            Error::parse(payload_start, format!("tensor {name:?} payload overflows"))
        })?, "tensor payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| {
            Error::parse(payload_start, format!("tensor {name:?} (record {i}): {e}"))
        })?;
        params.insert(&name, tensor).map_err(|_| {
            Error::parse(name_start, format!("duplicate tensor name {name:?}"))
        })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            r.pos,
            format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        seed,
        steps,
        config_hash,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut params = ParamStore::new();
        // Includes subnormal-scale, huge and negative-zero values to make
        // the bit-exactness claim meaningful.
        let mut vals: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        vals[0] = 1e-310;
        vals[1] = -0.0;
        vals[2] = 1.7e308;
        params
            .insert("layer.weight", Tensor::matrix(3, 4, vals).unwrap())
            .unwrap();
        params
            .insert("layer.bias", Tensor::vector(vec![0.25, -0.5, 4.0e-20]))
            .unwrap();
        params.insert("alpha", Tensor::scalar(1.0)).unwrap();
        Checkpoint {
            seed: 77,
            steps: 1234,
            config_hash: 0xdeadbeefcafef00d,
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let back = load_checkpoint_bytes(&checkpoint_to_bytes(&ckpt)).unwrap();
        assert_eq!(back.seed, ckpt.seed);
        assert_eq!(back.steps, ckpt.steps);
        assert_eq!(back.config_hash, ckpt.config_hash);
        assert_eq!(back.params.len(), ckpt.params.len());
        for ((n1, v1, _), (n2, v2, _)) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.shape(), v2.shape());
            for (a, b) in v1.data().iter().zip(v2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.get("alpha").unwrap().data(), &[1.0]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = checkpoint_to_bytes(&sample_checkpoint());
        bytes[0] = b'X';
        match load_checkpoint_bytes(&bytes).unwrap_err() {
            Error::BadMagic { found, .. } => assert_eq!(&found, b"XIGA"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = checkpoint_to_bytes(&sample_checkpoint());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        match load_checkpoint_bytes(&bytes).unwrap_err() {
            Error::VersionMismatch { found, supported } => {
                assert_eq!(found, 2);
                assert_eq!(supported, VERSION);
            }
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn any_truncation_errors_without_panic() {
        let bytes = checkpoint_to_bytes(&sample_checkpoint());
        for len in 0..bytes.len() {
            assert!(load_checkpoint_bytes(&bytes[..len]).is_err(), "len {len}");
        }
        assert!(load_checkpoint_bytes(&bytes).is_ok());
    }

    #[test]
    fn huge_declared_sizes_do_not_allocate() {
        // Header claiming one tensor with a colossal dimension; the reader
        // must fail on the length check, not attempt the allocation.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 24]);
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        match load_checkpoint_bytes(&bytes).unwrap_err() {
            Error::Parse { .. } => {}
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = checkpoint_to_bytes(&sample_checkpoint());
        bytes.push(0);
        assert!(load_checkpoint_bytes(&bytes).is_err());
    }

    #[test]
    fn non_finite_payload_is_a_parse_error() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![1.0])).unwrap();
        let ckpt = Checkpoint {
            params: store,
            ..Checkpoint::default()
        };
        let mut bytes = checkpoint_to_bytes(&ckpt);
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        match load_checkpoint_bytes(&bytes).unwrap_err() {
            Error::Parse { msg, .. } => assert!(msg.contains("\"p\""), "{msg}"),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0)).unwrap();
        let ckpt = Checkpoint {
            params: store,
            ..Checkpoint::default()
        };
        let mut bytes = checkpoint_to_bytes(&ckpt);
        // Duplicate the single tensor record and bump the count to 2.
        let record = bytes[44..].to_vec();
        bytes.extend_from_slice(&record);
        bytes[36..44].copy_from_slice(&2u64.to_le_bytes());
        assert!(load_checkpoint_bytes(&bytes).is_err());
    }
}
