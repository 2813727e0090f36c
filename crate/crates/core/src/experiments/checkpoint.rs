//! Single-file checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `M2FCKPT\0` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | config length `L` (`u64`) |
//! | L | experiment config as UTF-8 TOML |
//! | 8 | optimiser step (`u64`) |
//! | 32 + 8 + 16 | sampler state: ChaCha8 seed, stream (`u64`), word position (`u128`) |
//! | 8 | parameter count `P` (`u64`) |
//!
//! then `P` records of: name length (`u64`), name bytes, rank (`u64`),
//! one `u64` per dimension, and the values as `f64` in row-major order.

use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::M2Former;
use crate::tensor::{ParamStore, Rng, Tensor};

pub const MAGIC: &[u8; 8] = b"M2FCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub rng: Rng,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(config: &ExperimentConfig, step: u64, rng: &Rng, store: &ParamStore) -> Self {
        Self {
            config: config.clone(),
            step,
            rng: rng.clone(),
            params: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml()?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.usize()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = ExperimentConfig::from_toml(text)?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let mut rng = <Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let count = r.usize()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.usize()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let data = (0..numel)
                .map(|_| r.array().map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            step,
            rng,
            params,
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model and fills in the stored values. Names and shapes
    /// must match the config's architecture exactly.
    pub fn restore(&self) -> Result<(M2Former, ParamStore)> {
        let (model, mut store) = M2Former::new(self.config.model(), self.config.seed)?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, the config builds {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            store
                .set_value(id, value.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok((model, store))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng as _;

    #[test]
    fn bytes_round_trip() {
        let cfg = ExperimentConfig::micro();
        let (_, store) = M2Former::new(cfg.model(), cfg.seed).unwrap();
        let mut rng = seeded_rng(9);
        let _: u64 = rng.random();
        let ck = Checkpoint::capture(&cfg, 17, &rng, &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut bad = ck.to_bytes().unwrap();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let short = &ck.to_bytes().unwrap()[..100];
        assert!(Checkpoint::from_bytes(short).is_err());
    }

    #[test]
    fn restore_rejects_mismatched_architecture() {
        let cfg = ExperimentConfig::micro();
        let (_, store) = M2Former::new(cfg.model(), cfg.seed).unwrap();
        let mut ck = Checkpoint::capture(&cfg, 0, &seeded_rng(0), &store);
        ck.config.decoder_layers = 2;
        assert!(ck.restore().is_err());
    }
}
