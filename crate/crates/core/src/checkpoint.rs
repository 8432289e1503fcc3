//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field            | encoding                                  |
//! |------------------|-------------------------------------------|
//! | magic            | `MMBCKPT\0`                               |
//! | version          | u32                                       |
//! | epoch            | u64                                       |
//! | config echo      | u32 length + UTF-8 TOML                   |
//! | parameter count  | u32                                       |
//! | each parameter   | name (u32 length + UTF-8), u32 rank, u64 per dimension, f64 values |
//! | checksum         | u32 CRC-32 of everything above            |

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub config: RunConfig,
    pub epoch: u64,
}

impl Checkpoint {
    /// Rebuilds the model described by the stored configuration.
    pub fn model(&self) -> Result<Model> {
        Model::from_store(self.config.train.architecture(&self.config.data), self.store.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.epoch);
        w.string(&self.config.to_toml());
        w.u32(self.store.len() as u32);
        for p in self.store.iter() {
            w.string(&p.name);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes)?;
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let epoch = r.u64()?;
        let config = RunConfig::from_toml(&r.string()?)
            .map_err(|e| Error::format("checkpoint", format!("config echo: {e}")))?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", "parameter shape overflows"))?;
            let data = r.f64s(len)?;
            let value = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            named.push((name, value));
        }
        r.finish()?;
        let store = ParamStore::new(named).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(Self { store, config, epoch })
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: &RunConfig, epoch: u64) -> Result<()> {
    let ck = Checkpoint {
        store: store.clone(),
        config: config.clone(),
        epoch,
    };
    fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
