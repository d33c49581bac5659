//! Binary checkpoints: `PRCK` magic, `u32` version, `u64` length and JSON
//! metadata, `u32` block count, then named blocks (`u32` name length, UTF-8
//! name, raw tensor). Block names are `param/`, `ema/`, `adam_m/` and
//! `adam_v/` followed by the parameter name.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::renderer::tensor_file::{read_tensor, write_tensor};

use super::config::Stage;
use super::optim::{Ema, OptimizerConfig, OptimizerState};

pub const MAGIC: [u8; 4] = *b"PRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: Stage,
    /// Steps completed in this stage.
    pub step: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub optimizer_step: u64,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub ema_updates: u64,
    /// Parameter names in store order.
    pub params: Vec<String>,
}

impl CheckpointMeta {
    pub fn is_complete(&self) -> bool {
        self.step >= self.total_steps
    }
}

/// Full training state of one stage at a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f64>,
    pub ema: Ema,
    pub opt: OptimizerState,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn put_block(w: &mut impl Write, name: &str, t: &Tensor<f64>) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, t)
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        put_u32(w, VERSION)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        let mut blocks: Vec<(String, &Tensor<f64>)> = Vec::new();
        for (id, name, t) in self.store.iter() {
            blocks.push((format!("param/{name}"), t));
            blocks.push((format!("ema/{name}"), &self.ema.shadow[id.0]));
            if let Some(m) = &self.opt.m[id.0] {
                blocks.push((format!("adam_m/{name}"), m));
            }
            if let Some(v) = &self.opt.v[id.0] {
                blocks.push((format!("adam_v/{name}"), v));
            }
        }
        put_u32(w, blocks.len() as u32)?;
        for (name, t) in blocks {
            put_block(w, &name, t)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Format("implausible metadata length".into()));
        }
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let n = get_u32(r)? as usize;
        let mut blocks = BTreeMap::new();
        for _ in 0..n {
            let name_len = get_u32(r)? as usize;
            if name_len > 4096 {
                return Err(Error::Format("implausible block name length".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            blocks.insert(name, read_tensor::<f64>(r)?);
        }
        let mut take = |kind: &str, name: &str| blocks.remove(&format!("{kind}/{name}"));
        let mut store = ParamStore::new();
        let mut shadow = Vec::new();
        let mut opt = OptimizerState::new(meta.optimizer, meta.params.len());
        opt.step = meta.optimizer_step;
        for (i, name) in meta.params.iter().enumerate() {
            let p = take("param", name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            shadow.push(take("ema", name).ok_or_else(|| Error::Format(format!("missing EMA for {name}")))?);
            opt.m[i] = take("adam_m", name);
            opt.v[i] = take("adam_v", name);
            store.add(name.clone(), p);
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Format(format!("unexpected block {extra}")));
        }
        let ema = Ema {
            decay: meta.ema_decay,
            warmup: meta.ema_warmup,
            updates: meta.ema_updates,
            shadow,
        };
        Ok(Self { meta, store, ema, opt })
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = BufWriter::new(std::fs::File::create(&tmp)?);
            self.write(&mut f)?;
            f.flush()?;
            f.get_ref().sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

/// Copies every parameter of `from` into the same-named slot of `into`.
pub fn copy_params(into: &mut ParamStore<f64>, from: &ParamStore<f64>) -> Result<()> {
    if into.len() != from.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            from.len(),
            into.len()
        )));
    }
    for (_, name, t) in from.iter() {
        let id = into
            .id(name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} not in model")))?;
        into.set(id, t.clone())?;
    }
    Ok(())
}
