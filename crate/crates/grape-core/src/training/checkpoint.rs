//! Versioned binary checkpoints: a JSON header (configs, iteration, array
//! metadata) followed by raw little-endian f32 payloads for parameters,
//! optimizer moments and EMA values. Raw bytes round-trip bit-exactly.

use super::{Adam, EmaState, TrainConfig, Trainer};
use crate::model::{GrapeModel, ModelConfig};
use crate::nn::ParamSet;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"GRCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    t: u64,
    /// ParamSet indices carrying first/second moment state.
    ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    iter: u64,
    params: Vec<ArrayMeta>,
    ema_ids: Vec<usize>,
    opt_d: OptMeta,
    opt_g: OptMeta,
}

fn write_array<W: Write>(w: &mut W, a: &ArrayD<f32>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(a.len() * 4);
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_array<R: Read>(r: &mut R, shape: &[usize]) -> std::io::Result<ArrayD<f32>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("checkpoint array shape"))
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let header = Header {
        model_cfg: trainer.model_cfg.clone(),
        train_cfg: trainer.cfg.clone(),
        iter: trainer.iter,
        params: trainer
            .ps
            .iter()
            .map(|(_, e)| ArrayMeta { name: e.name.clone(), shape: e.value.shape().to_vec() })
            .collect(),
        ema_ids: trainer.ema.ids.iter().map(|p| p.0).collect(),
        opt_d: OptMeta { t: trainer.opt_d.t(), ids: trainer.opt_d.state_ids() },
        opt_g: OptMeta { t: trainer.opt_g.t(), ids: trainer.opt_g.state_ids() },
    };
    let header_json = serde_json::to_vec(&header)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(io_err)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    for (_, e) in trainer.ps.iter() {
        write_array(&mut w, &e.value).map_err(io_err)?;
    }
    for opt in [&trainer.opt_d, &trainer.opt_g] {
        for id in opt.state_ids() {
            let (m, v) = opt.state(id);
            write_array(&mut w, m).map_err(io_err)?;
            write_array(&mut w, v).map_err(io_err)?;
        }
    }
    for ema in &trainer.ema.values {
        write_array(&mut w, ema).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let hlen = u32::from_le_bytes(u32buf) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&hjson)?;

    // rebuild structure deterministically, then overwrite values
    let mut ps = ParamSet::<f32>::new();
    let model = GrapeModel::new(&header.model_cfg, &mut ps, header.train_cfg.seed)?;
    if ps.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays but the configuration builds {}",
            header.params.len(),
            ps.len()
        )));
    }
    for (i, meta) in header.params.iter().enumerate() {
        let id = crate::nn::ParamId(i);
        if ps.name(id) != meta.name || ps.value(id).shape() != meta.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "checkpoint array {} ({:?}) does not match built parameter {} ({:?})",
                meta.name,
                meta.shape,
                ps.name(id),
                ps.value(id).shape()
            )));
        }
        *ps.value_mut(id) = read_array(&mut r, &meta.shape).map_err(io_err)?;
    }
    let cfg = &header.train_cfg;
    let mut opt_d = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay);
    let mut opt_g = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay);
    for (opt, meta) in [(&mut opt_d, &header.opt_d), (&mut opt_g, &header.opt_g)] {
        let mut entries = Vec::with_capacity(meta.ids.len());
        for &id in &meta.ids {
            let shape = header.params[id].shape.clone();
            let m = read_array(&mut r, &shape).map_err(io_err)?;
            let v = read_array(&mut r, &shape).map_err(io_err)?;
            entries.push((id, m, v));
        }
        opt.restore(meta.t, entries);
    }
    let ema_ids: Vec<crate::nn::ParamId> =
        header.ema_ids.iter().map(|&i| crate::nn::ParamId(i)).collect();
    let mut ema = EmaState::new(&ps, ema_ids);
    for (slot, &id) in ema.values.iter_mut().zip(header.ema_ids.iter()) {
        *slot = read_array(&mut r, &header.params[id].shape).map_err(io_err)?;
    }
    Ok(Trainer {
        model,
        ps,
        model_cfg: header.model_cfg,
        cfg: header.train_cfg,
        iter: header.iter,
        opt_d,
        opt_g,
        ema,
    })
}
