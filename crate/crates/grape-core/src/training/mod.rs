//! Training loop: alternating discriminator / generator-side Adam updates,
//! periodic EMA of the embedding-side parameters, loss logging and
//! checkpointing.
//!
//! Determinism contract: each iteration draws all randomness from an RNG
//! seeded by `derive_seed(seed, iter)`, so a run interrupted at any
//! checkpoint and resumed produces the exact loss sequence of an
//! uninterrupted run.

mod adam;
mod checkpoint;
mod losses;
mod sampler;

pub use adam::{Adam, ADAM_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint, CKPT_MAGIC};
pub use losses::{d_loss, g_loss, g_loss_weighted, generate_fake, Grads, LossBreakdown};
pub use sampler::{sample_batch, Batch};

use crate::autodiff::Scalar;
use crate::dataset::Dataset;
use crate::model::{GrapeModel, ModelConfig};
use crate::nn::{ParamId, ParamSet};
use crate::{derive_seed, Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub r1_gamma: f64,
    pub lambda_cyc: f64,
    pub lambda_sty: f64,
    /// EMA applied every `ema_interval` iterations (0 disables).
    pub ema_interval: u64,
    pub ema_gamma: f64,
    pub seed: u64,
    /// Stratified batches (cycle genes) instead of uniform gene draws.
    pub stratified: bool,
    /// Checkpoint cadence in iterations (a final checkpoint is always
    /// written).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// CPU-tractable preset.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 64,
            total_iters: 5_000,
            lr: 1e-4,
            weight_decay: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            r1_gamma: 1.0,
            lambda_cyc: 1.0,
            lambda_sty: 1.0,
            ema_interval: 2_500,
            ema_gamma: 0.5,
            seed: 0,
            stratified: false,
            checkpoint_interval: 1_000,
        }
    }

    /// Full-scale preset matching the original experiment schedule.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 256,
            total_iters: 100_000,
            checkpoint_interval: 5_000,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0) || self.total_iters == 0 {
            return Err(Error::InvalidArgument("lr and total_iters must be positive".into()));
        }
        if self.lambda_cyc < 0.0 || self.lambda_sty < 0.0 || self.r1_gamma < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_gamma) {
            return Err(Error::InvalidArgument("ema_gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `ema' = gamma * ema + (1 - gamma) * live`, elementwise.
pub fn ema_update<F: Scalar>(ema: &mut ArrayD<F>, live: &ArrayD<F>, gamma: f64) -> Result<()> {
    if ema.shape() != live.shape() {
        return Err(Error::Shape(format!(
            "ema shape {:?} does not match live shape {:?}",
            ema.shape(),
            live.shape()
        )));
    }
    let g = F::from_f64(gamma);
    let one_minus = F::one() - g;
    ndarray::Zip::from(ema).and(live).for_each(|e, &l| {
        *e = g * *e + one_minus * l;
    });
    Ok(())
}

/// Moving average of the embedding matrix and mapping network, updated
/// every `ema_interval` iterations; never feeds back into training.
pub struct EmaState<F: Scalar> {
    pub ids: Vec<ParamId>,
    pub values: Vec<ArrayD<F>>,
}

impl<F: Scalar> EmaState<F> {
    pub fn new(ps: &ParamSet<F>, ids: Vec<ParamId>) -> Self {
        let values = ids.iter().map(|id| ps.value(*id).clone()).collect();
        EmaState { ids, values }
    }

    pub fn update(&mut self, ps: &ParamSet<F>, gamma: f64) -> Result<()> {
        for (id, ema) in self.ids.iter().zip(self.values.iter_mut()) {
            ema_update(ema, ps.value(*id), gamma)?;
        }
        Ok(())
    }

    /// Copy of `ps` with the averaged values substituted in.
    pub fn apply_to(&self, ps: &ParamSet<F>) -> ParamSet<F> {
        let mut out = ps.cast::<F>();
        for (id, ema) in self.ids.iter().zip(self.values.iter()) {
            *out.value_mut(*id) = ema.clone();
        }
        out
    }
}

pub struct Trainer {
    pub model: GrapeModel,
    pub ps: ParamSet<f32>,
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub iter: u64,
    pub opt_d: Adam<f32>,
    pub opt_g: Adam<f32>,
    pub ema: EmaState<f32>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let model = GrapeModel::new(model_cfg, &mut ps, cfg.seed)?;
        let mut ema_ids = model.params_embedding();
        ema_ids.extend(model.params_mapping());
        let ema = EmaState::new(&ps, ema_ids);
        Ok(Trainer {
            opt_d: Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay),
            opt_g: Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay),
            model,
            ps,
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            iter: 0,
            ema,
        })
    }

    /// Gather a pixel batch [n, C, H, W] from dataset cell indices.
    pub fn batch_pixels(ds: &Dataset, cells: &[usize]) -> ArrayD<f32> {
        let (_, c, h, w) = ds.pixels.dim();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[cells.len(), c, h, w]));
        for (bi, &ci) in cells.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), bi).assign(&ds.cell(ci));
        }
        out
    }

    /// One alternating step: discriminator update, then generator-side
    /// update, then (on schedule) the EMA snapshot.
    pub fn step(&mut self, ds: &Dataset) -> Result<LossBreakdown> {
        if ds.num_genes() != self.model_cfg.num_perturbations {
            return Err(Error::Dataset(format!(
                "dataset has {} genes but the model expects {}",
                ds.num_genes(),
                self.model_cfg.num_perturbations
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.iter));
        let batch = sample_batch(ds, self.cfg.batch_size, self.cfg.stratified, &mut rng)?;
        let x = Self::batch_pixels(ds, &batch.cells);

        let x_fake = generate_fake(&self.model, &self.ps, &x, &batch.z)?;
        let (adv_d, r1, grads_d) =
            d_loss(&self.model, &self.ps, &x, &batch.y, &x_fake, &batch.z, self.cfg.r1_gamma)?;
        self.opt_d.step(&mut self.ps, &grads_d);

        let (adv_g, cyc, sty, grads_g) =
            g_loss(&self.model, &self.ps, &x, &batch.z, self.cfg.lambda_cyc, self.cfg.lambda_sty)?;
        self.opt_g.step(&mut self.ps, &grads_g);

        self.iter += 1;
        if self.cfg.ema_interval > 0 && self.iter % self.cfg.ema_interval == 0 {
            self.ema.update(&self.ps, self.cfg.ema_gamma)?;
        }

        let losses = LossBreakdown { adv_d, adv_g, r1, cyc, sty };
        if !losses.is_finite() {
            return Err(Error::NonFinite(format!("losses diverged at iteration {}: {losses:?}", self.iter)));
        }
        for (_, e) in self.ps.iter() {
            if e.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter {} became non-finite at iteration {}",
                    e.name, self.iter
                )));
            }
        }
        Ok(losses)
    }
}

pub fn checkpoint_path(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{iter:07}.bin"))
}

pub fn loss_log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("loss_log.tsv")
}

/// Run the trainer until `cfg.total_iters`, appending per-iteration rows to
/// `loss_log.tsv` and writing checkpoints at the configured cadence plus a
/// final one. Returns checkpoint paths in order.
pub fn run(trainer: &mut Trainer, ds: &Dataset, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = loss_log_path(out_dir);
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    if trainer.iter == 0 {
        writeln!(log, "iter\tadv_d\tadv_g\tr1\tcyc\tsty").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut ckpts = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    while trainer.iter < trainer.cfg.total_iters {
        let losses = match trainer.step(ds) {
            Ok(l) => l,
            Err(Error::NonFinite(msg)) => {
                let at = last_good
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into());
                return Err(Error::NonFinite(format!("{msg}; last good checkpoint: {at}")));
            }
            Err(e) => return Err(e),
        };
        writeln!(
            log,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            trainer.iter, losses.adv_d, losses.adv_g, losses.r1, losses.cyc, losses.sty
        )
        .map_err(|e| Error::io(&log_path, e))?;
        let due = trainer.cfg.checkpoint_interval > 0
            && trainer.iter % trainer.cfg.checkpoint_interval == 0;
        if due || trainer.iter == trainer.cfg.total_iters {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let path = checkpoint_path(out_dir, trainer.iter);
            save_checkpoint(&path, trainer)?;
            last_good = Some(path.clone());
            ckpts.push(path);
        }
    }
    if ckpts.last().map(|p| p != &checkpoint_path(out_dir, trainer.iter)).unwrap_or(true) {
        let path = checkpoint_path(out_dir, trainer.iter);
        save_checkpoint(&path, trainer)?;
        ckpts.push(path);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(ckpts)
}
