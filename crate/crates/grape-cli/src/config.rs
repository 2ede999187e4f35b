//! Configuration layering: preset defaults, then an optional TOML file,
//! then individual CLI flags. The effective configuration is snapshotted
//! into every experiment manifest.

use anyhow::{bail, Context, Result};
use grape_core::model::{AttentionConfig, ModelConfig};
use grape_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Synthetic-dataset parameters (vocabulary shape + rendering).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    /// Complex sizes; one complex per entry, gene count per complex.
    pub complex_sizes: Vec<usize>,
    pub cells_per_gene: usize,
    pub num_batches: usize,
    pub img_size: usize,
    pub channels: usize,
    pub batch_confounder: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Effective {
    pub preset: String,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Effective {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Effective {
                preset: "desk".into(),
                synth: SynthConfig {
                    complex_sizes: vec![3; 4],
                    cells_per_gene: 200,
                    num_batches: 2,
                    img_size: 32,
                    channels: 2,
                    batch_confounder: 0.0,
                },
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
            }),
            "paper" => Ok(Effective {
                preset: "paper".into(),
                // 14 complexes, 106 genes (+ control = 107 perturbations)
                synth: SynthConfig {
                    complex_sizes: vec![8, 8, 8, 8, 8, 8, 8, 8, 7, 7, 7, 7, 7, 7],
                    cells_per_gene: 4750,
                    num_batches: 34,
                    img_size: 96,
                    channels: 4,
                    batch_confounder: 0.0,
                },
                model: ModelConfig::paper(),
                train: TrainConfig::paper(),
            }),
            other => bail!("unknown preset {other:?} (expected desk or paper)"),
        }
    }
}

/// Optional per-field overrides loaded from a TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub synth: SynthOverlay,
    #[serde(default)]
    pub model: ModelOverlay,
    #[serde(default)]
    pub train: TrainOverlay,
    #[serde(default)]
    pub attention: AttentionOverlay,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOverlay {
    pub complexes: Option<usize>,
    pub genes_per_complex: Option<usize>,
    pub complex_sizes: Option<Vec<usize>>,
    pub cells_per_gene: Option<usize>,
    pub num_batches: Option<usize>,
    pub img_size: Option<usize>,
    pub channels: Option<usize>,
    pub batch_confounder: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverlay {
    pub embed_dim: Option<usize>,
    pub style_dim: Option<usize>,
    pub base_width: Option<usize>,
    pub max_width: Option<usize>,
    pub map_hidden: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverlay {
    pub batch_size: Option<usize>,
    pub total_iters: Option<u64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub r1_gamma: Option<f64>,
    pub lambda_cyc: Option<f64>,
    pub lambda_sty: Option<f64>,
    pub ema_interval: Option<u64>,
    pub ema_gamma: Option<f64>,
    pub stratified: Option<bool>,
    pub checkpoint_interval: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionOverlay {
    pub enabled: Option<bool>,
    pub heads: Option<usize>,
    pub key_dim: Option<usize>,
}

macro_rules! apply {
    ($dst:expr, $src:expr, $($field:ident),+) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$field = v; })+
    };
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
}

pub fn apply_file(eff: &mut Effective, file: &FileConfig) -> Result<()> {
    if let Some(sizes) = &file.synth.complex_sizes {
        eff.synth.complex_sizes = sizes.clone();
    } else if file.synth.complexes.is_some() || file.synth.genes_per_complex.is_some() {
        let c = file.synth.complexes.unwrap_or(eff.synth.complex_sizes.len());
        let g = file
            .synth
            .genes_per_complex
            .unwrap_or_else(|| eff.synth.complex_sizes.first().copied().unwrap_or(3));
        eff.synth.complex_sizes = vec![g; c];
    }
    apply!(eff.synth, file.synth, cells_per_gene, num_batches, img_size, channels, batch_confounder);
    apply!(eff.model, file.model, embed_dim, style_dim, base_width, max_width, map_hidden);
    apply!(
        eff.train,
        file.train,
        batch_size,
        total_iters,
        lr,
        weight_decay,
        adam_beta1,
        adam_beta2,
        r1_gamma,
        lambda_cyc,
        lambda_sty,
        ema_interval,
        ema_gamma,
        stratified,
        checkpoint_interval
    );
    let att: &mut AttentionConfig = &mut eff.model.attention;
    if let Some(v) = file.attention.enabled {
        att.enabled = v;
    }
    if let Some(v) = file.attention.heads {
        att.heads = v;
    }
    if let Some(v) = file.attention.key_dim {
        att.key_dim = v;
    }
    // keep dependent model shape fields in sync with the synth shape
    eff.model.img_size = eff.synth.img_size;
    eff.model.channels = eff.synth.channels;
    eff.model.num_perturbations = eff.synth.complex_sizes.iter().sum::<usize>() + 1;
    Ok(())
}
