//! Subcommand implementations. Each command writes its artifacts plus an
//! `experiment.json` manifest tying the effective configuration and seed to
//! the digests of everything it read and wrote.

use crate::config::Effective;
use anyhow::{bail, Context, Result};
use grape_core::dataset::{dataset_digest, Dataset};
use grape_core::embeddings::{
    self, GeneEmbeddingTable, Position3Mode, Source, TableMetadata,
};
use grape_core::eval::{clustering_eval, k_sweep, GroundTruth, MetricsReport};
use grape_core::manifest::ExperimentManifest;
use grape_core::synthgen::{build_vocab_with_sizes, generate_dataset, GenerateOptions};
use grape_core::training::{self, load_checkpoint, Trainer};
use serde::Serialize;
use std::path::{Path, PathBuf};

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_experiment(out: &Path, m: &ExperimentManifest) -> Result<()> {
    let path = out.join("experiment.json");
    m.write(&path)?;
    Ok(())
}

pub fn cmd_synth(eff: &Effective, seed: u64, out: &Path, force: bool) -> Result<()> {
    let vocab = build_vocab_with_sizes(&eff.synth.complex_sizes, seed)?;
    let opts = GenerateOptions {
        cells_per_gene: eff.synth.cells_per_gene,
        num_batches: eff.synth.num_batches,
        seed,
        channels: eff.synth.channels,
        img_size: eff.synth.img_size,
        force,
        batch_confounder: eff.synth.batch_confounder,
    };
    generate_dataset(&vocab, out, &opts)?;
    let digest = dataset_digest(out)?;
    let mut m = ExperimentManifest::new("synth", serde_json::to_value(eff)?, seed);
    m.record_output("dataset_manifest", &grape_core::dataset::manifest_path(out))?;
    m.record_output("dataset_images", &grape_core::dataset::images_path(out))?;
    write_experiment(out, &m)?;
    println!("dataset {} digest {digest}", out.display());
    Ok(())
}

pub fn cmd_preprocess(eff: &Effective, seed: u64, input: &Path, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let opts = grape_core::preprocess::PreprocessOptions::default();
    grape_core::preprocess::preprocess_dataset(input, out, &opts)?;
    let digest = dataset_digest(out)?;
    let mut m = ExperimentManifest::new("preprocess", serde_json::to_value(eff)?, seed);
    m.record_input("dataset_manifest", &grape_core::dataset::manifest_path(input))?;
    m.record_input("dataset_images", &grape_core::dataset::images_path(input))?;
    m.record_output("dataset_manifest", &grape_core::dataset::manifest_path(out))?;
    m.record_output("dataset_images", &grape_core::dataset::images_path(out))?;
    m.record_output("norm_stats", &grape_core::preprocess::stats_path(out))?;
    write_experiment(out, &m)?;
    println!("processed dataset {} digest {digest}", out.display());
    Ok(())
}

pub fn cmd_train(
    eff: &Effective,
    seed: u64,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    ensure_out(out)?;
    let ds = Dataset::load(data)?;
    let mut mcfg = eff.model.clone();
    mcfg.num_perturbations = ds.num_genes();
    mcfg.img_size = ds.manifest.img_size;
    mcfg.channels = ds.manifest.channels;
    let mut tcfg = eff.train.clone();
    tcfg.seed = seed;
    let mut trainer = match resume {
        Some(path) => {
            let t = load_checkpoint(path)?;
            if t.cfg.total_iters > tcfg.total_iters {
                bail!(
                    "checkpoint was configured for {} iterations, more than the requested {}",
                    t.cfg.total_iters,
                    tcfg.total_iters
                );
            }
            let mut t = t;
            t.cfg.total_iters = tcfg.total_iters;
            t
        }
        None => Trainer::new(&mcfg, &tcfg)?,
    };
    let ckpts = training::run(&mut trainer, &ds, out)?;
    let mut m = ExperimentManifest::new("train", serde_json::to_value(eff)?, seed);
    m.record_input("dataset_manifest", &grape_core::dataset::manifest_path(data))?;
    m.record_input("dataset_images", &grape_core::dataset::images_path(data))?;
    for c in &ckpts {
        m.record_output("checkpoint", c)?;
    }
    m.record_output("loss_log", &training::loss_log_path(out))?;
    write_experiment(out, &m)?;
    println!(
        "trained to iteration {} ({} checkpoints) in {}",
        trainer.iter,
        ckpts.len(),
        out.display()
    );
    Ok(())
}

pub struct ExtractArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub positions: Vec<u8>,
    pub live: bool,
    pub ema: bool,
    pub mode: Position3Mode,
    pub cells_per_gene: usize,
}

pub fn table_filename(position: u8, ema: bool) -> String {
    format!("pos{position}_{}.csv", if ema { "ema" } else { "live" })
}

pub fn cmd_extract(eff: &Effective, seed: u64, out: &Path, args: &ExtractArgs) -> Result<()> {
    ensure_out(out)?;
    if args.positions.is_empty() || !(args.live || args.ema) {
        bail!("nothing to extract: need at least one position and one of live/ema");
    }
    let trainer = load_checkpoint(args.checkpoint)?;
    let ds = Dataset::load(args.data)?;
    let ema_ps = trainer.ema.apply_to(&trainer.ps);
    let mut m = ExperimentManifest::new("extract", serde_json::to_value(eff)?, seed);
    m.record_input("checkpoint", args.checkpoint)?;
    m.record_input("dataset_manifest", &grape_core::dataset::manifest_path(args.data))?;
    for &pos in &args.positions {
        for (use_ema, ps) in [(false, &trainer.ps), (true, &ema_ps)] {
            if (use_ema && !args.ema) || (!use_ema && !args.live) {
                continue;
            }
            let mut table = match pos {
                1 => embeddings::extract_position1(&trainer.model, ps, &ds.manifest)?,
                2 => embeddings::extract_position2(&trainer.model, ps, &ds.manifest)?,
                3 => embeddings::extract_position3(
                    &trainer.model,
                    ps,
                    &ds,
                    args.cells_per_gene,
                    args.mode,
                    seed,
                )?,
                p => bail!("unknown extraction position {p} (expected 1, 2 or 3)"),
            };
            table.ema = use_ema;
            let path = out.join(table_filename(pos, use_ema));
            embeddings::write_table(&path, &table)?;
            embeddings::write_metadata(
                &path,
                &TableMetadata {
                    source: table.source,
                    ema: use_ema,
                    checkpoint: Some(args.checkpoint.display().to_string()),
                    seed: Some(seed),
                    mode: (pos == 3).then(|| args.mode.as_str().to_string()),
                },
            )?;
            m.record_output("embedding_table", &path)?;
            println!("wrote {}", path.display());
        }
    }
    write_experiment(out, &m)?;
    Ok(())
}

#[derive(Serialize)]
struct NamedReport {
    name: String,
    report: MetricsReport,
}

pub fn cmd_eval(
    eff: &Effective,
    seed: u64,
    out: &Path,
    data: &Path,
    tables: &[PathBuf],
    k: Option<usize>,
    restarts: usize,
) -> Result<()> {
    ensure_out(out)?;
    if tables.is_empty() {
        bail!("eval needs at least one --table");
    }
    let manifest = grape_core::dataset::read_manifest(data)?;
    let gt = GroundTruth::from_manifest(&manifest);
    let k = k.unwrap_or_else(|| manifest.num_complexes());
    let mut m = ExperimentManifest::new("eval", serde_json::to_value(eff)?, seed);
    m.record_input("dataset_manifest", &grape_core::dataset::manifest_path(data))?;
    let mut rows = Vec::new();
    println!("{:<24} {:>7} {:>15} {:>15} {:>15}", "table", "mAP", "purity", "NMI", "ARI");
    for path in tables {
        let table = embeddings::ingest_external(path)?;
        let report = clustering_eval(&table, &gt, k, restarts, seed)?;
        m.record_input("embedding_table", path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        println!(
            "{:<24} {:>7.4} {:>7.4}±{:<6.4} {:>7.4}±{:<6.4} {:>7.4}±{:<6.4}",
            name,
            report.map,
            report.purity.mean,
            report.purity.std,
            report.nmi.mean,
            report.nmi.std,
            report.ari.mean,
            report.ari.std
        );
        rows.push(NamedReport { name, report });
    }
    let path = out.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
    m.record_output("metrics_report", &path)?;
    write_experiment(out, &m)?;
    Ok(())
}

pub fn cmd_sweep(
    eff: &Effective,
    seed: u64,
    out: &Path,
    data: &Path,
    table_path: &Path,
    k_min: usize,
    k_max: usize,
    restarts: usize,
) -> Result<()> {
    ensure_out(out)?;
    if k_min > k_max || k_min == 0 {
        bail!("empty or invalid k range {k_min}..={k_max}");
    }
    let manifest = grape_core::dataset::read_manifest(data)?;
    let gt = GroundTruth::from_manifest(&manifest);
    let table = embeddings::ingest_external(table_path)?;
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let reports = k_sweep(&table, &gt, &ks, restarts, seed)?;
    let mut m = ExperimentManifest::new("sweep", serde_json::to_value(eff)?, seed);
    m.record_input("dataset_manifest", &grape_core::dataset::manifest_path(data))?;
    m.record_input("embedding_table", table_path)?;
    let series_path = out.join("sweep.json");
    std::fs::write(&series_path, serde_json::to_string_pretty(&reports)?)?;
    m.record_output("metrics_report", &series_path)?;
    let svg = crate::figure::render_sweep_svg(&reports, manifest.num_complexes());
    let fig_path = out.join("sweep.svg");
    std::fs::write(&fig_path, svg)?;
    m.record_output("figure", &fig_path)?;
    write_experiment(out, &m)?;
    println!("sweep over k={k_min}..={k_max} -> {}", fig_path.display());
    Ok(())
}

pub fn cmd_ingest(
    eff: &Effective,
    seed: u64,
    out: &Path,
    table_path: &Path,
    data: Option<&Path>,
) -> Result<()> {
    ensure_out(out)?;
    let table: GeneEmbeddingTable = embeddings::ingest_external(table_path)?;
    let dest = out.join(
        table_path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| "ingested.csv".into()),
    );
    embeddings::write_table(&dest, &table)?;
    embeddings::write_metadata(
        &dest,
        &TableMetadata {
            source: Source::External,
            ema: false,
            checkpoint: None,
            seed: Some(seed),
            mode: None,
        },
    )?;
    if let Some(data) = data {
        let manifest = grape_core::dataset::read_manifest(data)?;
        let known: std::collections::BTreeSet<String> =
            manifest.genes.iter().map(|g| g.name.clone()).collect();
        let unknown = table.unknown_genes(&known);
        if !unknown.is_empty() {
            eprintln!(
                "warning: {} genes not present in the dataset vocabulary: {}",
                unknown.len(),
                unknown.join(", ")
            );
        }
    }
    let mut m = ExperimentManifest::new("ingest", serde_json::to_value(eff)?, seed);
    m.record_input("embedding_table", table_path)?;
    m.record_output("embedding_table", &dest)?;
    write_experiment(out, &m)?;
    println!("ingested {} genes x {} dims -> {}", table.len(), table.dim(), dest.display());
    Ok(())
}
