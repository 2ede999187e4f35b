//! Synthetic optical-pooled-screening dataset with known ground truth.
//!
//! Perturbations ("genes") belong to complexes; every complex has a visual
//! style (nucleus radius scale, per-channel intensity gains, texture spatial
//! frequency, eccentricity) and each gene sits at the complex center plus a
//! small jitter, so complexes are recoverable from pixels by construction.
//! One non-targeting control carries the neutral style with zero offset.

use crate::dataset::{CellRecord, ComplexRecord, GeneRecord, ImagesWriter, Manifest};
use crate::{derive_seed, Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Style parameter layout: [nucleus radius scale, gain ch0..ch3, texture
/// spatial frequency (cycles/patch), eccentricity].
pub const STYLE_LEN: usize = 7;

/// Valid (min, max) per style parameter.
pub const STYLE_RANGES: [(f64, f64); STYLE_LEN] = [
    (0.5, 1.5), // nucleus radius scale
    (0.5, 2.0), // gain channel 0
    (0.5, 2.0), // gain channel 1
    (0.5, 2.0), // gain channel 2
    (0.5, 2.0), // gain channel 3
    (1.0, 8.0), // texture spatial frequency
    (0.0, 0.8), // eccentricity
];

/// Neutral style of the non-targeting control.
pub const NEUTRAL_STYLE: [f64; STYLE_LEN] = [1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 0.2];

/// Per-gene jitter radius in normalized style space; complex centers are
/// kept at least `4 * JITTER_RADIUS` apart (normalized).
pub const JITTER_RADIUS: f64 = 0.06;

pub const CONTROL_NAME: &str = "non-targeting";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComplexSpec {
    pub complex_id: u32,
    pub style_center: [f64; STYLE_LEN],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerturbationSpec {
    pub gene_id: u32,
    pub gene_name: String,
    /// `None` marks the non-targeting control.
    pub complex_id: Option<u32>,
    pub style: [f64; STYLE_LEN],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    pub perturbations: Vec<PerturbationSpec>,
    pub complexes: Vec<ComplexSpec>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.perturbations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perturbations.is_empty()
    }

    pub fn control(&self) -> &PerturbationSpec {
        self.perturbations
            .iter()
            .find(|p| p.complex_id.is_none())
            .expect("vocab always contains the control")
    }
}

pub fn normalize_style(style: &[f64; STYLE_LEN]) -> [f64; STYLE_LEN] {
    let mut out = [0.0; STYLE_LEN];
    for (i, ((lo, hi), v)) in STYLE_RANGES.iter().zip(style.iter()).enumerate() {
        out[i] = (v - lo) / (hi - lo);
    }
    out
}

fn denormalize_style(unit: &[f64; STYLE_LEN]) -> [f64; STYLE_LEN] {
    let mut out = [0.0; STYLE_LEN];
    for (i, ((lo, hi), v)) in STYLE_RANGES.iter().zip(unit.iter()).enumerate() {
        out[i] = lo + v * (hi - lo);
    }
    out
}

fn dist(a: &[f64; STYLE_LEN], b: &[f64; STYLE_LEN]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum pairwise distance between complex centers in normalized style
/// space (control's neutral style included).
pub fn min_center_separation(complexes: &[ComplexSpec]) -> f64 {
    let mut centers: Vec<[f64; STYLE_LEN]> =
        complexes.iter().map(|c| normalize_style(&c.style_center)).collect();
    centers.push(normalize_style(&NEUTRAL_STYLE));
    let mut best = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.min(dist(&centers[i], &centers[j]));
        }
    }
    best
}

/// Uniform sample from the unit ball of `radius` in STYLE_LEN dims.
fn jitter_vector(rng: &mut ChaCha8Rng, radius: f64) -> [f64; STYLE_LEN] {
    loop {
        let mut v = [0.0; STYLE_LEN];
        let mut norm2 = 0.0;
        for x in v.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
            norm2 += *x * *x;
        }
        if norm2 <= 1.0 {
            for x in v.iter_mut() {
                *x *= radius;
            }
            return v;
        }
    }
}

/// Uniform-size vocabulary: `num_complexes * genes_per_complex` styled genes
/// plus one control. Deterministic in `seed`.
pub fn build_vocab(num_complexes: usize, genes_per_complex: usize, seed: u64) -> Result<Vocab> {
    if num_complexes < 2 || genes_per_complex < 2 {
        return Err(Error::InvalidArgument(
            "need num_complexes >= 2 and genes_per_complex >= 2".into(),
        ));
    }
    build_vocab_with_sizes(&vec![genes_per_complex; num_complexes], seed)
}

/// Vocabulary with explicit complex sizes (used by the paper-shaped preset).
pub fn build_vocab_with_sizes(sizes: &[usize], seed: u64) -> Result<Vocab> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s < 2) {
        return Err(Error::InvalidArgument(
            "need at least 2 complexes with at least 2 genes each".into(),
        ));
    }
    let num_complexes = sizes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC0));

    // Rejection sampling of complex centers in normalized space, best of
    // several candidate sets by min pairwise separation. The neutral control
    // style participates so no complex collapses onto the control.
    let neutral = normalize_style(&NEUTRAL_STYLE);
    let margin = JITTER_RADIUS;
    let mut best_set: Option<(f64, Vec<[f64; STYLE_LEN]>)> = None;
    for _ in 0..256 {
        let centers: Vec<[f64; STYLE_LEN]> = (0..num_complexes)
            .map(|_| {
                let mut c = [0.0; STYLE_LEN];
                for x in c.iter_mut() {
                    *x = rng.gen_range(margin..(1.0 - margin));
                }
                c
            })
            .collect();
        let mut sep = f64::INFINITY;
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                sep = sep.min(dist(&centers[i], &centers[j]));
            }
            sep = sep.min(dist(&centers[i], &neutral));
        }
        if best_set.as_ref().map_or(true, |(s, _)| sep > *s) {
            best_set = Some((sep, centers));
        }
    }
    let (sep, centers) = best_set.unwrap();
    if sep < 4.0 * JITTER_RADIUS {
        return Err(Error::InvalidArgument(format!(
            "could not separate {num_complexes} complex style centers by 4x jitter (best {sep:.3})"
        )));
    }

    let complexes: Vec<ComplexSpec> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| ComplexSpec { complex_id: i as u32, style_center: denormalize_style(c) })
        .collect();

    let mut perturbations = Vec::new();
    let mut gene_id = 0u32;
    for (ci, &size) in sizes.iter().enumerate() {
        for gi in 0..size {
            let jit = jitter_vector(&mut rng, JITTER_RADIUS);
            let mut unit = centers[ci];
            for (u, j) in unit.iter_mut().zip(jit.iter()) {
                *u = (*u + j).clamp(0.0, 1.0);
            }
            perturbations.push(PerturbationSpec {
                gene_id,
                gene_name: format!("C{ci:02}G{gi:02}"),
                complex_id: Some(ci as u32),
                style: denormalize_style(&unit),
            });
            gene_id += 1;
        }
    }
    perturbations.push(PerturbationSpec {
        gene_id,
        gene_name: CONTROL_NAME.to_string(),
        complex_id: None,
        style: NEUTRAL_STYLE,
    });

    Ok(Vocab { perturbations, complexes })
}

/// Render one cell. Content factors (center offset, rotation, texture phase,
/// pixel noise) depend only on `content_seed`; style-dependent pixels depend
/// only on `spec.style`.
pub fn render_cell(spec: &PerturbationSpec, content_seed: u64, channels: usize, img_size: usize) -> Result<Array3<f32>> {
    if img_size < 16 || channels < 1 {
        return Err(Error::InvalidArgument("render_cell needs H >= 16 and C >= 1".into()));
    }
    let h = img_size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
    let dx = rng.gen_range(-h / 8.0..h / 8.0);
    let dy = rng.gen_range(-h / 8.0..h / 8.0);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let radius_scale = spec.style[0];
    let gains = &spec.style[1..5];
    let freq = spec.style[5];
    let ecc = spec.style[6];

    let cx = h / 2.0 + dx;
    let cy = h / 2.0 + dy;
    let r_nuc = h / 6.0 * radius_scale;
    // area-preserving eccentric ellipse
    let stretch = (1.0 - ecc * ecc).max(1e-3).powf(-0.25);
    let (a_nuc, b_nuc) = (r_nuc * stretch, r_nuc / stretch);
    let (a_cyt, b_cyt) = (a_nuc * 2.2, b_nuc * 2.2);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());

    let mut img = Array3::<f32>::zeros((channels, img_size, img_size));
    for row in 0..img_size {
        for col in 0..img_size {
            let x = col as f64 - cx;
            let y = row as f64 - cy;
            // rotate into the ellipse frame
            let u = x * cos_t + y * sin_t;
            let v = -x * sin_t + y * cos_t;
            let in_nuc = (u / a_nuc).powi(2) + (v / b_nuc).powi(2) <= 1.0;
            let in_cyt = (u / a_cyt).powi(2) + (v / b_cyt).powi(2) <= 1.0;
            if in_nuc {
                img[(0, row, col)] = gains[0] as f32;
            }
            for c in 1..channels {
                if in_cyt && !in_nuc {
                    let tex = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u / h + phase).sin();
                    let gain = gains[(c).min(3)];
                    img[(c, row, col)] = (gain * tex) as f32;
                }
            }
        }
    }
    // additive content noise, drawn after geometry so it is independent of
    // the style parameters
    use rand_distr::{Distribution, StandardNormal};
    for v in img.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += (0.05 * z) as f32;
    }
    Ok(img)
}

pub struct GenerateOptions {
    pub cells_per_gene: usize,
    pub num_batches: usize,
    pub seed: u64,
    pub channels: usize,
    pub img_size: usize,
    /// Overwrite an existing dataset directory.
    pub force: bool,
    /// Optional batch-brightness confounder (off by default): multiplies all
    /// channels by 1 + strength * (batch - (B-1)/2).
    pub batch_confounder: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            cells_per_gene: 100,
            num_batches: 2,
            seed: 0,
            channels: 2,
            img_size: 32,
            force: false,
            batch_confounder: 0.0,
        }
    }
}

/// Write a dataset directory. Each gene gets exactly `cells_per_gene` cells
/// spread round-robin across batches; each cell's randomness derives from
/// `(seed, cell_uid)` so generation order cannot change the output.
pub fn generate_dataset(vocab: &Vocab, dir: &Path, opts: &GenerateOptions) -> Result<Manifest> {
    if opts.cells_per_gene < 1 || opts.num_batches < 1 {
        return Err(Error::InvalidArgument("cells_per_gene and num_batches must be >= 1".into()));
    }
    if crate::dataset::manifest_path(dir).exists() && !opts.force {
        return Err(Error::Dataset(format!(
            "dataset already exists at {} (use force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut writer = ImagesWriter::create(dir, opts.channels, opts.img_size)?;
    let mut cells = Vec::new();
    let mut cell_uid = 0u64;
    for pert in &vocab.perturbations {
        for i in 0..opts.cells_per_gene {
            let batch_id = (i % opts.num_batches) as u32;
            let content_seed = derive_seed(opts.seed, cell_uid);
            let mut img = render_cell(pert, content_seed, opts.channels, opts.img_size)?;
            if opts.batch_confounder != 0.0 {
                let center = (opts.num_batches as f64 - 1.0) / 2.0;
                let gain = 1.0 + opts.batch_confounder * (batch_id as f64 - center);
                img.mapv_inplace(|v| v * gain as f32);
            }
            let offset = writer.push(&img)?;
            cells.push(CellRecord { cell_uid, gene_id: pert.gene_id, batch_id, offset });
            cell_uid += 1;
        }
    }
    writer.finish()?;

    let manifest = Manifest {
        version: crate::dataset::FORMAT_VERSION,
        channels: opts.channels,
        img_size: opts.img_size,
        num_batches: opts.num_batches,
        seed: opts.seed,
        genes: vocab
            .perturbations
            .iter()
            .map(|p| GeneRecord { gene_id: p.gene_id, name: p.gene_name.clone(), complex_id: p.complex_id })
            .collect(),
        complexes: vocab
            .complexes
            .iter()
            .map(|c| ComplexRecord { complex_id: c.complex_id, style_center: c.style_center.to_vec() })
            .collect(),
        cells,
    };
    crate::dataset::write_manifest(dir, &manifest)?;
    Ok(manifest)
}
