//! Image normalization pipeline: retrospective flatfield correction,
//! per-channel percentile rescaling, patch cropping, and channel-wise
//! z-scoring against non-targeting control statistics per acquisition batch.

use crate::dataset::Dataset;
use crate::{Error, Result};
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-(batch, channel) normalization statistics from control cells.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    /// mean[batch][channel]
    pub mean: Vec<Vec<f64>>,
    /// std[batch][channel], strictly positive
    pub std: Vec<Vec<f64>>,
}

impl NormStats {
    pub fn num_batches(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len()
            || self.mean.iter().zip(&self.std).any(|(m, s)| m.len() != s.len())
        {
            return Err(Error::Shape("NormStats mean/std tables disagree".into()));
        }
        for row in &self.std {
            if row.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidArgument("NormStats std must be > 0".into()));
            }
        }
        Ok(())
    }
}

pub fn stats_path(dir: &Path) -> std::path::PathBuf {
    dir.join("norm_stats.json")
}

pub fn write_stats(dir: &Path, stats: &NormStats) -> Result<()> {
    let path = stats_path(dir);
    let text = serde_json::to_string_pretty(stats)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_stats(dir: &Path) -> Result<NormStats> {
    let path = stats_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stats: NormStats = serde_json::from_str(&text)?;
    stats.validate()?;
    Ok(stats)
}

/// Separable Gaussian blur with odd (antisymmetric) border reflection:
/// samples past an edge continue the local trend, v(-i) = 2 v(0) - v(i).
/// A symmetric kernel then preserves constant and linear signals exactly,
/// so a smooth gradient field survives the smoothing undistorted at the
/// borders.
fn gaussian_blur(frame: &ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let (h, w) = frame.dim();
    // value at logical index i of a line of length n, odd-reflected
    let sample = |line: &dyn Fn(usize) -> f64, i: i64, n: usize| -> f64 {
        let last = n as i64 - 1;
        if i < 0 {
            2.0 * line(0) - line((-i).min(last) as usize)
        } else if i > last {
            2.0 * line(last as usize) - line((2 * last - i).max(0) as usize)
        } else {
            line(i as usize)
        }
    };
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        let line = |c: usize| frame[(r, c)];
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * sample(&line, c as i64 + ki as i64 - radius, w);
            }
            tmp[(r, c)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for c in 0..w {
        let line = |r: usize| tmp[(r, c)];
        for r in 0..h {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * sample(&line, r as i64 + ki as i64 - radius, h);
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Divide each frame by a per-channel illumination field estimated as the
/// Gaussian-smoothed mean frame normalized to unit mean. Frames are
/// [N, C, H, W]; needs at least 8 frames.
pub fn flatfield_correct(frames: &Array4<f64>, blur_sigma: f64) -> Result<Array4<f64>> {
    let (n, c, h, w) = frames.dim();
    if n < 8 {
        return Err(Error::InvalidArgument(format!(
            "flatfield estimation needs >= 8 frames, got {n}"
        )));
    }
    let mut out = frames.clone();
    for ch in 0..c {
        let mean_frame = frames.index_axis(Axis(1), ch).mean_axis(Axis(0)).unwrap();
        let mut field = gaussian_blur(&mean_frame.view(), blur_sigma);
        let fmean = field.mean().unwrap();
        if fmean.abs() <= 1e-12 {
            return Err(Error::InvalidArgument("flatfield: mean frame is zero".into()));
        }
        field.mapv_inplace(|v| v / fmean);
        if field.iter().any(|&v| v <= 1e-6) {
            return Err(Error::InvalidArgument(
                "flatfield: estimated field has values <= 1e-6".into(),
            ));
        }
        for fi in 0..n {
            for r in 0..h {
                for cc in 0..w {
                    out[(fi, ch, r, cc)] /= field[(r, cc)];
                }
            }
        }
    }
    Ok(out)
}

/// Linearly interpolated percentile of a sorted slice (p in [0, 100]).
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-channel linear rescale sending the `lo`/`hi` percentiles to 0/1,
/// clipped to [0, 1]. A degenerate channel (hi == lo percentile) is zeroed
/// and its index returned as a warning.
pub fn percentile_rescale(image: &mut Array3<f64>, lo: f64, hi: f64) -> Result<Vec<usize>> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("percentile_rescale: non-finite input".into()));
    }
    let channels = image.dim().0;
    let mut degenerate = Vec::new();
    for c in 0..channels {
        let mut ch = image.index_axis_mut(Axis(0), c);
        let mut vals: Vec<f64> = ch.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p_lo = percentile_sorted(&vals, lo);
        let p_hi = percentile_sorted(&vals, hi);
        if p_hi <= p_lo {
            ch.fill(0.0);
            degenerate.push(c);
            continue;
        }
        let scale = 1.0 / (p_hi - p_lo);
        ch.mapv_inplace(|v| ((v - p_lo) * scale).clamp(0.0, 1.0));
    }
    Ok(degenerate)
}

/// `size`x`size` patch centered on the rounded center; `None` when the patch
/// would leave the frame (caller skips such cells).
pub fn crop_patch(frame: &Array3<f64>, center_xy: (f64, f64), size: usize) -> Result<Option<Array3<f64>>> {
    if size < 16 || size % 2 != 0 {
        return Err(Error::InvalidArgument("crop size must be even and >= 16".into()));
    }
    let (_, h, w) = frame.dim();
    let cx = center_xy.0.round() as i64;
    let cy = center_xy.1.round() as i64;
    let half = size as i64 / 2;
    // center pixel sits at local index size/2 - 1 .. convention: rows
    // [cy - half, cy + half) and likewise for columns
    let r0 = cy - half;
    let c0 = cx - half;
    if r0 < 0 || c0 < 0 || r0 + size as i64 > h as i64 || c0 + size as i64 > w as i64 {
        return Ok(None);
    }
    let patch = frame
        .slice(ndarray::s![.., r0 as usize..r0 as usize + size, c0 as usize..c0 as usize + size])
        .to_owned();
    Ok(Some(patch))
}

/// Two-pass control statistics: mean/std of control-cell pixels grouped by
/// (batch, channel).
pub fn control_stats(ds: &Dataset) -> Result<NormStats> {
    let control = ds
        .manifest
        .control_gene()
        .ok_or_else(|| Error::Dataset("dataset has no non-targeting control".into()))?;
    let control_id = control.gene_id;
    let channels = ds.manifest.channels;
    let batches = ds.manifest.num_batches;
    let mut sum = vec![vec![0.0f64; channels]; batches];
    let mut count = vec![0usize; batches];
    for (i, cell) in ds.manifest.cells.iter().enumerate() {
        if cell.gene_id != control_id {
            continue;
        }
        let b = cell.batch_id as usize;
        let px = ds.cell(i);
        for c in 0..channels {
            sum[b][c] += px.index_axis(Axis(0), c).iter().map(|&v| v as f64).sum::<f64>();
        }
        count[b] += 1;
    }
    let pixels_per_channel = ds.manifest.img_size * ds.manifest.img_size;
    let mut mean = vec![vec![0.0f64; channels]; batches];
    for b in 0..batches {
        if count[b] == 0 {
            return Err(Error::MissingStats { batch: b as u32 });
        }
        for c in 0..channels {
            mean[b][c] = sum[b][c] / (count[b] * pixels_per_channel) as f64;
        }
    }
    let mut sq = vec![vec![0.0f64; channels]; batches];
    for (i, cell) in ds.manifest.cells.iter().enumerate() {
        if cell.gene_id != control_id {
            continue;
        }
        let b = cell.batch_id as usize;
        let px = ds.cell(i);
        for c in 0..channels {
            sq[b][c] += px
                .index_axis(Axis(0), c)
                .iter()
                .map(|&v| (v as f64 - mean[b][c]).powi(2))
                .sum::<f64>();
        }
    }
    let mut std = vec![vec![0.0f64; channels]; batches];
    for b in 0..batches {
        for c in 0..channels {
            let var = sq[b][c] / (count[b] * pixels_per_channel) as f64;
            if !(var > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "control pixels are constant in batch {b} channel {c}"
                )));
            }
            std[b][c] = var.sqrt();
        }
    }
    let stats = NormStats { mean, std };
    stats.validate()?;
    Ok(stats)
}

/// In-place channel-wise z-scoring of every cell against its batch stats.
pub fn zscore(ds: &mut Dataset, stats: &NormStats) -> Result<()> {
    stats.validate()?;
    let channels = ds.manifest.channels;
    if stats.num_batches() < ds.manifest.num_batches
        || stats.mean.iter().any(|m| m.len() != channels)
    {
        let missing = stats.num_batches();
        return Err(Error::MissingStats { batch: missing as u32 });
    }
    let cells = ds.manifest.cells.clone();
    for (i, cell) in cells.iter().enumerate() {
        let b = cell.batch_id as usize;
        let mut px = ds.pixels.index_axis_mut(Axis(0), i);
        for c in 0..channels {
            let (m, s) = (stats.mean[b][c] as f32, stats.std[b][c] as f32);
            px.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v - m) / s);
        }
    }
    Ok(())
}

/// Full pipeline over a synthetic dataset directory: percentile-rescale each
/// cell, compute control stats, z-score, and write the processed dataset next
/// to `norm_stats.json` in `out_dir`.
pub struct PreprocessOptions {
    pub lo: f64,
    pub hi: f64,
    /// percentile scope: true = per cell image (default), false = over the
    /// whole dataset per channel
    pub per_frame: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { lo: 0.1, hi: 99.9, per_frame: true }
    }
}

pub fn preprocess_dataset(in_dir: &Path, out_dir: &Path, opts: &PreprocessOptions) -> Result<NormStats> {
    let mut ds = Dataset::load(in_dir)?;
    if opts.per_frame {
        for i in 0..ds.num_cells() {
            let mut img = ds.pixels.index_axis(Axis(0), i).mapv(|v| v as f64);
            percentile_rescale(&mut img, opts.lo, opts.hi)?;
            ds.pixels
                .index_axis_mut(Axis(0), i)
                .assign(&img.mapv(|v| v as f32));
        }
    } else {
        let channels = ds.manifest.channels;
        for c in 0..channels {
            let mut vals: Vec<f64> = ds
                .pixels
                .index_axis(Axis(1), c)
                .iter()
                .map(|&v| v as f64)
                .collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p_lo = percentile_sorted(&vals, opts.lo);
            let p_hi = percentile_sorted(&vals, opts.hi);
            if p_hi <= p_lo {
                ds.pixels.index_axis_mut(Axis(1), c).fill(0.0);
                continue;
            }
            let scale = 1.0 / (p_hi - p_lo);
            ds.pixels
                .index_axis_mut(Axis(1), c)
                .mapv_inplace(|v| (((v as f64 - p_lo) * scale).clamp(0.0, 1.0)) as f32);
        }
    }
    let stats = control_stats(&ds)?;
    zscore(&mut ds, &stats)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut writer =
        crate::dataset::ImagesWriter::create(out_dir, ds.manifest.channels, ds.manifest.img_size)?;
    for i in 0..ds.num_cells() {
        let img = ds.pixels.index_axis(Axis(0), i).to_owned();
        writer.push(&img)?;
    }
    writer.finish()?;
    crate::dataset::write_manifest(out_dir, &ds.manifest)?;
    write_stats(out_dir, &stats)?;
    Ok(stats)
}
