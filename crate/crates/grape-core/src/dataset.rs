//! On-disk dataset format and in-memory access.
//!
//! A dataset directory holds `manifest.json` (gene table, ground-truth
//! complex ids, cell index) and `images.bin` (header: magic "GRPE",
//! version, C, H, W, count as little-endian u32, followed by float32
//! little-endian C*H*W records in index order).

use crate::{Error, Result};
use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const IMAGES_MAGIC: &[u8; 4] = b"GRPE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneRecord {
    pub gene_id: u32,
    pub name: String,
    /// Ground-truth complex; `None` for the non-targeting control.
    pub complex_id: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComplexRecord {
    pub complex_id: u32,
    pub style_center: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellRecord {
    pub cell_uid: u64,
    pub gene_id: u32,
    pub batch_id: u32,
    /// Record index into images.bin.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub channels: usize,
    pub img_size: usize,
    pub num_batches: usize,
    pub seed: u64,
    pub genes: Vec<GeneRecord>,
    pub complexes: Vec<ComplexRecord>,
    pub cells: Vec<CellRecord>,
}

impl Manifest {
    pub fn control_gene(&self) -> Option<&GeneRecord> {
        self.genes.iter().find(|g| g.complex_id.is_none())
    }

    /// gene name -> complex id for all non-control genes.
    pub fn ground_truth(&self) -> BTreeMap<String, u32> {
        self.genes
            .iter()
            .filter_map(|g| g.complex_id.map(|c| (g.name.clone(), c)))
            .collect()
    }

    pub fn num_complexes(&self) -> usize {
        self.complexes.len()
    }
}

/// Fully loaded dataset: manifest plus pixel store [count, C, H, W].
pub struct Dataset {
    pub manifest: Manifest,
    pub pixels: Array4<f32>,
    /// Cell indices grouped by gene_id.
    pub cells_by_gene: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn cell(&self, idx: usize) -> ArrayView3<'_, f32> {
        self.pixels.index_axis(ndarray::Axis(0), idx)
    }

    pub fn num_cells(&self) -> usize {
        self.manifest.cells.len()
    }

    pub fn num_genes(&self) -> usize {
        self.manifest.genes.len()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let pixels = read_images(dir, &manifest)?;
        let mut cells_by_gene = vec![Vec::new(); manifest.genes.len()];
        for (i, c) in manifest.cells.iter().enumerate() {
            cells_by_gene[c.gene_id as usize].push(i);
        }
        if cells_by_gene.iter().any(|v| v.is_empty()) {
            return Err(Error::Dataset("a gene has no cells in the dataset".into()));
        }
        Ok(Dataset { manifest, pixels, cells_by_gene })
    }
}

pub fn manifest_path(dir: &Path) -> std::path::PathBuf {
    dir.join("manifest.json")
}

pub fn images_path(dir: &Path) -> std::path::PathBuf {
    dir.join("images.bin")
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = manifest_path(dir);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Streaming writer for images.bin; records must arrive in index order.
pub struct ImagesWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
    channels: usize,
    img_size: usize,
    count: u32,
}

impl ImagesWriter {
    pub fn create(dir: &Path, channels: usize, img_size: usize) -> Result<Self> {
        let path = images_path(dir);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = ImagesWriter {
            file: std::io::BufWriter::new(file),
            path,
            channels,
            img_size,
            count: 0,
        };
        w.write_header(0)?;
        Ok(w)
    }

    fn write_header(&mut self, count: u32) -> Result<()> {
        let mut head = Vec::with_capacity(24);
        head.extend_from_slice(IMAGES_MAGIC);
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        head.extend_from_slice(&(self.channels as u32).to_le_bytes());
        head.extend_from_slice(&(self.img_size as u32).to_le_bytes());
        head.extend_from_slice(&(self.img_size as u32).to_le_bytes());
        head.extend_from_slice(&count.to_le_bytes());
        self.file.write_all(&head).map_err(|e| Error::io(&self.path, e))
    }

    pub fn push(&mut self, pixels: &Array3<f32>) -> Result<u64> {
        let (c, h, w) = pixels.dim();
        if c != self.channels || h != self.img_size || w != self.img_size {
            return Err(Error::Shape(format!(
                "image record {:?} does not match store ({}, {}, {})",
                pixels.dim(),
                self.channels,
                self.img_size,
                self.img_size
            )));
        }
        let mut buf = Vec::with_capacity(pixels.len() * 4);
        for v in pixels.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.file.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        let idx = self.count as u64;
        self.count += 1;
        Ok(idx)
    }

    pub fn finish(mut self) -> Result<()> {
        use std::io::Seek;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        let mut file = self.file.into_inner().map_err(|e| Error::io(&self.path, e.into_error()))?;
        file.seek(std::io::SeekFrom::Start(0)).map_err(|e| Error::io(&self.path, e))?;
        let count = self.count;
        let mut head = Vec::with_capacity(24);
        head.extend_from_slice(IMAGES_MAGIC);
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        head.extend_from_slice(&(self.channels as u32).to_le_bytes());
        head.extend_from_slice(&(self.img_size as u32).to_le_bytes());
        head.extend_from_slice(&(self.img_size as u32).to_le_bytes());
        head.extend_from_slice(&count.to_le_bytes());
        file.write_all(&head).map_err(|e| Error::io(&self.path, e))?;
        file.sync_all().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_images(dir: &Path, manifest: &Manifest) -> Result<Array4<f32>> {
    let path = images_path(dir);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut head = [0u8; 24];
    r.read_exact(&mut head).map_err(|e| Error::io(&path, e))?;
    if &head[0..4] != IMAGES_MAGIC {
        return Err(Error::Dataset("images.bin: bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::Dataset(format!("images.bin: unsupported version {version}")));
    }
    let (c, h, w, count) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    if c != manifest.channels || h != manifest.img_size || w != manifest.img_size || count != manifest.cells.len() {
        return Err(Error::Dataset(format!(
            "images.bin header ({c},{h},{w},{count}) disagrees with manifest ({},{},{},{})",
            manifest.channels,
            manifest.img_size,
            manifest.img_size,
            manifest.cells.len()
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(&path, e))?;
    let expected = count * c * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "images.bin payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("images.bin contains non-finite pixels".into()));
    }
    Array4::from_shape_vec((count, c, h, w), data)
        .map_err(|e| Error::Dataset(format!("images.bin shape error: {e}")))
}

/// SHA-256 hex digest of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

/// Combined digest over manifest.json and images.bin.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for name in ["manifest.json", "images.bin"] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
