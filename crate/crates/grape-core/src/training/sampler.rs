//! Perturbation-balanced batch sampling.
//!
//! Real screens are heavily imbalanced across perturbations; batches draw a
//! gene first (uniformly) and then a cell within the gene, so expected
//! per-gene counts are equal regardless of population sizes. Target
//! perturbations z are uniform over the vocabulary and independent of y.

use crate::dataset::Dataset;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One batch: dataset cell indices, their gene ids y, and target genes z.
pub struct Batch {
    pub cells: Vec<usize>,
    pub y: Vec<usize>,
    pub z: Vec<usize>,
}

pub fn sample_batch(
    ds: &Dataset,
    batch_size: usize,
    stratified: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument("batch_size must be >= 2".into()));
    }
    let p = ds.num_genes();
    let mut cells = Vec::with_capacity(batch_size);
    let mut y = Vec::with_capacity(batch_size);
    if stratified {
        // cycle a shuffled gene order so counts differ by at most one; with
        // batch_size == P every gene appears exactly once
        let mut order: Vec<usize> = (0..p).collect();
        while y.len() < batch_size {
            order.shuffle(rng);
            for &g in &order {
                if y.len() == batch_size {
                    break;
                }
                y.push(g);
            }
        }
    } else {
        for _ in 0..batch_size {
            y.push(rng.gen_range(0..p));
        }
    }
    for &g in &y {
        let pool = &ds.cells_by_gene[g];
        cells.push(pool[rng.gen_range(0..pool.len())]);
    }
    let z = (0..batch_size).map(|_| rng.gen_range(0..p)).collect();
    Ok(Batch { cells, y, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy() -> Dataset {
        let v = crate::synthgen::build_vocab(2, 2, 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let opts = crate::synthgen::GenerateOptions {
            cells_per_gene: 6,
            num_batches: 1,
            seed: 2,
            ..Default::default()
        };
        crate::synthgen::generate_dataset(&v, tmp.path().join("d").as_path(), &opts).unwrap();
        Dataset::load(tmp.path().join("d").as_path()).unwrap()
    }

    #[test]
    fn balanced_frequencies_within_three_sigma() {
        let ds = toy();
        let p = ds.num_genes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batches, bs) = (10_000, 8);
        let mut counts = vec![0f64; p];
        for _ in 0..batches {
            let b = sample_batch(&ds, bs, false, &mut rng).unwrap();
            for g in b.y {
                counts[g] += 1.0;
            }
        }
        let n = (batches * bs) as f64;
        let q = 1.0 / p as f64;
        let sigma = (n * q * (1.0 - q)).sqrt();
        for c in &counts {
            assert!((c - n * q).abs() < 3.0 * sigma, "count {c} expected {}", n * q);
        }
    }

    #[test]
    fn stratified_batch_of_p_hits_every_gene_once() {
        let ds = toy();
        let p = ds.num_genes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&ds, p, true, &mut rng).unwrap();
        let mut seen = vec![0; p];
        for g in b.y {
            seen[g] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn same_seed_same_batches() {
        let ds = toy();
        for seed in 0..3 {
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let a = sample_batch(&ds, 16, false, &mut r1).unwrap();
            let b = sample_batch(&ds, 16, false, &mut r2).unwrap();
            assert_eq!(a.cells, b.cells);
            assert_eq!(a.y, b.y);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn tiny_batch_rejected() {
        let ds = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&ds, 1, false, &mut rng).is_err());
    }
}
