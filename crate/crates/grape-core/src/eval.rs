//! Embedding-quality metrics: cosine-distance mean average precision against
//! complex co-membership, Lloyd k-means with restarts, and the external
//! clustering indices purity, NMI and ARI.

use crate::dataset::Manifest;
use crate::embeddings::GeneEmbeddingTable;
use crate::{derive_seed, Error, Result};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Gene -> complex label. Control perturbations are excluded at
/// construction time and therefore from every metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, usize>,
}

impl GroundTruth {
    pub fn new(labels: BTreeMap<String, usize>) -> Self {
        GroundTruth { labels }
    }

    /// Complex labels from a dataset manifest, excluding the control gene.
    pub fn from_manifest(manifest: &Manifest) -> Self {
        let labels = manifest
            .genes
            .iter()
            .filter_map(|g| g.complex_id.map(|c| (g.name.clone(), c as usize)))
            .collect();
        GroundTruth { labels }
    }

    pub fn num_complexes(&self) -> usize {
        let mut seen = std::collections::BTreeSet::new();
        for &c in self.labels.values() {
            seen.insert(c);
        }
        seen.len()
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Evaluated genes: present in both the table and the ground truth, in
/// lexicographic name order (the stable tie-break order for rankings).
fn evaluated_genes<'a>(
    table: &'a GeneEmbeddingTable,
    gt: &GroundTruth,
) -> Vec<(&'a str, usize, usize)> {
    let mut genes: Vec<(&str, usize, usize)> = table
        .names
        .iter()
        .enumerate()
        .filter_map(|(row, name)| {
            gt.labels.get(name).map(|&label| (name.as_str(), row, label))
        })
        .collect();
    genes.sort_by(|a, b| a.0.cmp(b.0));
    genes
}

/// Mean average precision of complex co-membership under cosine distance.
///
/// Each evaluated gene queries a ranking of all other evaluated genes by
/// ascending cosine distance, ties broken by gene name; its average
/// precision is the mean of precision-at-rank over the ranks holding
/// same-complex genes. Genes whose complex has no other member are skipped.
pub fn map_score(table: &GeneEmbeddingTable, gt: &GroundTruth) -> Result<f64> {
    let genes = evaluated_genes(table, gt);
    if genes.len() < 2 {
        return Err(Error::InvalidArgument(
            "mAP needs at least two evaluated genes".into(),
        ));
    }
    for (name, row, _) in &genes {
        let norm: f64 = table.vectors.row(*row).iter().map(|v| v * v).sum();
        if norm <= 0.0 {
            return Err(Error::ZeroVector(name.to_string()));
        }
    }
    let rows: Vec<Vec<f64>> = genes
        .iter()
        .map(|(_, row, _)| table.vectors.row(*row).to_vec())
        .collect();
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for (qi, (_, _, q_label)) in genes.iter().enumerate() {
        let num_pos = genes
            .iter()
            .enumerate()
            .filter(|(i, (_, _, l))| *i != qi && l == q_label)
            .count();
        if num_pos == 0 {
            continue;
        }
        let mut ranked: Vec<(f64, &str, bool)> = genes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != qi)
            .map(|(i, (name, _, l))| (cosine_distance(&rows[qi], &rows[i]), *name, l == q_label))
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        let mut hits = 0usize;
        let mut prec_sum = 0.0;
        for (rank0, (_, _, is_pos)) in ranked.iter().enumerate() {
            if *is_pos {
                hits += 1;
                prec_sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += prec_sum / num_pos as f64;
        ap_count += 1;
    }
    if ap_count == 0 {
        return Err(Error::InvalidArgument(
            "no evaluated gene has a same-complex partner".into(),
        ));
    }
    Ok(ap_sum / ap_count as f64)
}

const KMEANS_MAX_ITERS: usize = 300;

/// Lloyd k-means: centroids initialized at k distinct points chosen
/// uniformly at random, at most 300 iterations, convergence when the
/// assignment stops changing. An emptied cluster is reseeded at the point
/// farthest from its current centroid.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in [1, {n}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = rand::seq::index::sample(&mut rng, n, k);
    let dim = points.ncols();
    let mut centroids = Array2::<f64>::zeros((k, dim));
    for (c, i) in init.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(i));
    }
    let dist2 = |p: ndarray::ArrayView1<f64>, c: ndarray::ArrayView1<f64>| -> f64 {
        p.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = dist2(points.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, dim));
        for i in 0..n {
            counts[assign[i]] += 1;
            let mut row = sums.row_mut(assign[i]);
            row += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[(c, d)] = sums[(c, d)] / counts[c] as f64;
                }
            } else {
                // reseed at the point farthest from this centroid
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = dist2(points.row(i), centroids.row(c));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centroids.row_mut(c).assign(&points.row(far));
            }
        }
    }
    Ok(assign)
}

fn contingency(a: &[usize], b: &[usize]) -> Vec<Vec<usize>> {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    table
}

/// Fraction of items whose cluster's plurality label matches their label.
pub fn purity(assign: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assign.len(), labels.len());
    let table = contingency(assign, labels);
    let correct: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    correct as f64 / assign.len() as f64
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, I(U;V) / ((H(U) + H(V)) / 2); a 0/0
/// quotient (both partitions trivial) is defined as 0.
pub fn nmi(assign: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assign.len(), labels.len());
    let n = assign.len();
    let table = contingency(assign, labels);
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let mut col_sums = vec![0usize; table.first().map_or(0, |r| r.len())];
    for row in &table {
        for (j, &v) in row.iter().enumerate() {
            col_sums[j] += v;
        }
    }
    let hu = entropy(&row_sums, n);
    let hv = entropy(&col_sums, n);
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let pij = nij as f64 / n as f64;
                mi += pij * ((n * nij) as f64 / (row_sums[i] * col_sums[j]) as f64).ln();
            }
        }
    }
    let denom = 0.5 * (hu + hv);
    if denom == 0.0 {
        0.0
    } else {
        mi / denom
    }
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index via pair counting. A zero denominator (both
/// partitions trivial, expected index equals maximum) is defined as 1.
pub fn ari(assign: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assign.len(), labels.len());
    let n = assign.len();
    let table = contingency(assign, labels);
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let mut col_sums = vec![0usize; table.first().map_or(0, |r| r.len())];
    for row in &table {
        for (j, &v) in row.iter().enumerate() {
            col_sums[j] += v;
        }
    }
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: f64 = row_sums.iter().map(|&v| choose2(v)).sum();
    let sum_b: f64 = col_sums.iter().map(|&v| choose2(v)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-15 {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn over(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    pub map: f64,
    pub purity: Stat,
    pub nmi: Stat,
    pub ari: Stat,
}

/// mAP plus clustering metrics averaged over k-means restarts; restart r
/// uses the derived seed (seed, r).
pub fn clustering_eval(
    table: &GeneEmbeddingTable,
    gt: &GroundTruth,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    let map = map_score(table, gt)?;
    let genes = evaluated_genes(table, gt);
    let n = genes.len();
    let labels: Vec<usize> = genes.iter().map(|(_, _, l)| *l).collect();
    let mut points = Array2::<f64>::zeros((n, table.dim()));
    for (i, (_, row, _)) in genes.iter().enumerate() {
        points.row_mut(i).assign(&table.vectors.row(*row));
    }
    let mut purities = Vec::with_capacity(restarts);
    let mut nmis = Vec::with_capacity(restarts);
    let mut aris = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let assign = kmeans(&points, k, derive_seed(seed, r as u64))?;
        purities.push(purity(&assign, &labels));
        nmis.push(nmi(&assign, &labels));
        aris.push(ari(&assign, &labels));
    }
    Ok(MetricsReport {
        k,
        restarts,
        seed,
        map,
        purity: Stat::over(&purities),
        nmi: Stat::over(&nmis),
        ari: Stat::over(&aris),
    })
}

/// One report per k, each with restart seeds derived from (seed, k).
pub fn k_sweep(
    table: &GeneEmbeddingTable,
    gt: &GroundTruth,
    ks: &[usize],
    restarts: usize,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    ks.iter()
        .map(|&k| clustering_eval(table, gt, k, restarts, derive_seed(seed, k as u64)))
        .collect()
}
