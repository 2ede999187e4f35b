//! End-to-end acceptance suite. One test per criterion, each printing a
//! single `criterion N ... PASS/FAIL` line (written straight to stdout so
//! the lines appear even for passing tests).
//!
//! Criteria 6-8 share full desk-preset training runs (5,000 iterations
//! each); those tests take hours on a single CPU core. Everything else
//! finishes in minutes.

use grape_core::dataset::Dataset;
use grape_core::embeddings::{self, GeneEmbeddingTable, Position3Mode, Source};
use grape_core::eval::{clustering_eval, map_score, GroundTruth, MetricsReport};
use grape_core::model::{GrapeModel, ModelConfig, ADAIN_EPS};
use grape_core::nn::{leaky_relu_dual, Linear, ParamId, ParamSet};
use grape_core::training::{
    self, d_loss, ema_update, g_loss_weighted, generate_fake, load_checkpoint, sample_batch,
    TrainConfig, Trainer,
};
use grape_core::{autodiff::Tape, derive_seed};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

/// Print directly to the process stdout so the line is visible even though
/// the test harness captures `println!` output of passing tests.
fn say(msg: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{msg}");
}

/// Print the per-criterion verdict line and return whether it passed.
fn verdict(idx: usize, name: &str, pass: bool, detail: &str) -> bool {
    say(&format!(
        "criterion {idx} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    pass
}

fn normal_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(rng))
}

fn table_from(names: Vec<String>, vectors: Array2<f64>) -> GeneEmbeddingTable {
    GeneEmbeddingTable::new(names, vectors, Source::External).unwrap()
}

/// Mean mAP of standard-normal embeddings over `seeds` draws, for genes
/// labeled by `labels` (complex index per gene).
fn random_embedding_map(labels: &[usize], dim: usize, seeds: u64) -> f64 {
    let names: Vec<String> = (0..labels.len()).map(|i| format!("g{i:03}")).collect();
    let gt = GroundTruth::new(
        names.iter().cloned().zip(labels.iter().copied()).collect::<BTreeMap<_, _>>(),
    );
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(9090, seed));
        let v = normal_array(&mut rng, &[labels.len(), dim])
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let table = table_from(names.clone(), v);
        total += map_score(&table, &gt).unwrap();
    }
    total / seeds as f64
}

// ---------------------------------------------------------------------------
// criterion 1: metric oracles
// ---------------------------------------------------------------------------

/// All partitions of {0..n-1} as label vectors (restricted growth strings).
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; n];
    fn rec(cur: &mut Vec<usize>, i: usize, max_used: usize, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for label in 0..=max_used + 1 {
            cur[i] = label;
            rec(cur, i + 1, max_used.max(label), out);
        }
    }
    if n == 0 {
        return vec![vec![]];
    }
    cur[0] = 0;
    rec(&mut cur, 1, 0, &mut out);
    out
}

/// Joint counts on a fixed 8x8 grid (partitions of at most 8 items).
fn joint_counts(assign: &[usize], labels: &[usize]) -> ([[u32; 8]; 8], usize, usize) {
    let mut counts = [[0u32; 8]; 8];
    let (mut k, mut l) = (0usize, 0usize);
    for (&a, &b) in assign.iter().zip(labels) {
        counts[a][b] += 1;
        k = k.max(a + 1);
        l = l.max(b + 1);
    }
    (counts, k, l)
}

/// Purity by direct counting: for each cluster take its most common label.
fn oracle_purity(assign: &[usize], labels: &[usize]) -> f64 {
    let (counts, k, l) = joint_counts(assign, labels);
    let mut best = 0u32;
    for c in 0..k {
        best += (0..l).map(|lab| counts[c][lab]).max().unwrap_or(0);
    }
    best as f64 / assign.len() as f64
}

/// NMI from explicit joint/marginal probabilities (arithmetic-mean
/// normalization, 0/0 -> 0).
fn oracle_nmi(assign: &[usize], labels: &[usize]) -> f64 {
    let n = assign.len() as f64;
    let (counts, k, l) = joint_counts(assign, labels);
    let mut pu = [0f64; 8];
    let mut pv = [0f64; 8];
    for c in 0..k {
        for lab in 0..l {
            let p = counts[c][lab] as f64 / n;
            pu[c] += p;
            pv[lab] += p;
        }
    }
    let mut mi = 0.0;
    let mut hu = 0.0;
    let mut hv = 0.0;
    for c in 0..k {
        if pu[c] > 0.0 {
            hu -= pu[c] * pu[c].ln();
        }
        for lab in 0..l {
            let joint = counts[c][lab] as f64 / n;
            if joint > 0.0 {
                mi += joint * (joint / (pu[c] * pv[lab])).ln();
            }
        }
    }
    for lab in 0..l {
        if pv[lab] > 0.0 {
            hv -= pv[lab] * pv[lab].ln();
        }
    }
    let denom = 0.5 * (hu + hv);
    if denom == 0.0 {
        0.0
    } else {
        mi / denom
    }
}

/// ARI by counting item pairs that agree/disagree between the partitions
/// (never touches a contingency table).
fn oracle_ari(assign: &[usize], labels: &[usize]) -> f64 {
    let n = assign.len();
    let (mut s11, mut s10, mut s01, mut s00) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            let same_a = assign[i] == assign[j];
            let same_b = labels[i] == labels[j];
            match (same_a, same_b) {
                (true, true) => s11 += 1.0,
                (true, false) => s10 += 1.0,
                (false, true) => s01 += 1.0,
                (false, false) => s00 += 1.0,
            }
        }
    }
    let denom = (s11 + s10) * (s10 + s00) + (s11 + s01) * (s01 + s00);
    if denom == 0.0 {
        1.0
    } else {
        2.0 * (s11 * s00 - s10 * s01) / denom
    }
}

/// AP by per-positive rank counting: for each relevant gene, its precision
/// is (#relevant at or before its rank) / rank, ranks from pairwise
/// (distance, name) comparisons instead of a sort.
fn oracle_map(table: &GeneEmbeddingTable, gt: &GroundTruth) -> f64 {
    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - dot / (na * nb)
    }
    let mut genes: Vec<(&str, Vec<f64>, usize)> = table
        .names
        .iter()
        .enumerate()
        .filter_map(|(row, name)| {
            gt.labels
                .get(name)
                .map(|&l| (name.as_str(), table.vectors.row(row).to_vec(), l))
        })
        .collect();
    genes.sort_by(|a, b| a.0.cmp(b.0));
    let mut ap_sum = 0.0;
    let mut queries = 0usize;
    for q in 0..genes.len() {
        let others: Vec<usize> = (0..genes.len()).filter(|&i| i != q).collect();
        let key = |i: usize| (cosine(&genes[q].1, &genes[i].1), genes[i].0);
        let positives: Vec<usize> =
            others.iter().copied().filter(|&i| genes[i].2 == genes[q].2).collect();
        if positives.is_empty() {
            continue;
        }
        let mut ap = 0.0;
        for &p in &positives {
            let kp = key(p);
            let rank = 1 + others
                .iter()
                .filter(|&&o| {
                    let ko = key(o);
                    ko.0 < kp.0 || (ko.0 == kp.0 && ko.1 < kp.1)
                })
                .count();
            let hits = positives
                .iter()
                .filter(|&&o| {
                    let ko = key(o);
                    ko.0 < kp.0 || (ko.0 == kp.0 && ko.1 <= kp.1)
                })
                .count();
            ap += hits as f64 / rank as f64;
        }
        ap_sum += ap / positives.len() as f64;
        queries += 1;
    }
    ap_sum / queries as f64
}

#[test]
fn c1_metric_oracles() {
    let t0 = Instant::now();
    let mut pair_count = 0u64;
    let mut worst = 0f64;
    for n in 1..=8usize {
        let parts = all_partitions(n);
        for a in &parts {
            for b in &parts {
                let dp = (grape_core::eval::purity(a, b) - oracle_purity(a, b)).abs();
                let dn = (grape_core::eval::nmi(a, b) - oracle_nmi(a, b)).abs();
                let da = (grape_core::eval::ari(a, b) - oracle_ari(a, b)).abs();
                worst = worst.max(dp).max(dn).max(da);
                pair_count += 1;
            }
        }
    }
    let clustering_ok = worst <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst_map = 0f64;
    for _ in 0..50 {
        let n = rng.gen_range(3..=12usize);
        let names: Vec<String> = (0..n).map(|i| format!("g{i:02}")).collect();
        let labels: Vec<usize> = loop {
            let l: Vec<usize> = (0..n).map(|_| rng.gen_range(0..(n / 2 + 1))).collect();
            let has_pair = (0..n).any(|i| (0..n).any(|j| j != i && l[j] == l[i]));
            if has_pair {
                break l;
            }
        };
        let vectors = normal_array(&mut rng, &[n, 4])
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let table = table_from(names.clone(), vectors);
        let gt = GroundTruth::new(names.into_iter().zip(labels).collect::<BTreeMap<_, _>>());
        let lib = map_score(&table, &gt).unwrap();
        worst_map = worst_map.max((lib - oracle_map(&table, &gt)).abs());
    }
    let map_ok = worst_map <= 1e-12;
    let elapsed = t0.elapsed();
    let in_time = elapsed.as_secs_f64() < 60.0;
    let pass = clustering_ok && map_ok && in_time;
    assert!(
        verdict(
            1,
            "metric oracles",
            pass,
            &format!(
                "{pair_count} partition pairs worst |Δ|={worst:.2e}, 50 mAP instances worst |Δ|={worst_map:.2e}, {elapsed:.1?}"
            ),
        ),
        "metric implementations must match independent oracles"
    );
}

// ---------------------------------------------------------------------------
// criterion 2: random-baseline calibration
// ---------------------------------------------------------------------------

#[test]
fn c2_random_baseline_calibration() {
    let t0 = Instant::now();
    // 14 complexes, 8 of size 8 and 6 of size 7 -> 106 genes, sizes in 5..=10
    let mut labels = Vec::new();
    for c in 0..14usize {
        let size = if c < 8 { 8 } else { 7 };
        labels.extend(std::iter::repeat(c).take(size));
    }
    assert_eq!(labels.len(), 106);
    let mean = random_embedding_map(&labels, 500, 100);
    let elapsed = t0.elapsed();
    let pass = (0.08..=0.13).contains(&mean) && elapsed.as_secs_f64() < 60.0;
    assert!(
        verdict(
            2,
            "random-baseline calibration",
            pass,
            &format!("mean mAP over 100 seeds = {mean:.4} (expected in [0.08, 0.13]), {elapsed:.1?}"),
        ),
        "random-embedding mAP must bracket the chance level of the reference label structure"
    );
}

// ---------------------------------------------------------------------------
// criterion 3: finite-difference gradient audit
// ---------------------------------------------------------------------------

/// rtol 1e-3 / atol 1e-6 agreement.
fn fd_close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-6 + 1e-3 * analytic.abs().max(fd.abs())
}

/// Central finite differences of `f` over every scalar of every parameter in
/// `ids`, compared against `grads`. Returns (checked, worst_abs_diff, ok).
fn fd_audit(
    ps: &mut ParamSet<f64>,
    ids: &[ParamId],
    grads: &[(ParamId, ArrayD<f64>)],
    f: &mut dyn FnMut(&ParamSet<f64>) -> f64,
) -> (usize, f64, bool) {
    let mut checked = 0usize;
    let mut worst = 0f64;
    let mut ok = true;
    for id in ids {
        let g = &grads.iter().find(|(gid, _)| gid == id).expect("gradient present").1;
        let len = ps.value(*id).len();
        for i in 0..len {
            let orig = ps.value(*id).as_slice().unwrap()[i];
            let h = 1e-5 * orig.abs().max(1.0);
            ps.value_mut(*id).as_slice_mut().unwrap()[i] = orig + h;
            let up = f(ps);
            ps.value_mut(*id).as_slice_mut().unwrap()[i] = orig - h;
            let down = f(ps);
            ps.value_mut(*id).as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.as_slice().unwrap()[i];
            worst = worst.max((a - fd).abs());
            if !fd_close(a, fd) {
                ok = false;
            }
            checked += 1;
        }
    }
    (checked, worst, ok)
}

#[test]
fn c3_gradient_audit() {
    let t0 = Instant::now();
    let cfg = ModelConfig::miniature();
    let mut ps = ParamSet::<f64>::new();
    let model = GrapeModel::new(&cfg, &mut ps, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = normal_array(&mut rng, &[2, cfg.channels, cfg.img_size, cfg.img_size]);
    let y = vec![0usize, 2];
    let z = vec![1usize, 2];
    let gamma = 1.0;
    let x_fake = generate_fake(&model, &ps, &x, &z).unwrap();

    let mut lines = Vec::new();
    let mut all_ok = true;
    let mut total_checked = 0usize;

    // adv_d + r1 over the discriminator parameters
    {
        let (adv, r1, grads) = d_loss(&model, &ps, &x, &y, &x_fake, &z, gamma).unwrap();
        let _ = (adv, r1);
        let ids = model.params_discriminator();
        let (n, worst, ok) = fd_audit(&mut ps, &ids, &grads, &mut |p| {
            let (a, r, _) = d_loss(&model, p, &x, &y, &x_fake, &z, gamma).unwrap();
            a + r
        });
        all_ok &= ok;
        total_checked += n;
        lines.push(format!("adv_d+r1/D {n} params worst {worst:.1e}"));
    }

    // generator-side terms, each isolated by its weight; the style loss is
    // audited only against the style encoder because its other inputs are
    // detached by construction (finite differences would see through the
    // detach and measure a different function).
    let gen_groups: Vec<(&str, Vec<ParamId>)> = vec![
        ("M", model.params_embedding()),
        ("F", model.params_mapping()),
        ("G", model.params_generator()),
        ("E", model.params_style_encoder()),
    ];
    for (term, widx) in [("adv_g", 0usize), ("cyc", 1), ("sty", 2)] {
        let w = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ][widx];
        let (_, _, _, grads) =
            g_loss_weighted(&model, &ps, &x, &z, w[0], w[1], w[2]).unwrap();
        for (gname, ids) in &gen_groups {
            if term == "sty" && *gname != "E" {
                continue;
            }
            let (n, worst, ok) = fd_audit(&mut ps, ids, &grads, &mut |p| {
                let (a, c, s, _) = g_loss_weighted(&model, p, &x, &z, w[0], w[1], w[2]).unwrap();
                a * w[0] + c * w[1] + s * w[2]
            });
            all_ok &= ok;
            total_checked += n;
            lines.push(format!("{term}/{gname} {n} params worst {worst:.1e}"));
        }
    }

    let elapsed = t0.elapsed();
    let in_time = elapsed.as_secs_f64() < 300.0;
    let pass = all_ok && in_time;
    assert!(
        verdict(
            3,
            "gradient audit",
            pass,
            &format!("{total_checked} scalars [{}], {elapsed:.1?}", lines.join("; ")),
        ),
        "analytic gradients must match central finite differences at rtol 1e-3 / atol 1e-6"
    );
}

// ---------------------------------------------------------------------------
// criterion 4: loss closed forms
// ---------------------------------------------------------------------------

#[test]
fn c4_loss_closed_forms() {
    // (a) all-zero discriminator -> logits 0 -> adv_d = 2 ln 2 at gamma 0
    let cfg = ModelConfig::miniature();
    let mut ps = ParamSet::<f64>::new();
    let model = GrapeModel::new(&cfg, &mut ps, 21).unwrap();
    for id in model.params_discriminator() {
        ps.value_mut(id).fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = normal_array(&mut rng, &[3, cfg.channels, cfg.img_size, cfg.img_size]);
    let x_fake = normal_array(&mut rng, &[3, cfg.channels, cfg.img_size, cfg.img_size]);
    let (adv, _, _) = d_loss(&model, &ps, &x, &[0, 1, 2], &x_fake, &[2, 0, 1], 0.0).unwrap();
    let two_ln2 = 2.0 * std::f64::consts::LN_2;
    let zero_ok = (adv - two_ln2).abs() <= 1e-9;

    // (b) linear "discriminator" w.x + b: the two-pass penalty (input
    // gradient, then the gradient re-injected as a constant forward
    // tangent) must produce exactly (gamma/2) * ||w||^2
    let gamma = 0.7;
    let mut lps = ParamSet::<f64>::new();
    let lin = Linear::new(&mut lps, "lin", 5, 1, &mut rng);
    lps.value_mut(lin.b).fill(0.3);
    let w_sq: f64 = lps.value(lin.w).iter().map(|v| v * v).sum();
    let xb = normal_array(&mut rng, &[4, 5]);
    // pass 1: gradient of the summed logit w.r.t. the input
    let mut tape = Tape::<f64>::new();
    let bind = lps.bind(&mut tape, |_| false);
    let xv = tape.leaf(xb.clone(), true);
    let logit = lin.forward(&mut tape, &bind, xv);
    let total = tape.sum_all(logit);
    let g = tape.grad(total, &[xv]).pop().unwrap();
    let r1_direct = 0.5 * gamma * g.iter().map(|v| v * v).sum::<f64>() / 4.0;
    // pass 2: tangent chain through the same weights (alpha > 0 leaky mask
    // path is exercised by the real model; a linear map needs none)
    let mut tape2 = Tape::<f64>::new();
    let bind2 = lps.bind(&mut tape2, |_| true);
    let xc = tape2.constant(xb);
    let tangent = tape2.constant(g);
    let yw = tape2.matmul(xc, bind2.var(lin.w));
    let _ = yw;
    let tw = tape2.matmul(tangent, bind2.var(lin.w));
    let psi = tape2.mean_all(tw);
    let r1_tangent = gamma * tape2.scalar_value(psi); // = gamma * mean ||w||^2
    let linear_ok = (r1_direct - 0.5 * gamma * w_sq).abs() <= 1e-9
        && (0.5 * r1_tangent - r1_direct).abs() <= 1e-9;

    // (c) identity generator: reconstructing x with x gives exactly zero
    let mut tape3 = Tape::<f64>::new();
    let xr = normal_array(&mut rng, &[2, 3]);
    let a = tape3.constant(xr.clone());
    let b = tape3.constant(xr);
    let l1 = tape3.l1_loss(a, b);
    let cyc_ok = tape3.scalar_value(l1) == 0.0;

    // leaky_relu_dual is part of the penalty path in the real model; pin its
    // mask semantics here so the closed form extends beyond the linear case
    let mut tape4 = Tape::<f64>::new();
    let xm = tape4.constant(ndarray::arr1(&[-2.0, 3.0]).into_dyn());
    let tm = tape4.constant(ndarray::arr1(&[1.0, 1.0]).into_dyn());
    let (_, t_out) = leaky_relu_dual(&mut tape4, 0.2, xm, tm);
    let mask_ok = tape4.value(t_out).as_slice().unwrap() == [0.2, 1.0];

    let pass = zero_ok && linear_ok && cyc_ok && mask_ok;
    assert!(
        verdict(
            4,
            "loss closed forms",
            pass,
            &format!(
                "zero-logit adv {adv:.12} vs 2ln2 {two_ln2:.12}; linear R1 Δ={:.1e}; identity cyc exact={cyc_ok}",
                (r1_direct - 0.5 * gamma * w_sq).abs()
            ),
        ),
        "loss terms must reproduce their closed forms"
    );
}

// ---------------------------------------------------------------------------
// criterion 5: AdaIN contract
// ---------------------------------------------------------------------------

#[test]
fn c5_adain_contract() {
    let (n, c, h, w) = (3usize, 4usize, 16usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut x = normal_array(&mut rng, &[n, c, h, w]);
    // channel 0 of sample 0: the constant-channel epsilon case
    for v in x.slice_mut(ndarray::s![0, 0, .., ..]).iter_mut() {
        *v = 0.75;
    }
    let style_mean = normal_array(&mut rng, &[n, c]);
    let style_std = ArrayD::from_shape_fn(IxDyn(&[n, c]), |_| rng.gen_range(0.5..2.0));

    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let mv = tape.constant(style_mean.clone());
    let sv = tape.constant(style_std.clone());
    let out = grape_core::model::adain(&mut tape, xv, mv, sv);
    let out = tape.value(out);

    let mut worst_mean = 0f64;
    let mut worst_std = 0f64;
    let mut const_ok = true;
    let area = (h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let ch = out.slice(ndarray::s![ni, ci, .., ..]);
            let mu = ch.sum() / area;
            let var = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / area;
            let sd = var.sqrt();
            let want_mean = style_mean[[ni, ci]];
            let want_std = style_std[[ni, ci]];
            if ni == 0 && ci == 0 {
                // constant input: normalized values are exactly 0, so the
                // output must equal the style mean with zero spread
                const_ok &= ch.iter().all(|v| v.is_finite());
                const_ok &= (mu - want_mean).abs() <= 1e-5 && sd <= 1e-12;
            } else {
                worst_mean = worst_mean.max((mu - want_mean).abs());
                worst_std = worst_std.max((sd - want_std).abs());
            }
        }
    }
    let pass = worst_mean <= 1e-5 && worst_std <= 1e-4 && const_ok;
    assert!(
        verdict(
            5,
            "AdaIN contract",
            pass,
            &format!(
                "worst |mean Δ|={worst_mean:.1e} (<=1e-5), worst |std Δ|={worst_std:.1e} (<=1e-4), eps={ADAIN_EPS}, constant channel ok={const_ok}"
            ),
        ),
        "AdaIN must re-statistic every channel to the style mean/std"
    );
}

// ---------------------------------------------------------------------------
// shared desk-scale runs for criteria 6-8
// ---------------------------------------------------------------------------

struct DeskRun {
    report: MetricsReport,
    pos3_map: f64,
    /// (live mAP, EMA mAP) at each checkpoint, training order.
    ckpt_maps: Vec<(f64, f64)>,
    train_secs: f64,
}

fn desk_cache() -> &'static Mutex<BTreeMap<(u64, bool), Arc<DeskRun>>> {
    static CACHE: OnceLock<Mutex<BTreeMap<(u64, bool), Arc<DeskRun>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(BTreeMap::new()))
}

/// Synthesize + preprocess + train one desk-preset run and evaluate its
/// embeddings. Results are cached so criteria 6-8 share runs.
fn desk_run(seed: u64, cycle: bool) -> Arc<DeskRun> {
    if let Some(r) = desk_cache().lock().unwrap().get(&(seed, cycle)) {
        return r.clone();
    }
    let t0 = Instant::now();
    say(&format!("[desk run seed={seed} cycle={cycle}] starting (5000 iterations)..."));
    let vocab = grape_core::synthgen::build_vocab(4, 3, seed).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let proc = tmp.path().join("proc");
    let opts = grape_core::synthgen::GenerateOptions {
        cells_per_gene: 200,
        num_batches: 2,
        seed,
        ..Default::default()
    };
    grape_core::synthgen::generate_dataset(&vocab, &raw, &opts).unwrap();
    grape_core::preprocess::preprocess_dataset(
        &raw,
        &proc,
        &grape_core::preprocess::PreprocessOptions::default(),
    )
    .unwrap();
    let ds = Dataset::load(&proc).unwrap();
    let gt = GroundTruth::from_manifest(&ds.manifest);

    let mcfg = ModelConfig::desk();
    let tcfg = TrainConfig {
        seed,
        lambda_cyc: if cycle { 1.0 } else { 0.0 },
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(&mcfg, &tcfg).unwrap();
    let run_dir = tmp.path().join("run");
    let ckpts = training::run(&mut trainer, &ds, &run_dir).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    let mut ckpt_maps = Vec::new();
    for path in &ckpts {
        let t = load_checkpoint(path).unwrap();
        let live = embeddings::extract_position1(&t.model, &t.ps, &ds.manifest).unwrap();
        let ema_ps = t.ema.apply_to(&t.ps);
        let ema = embeddings::extract_position1(&t.model, &ema_ps, &ds.manifest).unwrap();
        ckpt_maps.push((map_score(&live, &gt).unwrap(), map_score(&ema, &gt).unwrap()));
    }

    let pos1 = embeddings::extract_position1(&trainer.model, &trainer.ps, &ds.manifest).unwrap();
    let pos3 = embeddings::extract_position3(
        &trainer.model,
        &trainer.ps,
        &ds,
        200,
        Position3Mode::Real,
        seed,
    )
    .unwrap();
    let report = clustering_eval(&pos1, &gt, 4, 100, 7).unwrap();
    let pos3_map = map_score(&pos3, &gt).unwrap();
    say(&format!(
        "[desk run seed={seed} cycle={cycle}] done in {train_secs:.0}s: pos1 mAP {:.3} NMI {:.3} ARI {:.3} purity {:.3}, pos3 mAP {pos3_map:.3}",
        report.map, report.nmi.mean, report.ari.mean, report.purity.mean
    ));
    let run = Arc::new(DeskRun { report, pos3_map, ckpt_maps, train_secs });
    desk_cache().lock().unwrap().insert((seed, cycle), run.clone());
    run
}

#[test]
fn c6_desk_scale_recovery() {
    let run = desk_run(1, true);
    let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
    let random_map = random_embedding_map(&labels, ModelConfig::desk().embed_dim, 100);
    let r = &run.report;
    let quality = r.nmi.mean >= 0.60
        && r.ari.mean >= 0.40
        && r.purity.mean >= 0.70
        && r.map >= 2.0 * random_map;
    assert!(
        verdict(
            6,
            "desk-scale recovery",
            quality,
            &format!(
                "NMI {:.3} (>=0.60), ARI {:.3} (>=0.40), purity {:.3} (>=0.70), mAP {:.3} vs 2x random {:.3}; style-encoder (pos3) mAP {:.3} for context; trained in {:.0}s on 1 core",
                r.nmi.mean, r.ari.mean, r.purity.mean, r.map, 2.0 * random_map, run.pos3_map, run.train_secs
            ),
        ),
        "the desk-scale run must recover the planted complex structure"
    );
}

#[test]
fn c7_ablation_directions() {
    let seeds = [1u64, 2, 3];
    let mut cyc_better = 0usize;
    let mut pos1_better = 0usize;
    let mut details = Vec::new();
    for &s in &seeds {
        let on = desk_run(s, true);
        let off = desk_run(s, false);
        if on.report.map > off.report.map {
            cyc_better += 1;
        }
        if on.report.map >= on.pos3_map {
            pos1_better += 1;
        }
        details.push(format!(
            "seed {s}: mAP cyc-on {:.3} / cyc-off {:.3}, pos1 {:.3} / pos3 {:.3}",
            on.report.map, off.report.map, on.report.map, on.pos3_map
        ));
    }
    // hard failure only when the expected ordering reverses in all seeds
    let hard_ok = cyc_better > 0 && pos1_better > 0;
    let clean = cyc_better == seeds.len() && pos1_better == seeds.len();
    let status = if clean {
        "both orderings hold in all seeds".to_string()
    } else {
        format!(
            "cycle helps in {cyc_better}/3 seeds, pos1 >= pos3 in {pos1_better}/3 seeds (variance overlap is report-only)"
        )
    };
    assert!(
        verdict(7, "ablation directions", hard_ok, &format!("{status}; {}", details.join("; "))),
        "ablation orderings reversed in every seed"
    );
}

#[test]
fn c8_ema_behavior() {
    // closed form: k updates toward a constant leave 1 - 0.5^k
    let mut ema = ArrayD::from_elem(IxDyn(&[1]), 0.0f64);
    let live = ArrayD::from_elem(IxDyn(&[1]), 1.0f64);
    let mut closed_ok = true;
    for k in 1..=30 {
        ema_update(&mut ema, &live, 0.5).unwrap();
        closed_ok &= (ema[[0]] - (1.0 - 0.5f64.powi(k))).abs() <= 1e-12;
    }

    let run = desk_run(1, true);
    let last5: Vec<(f64, f64)> =
        run.ckpt_maps.iter().rev().take(5).rev().copied().collect();
    let std_of = |vals: &[f64]| {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    let live_std = std_of(&last5.iter().map(|p| p.0).collect::<Vec<_>>());
    let ema_std = std_of(&last5.iter().map(|p| p.1).collect::<Vec<_>>());
    let smooth = ema_std <= live_std;
    let detail = format!(
        "0.5^k closed form ok={closed_ok}; mAP std over last {} checkpoints: EMA {ema_std:.4} vs live {live_std:.4} ({})",
        last5.len(),
        if smooth { "EMA smoother" } else { "soft criterion not met, reported" }
    );
    // the smoothing half is a soft criterion: reported, never a failure
    assert!(
        verdict(8, "EMA behavior", closed_ok, &detail),
        "EMA recursion must match its closed form"
    );
}

// ---------------------------------------------------------------------------
// criterion 9: determinism & persistence
// ---------------------------------------------------------------------------

/// One full short pipeline: synth -> train 100 iters -> extract -> eval.
/// Returns digests of every artifact produced.
fn short_pipeline(seed: u64) -> Vec<(String, String)> {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let vocab = grape_core::synthgen::build_vocab(4, 3, seed).unwrap();
    let opts = grape_core::synthgen::GenerateOptions {
        cells_per_gene: 40,
        num_batches: 2,
        seed,
        ..Default::default()
    };
    grape_core::synthgen::generate_dataset(&vocab, &raw, &opts).unwrap();
    let mut digests =
        vec![("dataset".to_string(), grape_core::dataset::dataset_digest(&raw).unwrap())];
    let ds = Dataset::load(&raw).unwrap();

    let mcfg = ModelConfig::desk();
    let tcfg = TrainConfig {
        seed,
        total_iters: 100,
        checkpoint_interval: 50,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(&mcfg, &tcfg).unwrap();
    let run_dir = tmp.path().join("run");
    let ckpts = training::run(&mut trainer, &ds, &run_dir).unwrap();
    for c in &ckpts {
        digests.push((
            c.file_name().unwrap().to_string_lossy().into_owned(),
            grape_core::dataset::file_digest(c).unwrap(),
        ));
    }
    digests.push((
        "loss_log".into(),
        grape_core::dataset::file_digest(&training::loss_log_path(&run_dir)).unwrap(),
    ));

    let gt = GroundTruth::from_manifest(&ds.manifest);
    for (tag, table) in [
        ("pos1", embeddings::extract_position1(&trainer.model, &trainer.ps, &ds.manifest).unwrap()),
        ("pos2", embeddings::extract_position2(&trainer.model, &trainer.ps, &ds.manifest).unwrap()),
        (
            "pos3",
            embeddings::extract_position3(
                &trainer.model,
                &trainer.ps,
                &ds,
                40,
                Position3Mode::Real,
                seed,
            )
            .unwrap(),
        ),
    ] {
        let path = tmp.path().join(format!("{tag}.csv"));
        embeddings::write_table(&path, &table).unwrap();
        digests.push((tag.into(), grape_core::dataset::file_digest(&path).unwrap()));
        if tag == "pos1" {
            let report = clustering_eval(&table, &gt, 4, 20, seed).unwrap();
            digests.push(("eval".into(), serde_json::to_string(&report).unwrap()));
        }
    }
    digests
}

#[test]
fn c9_determinism_and_persistence() {
    let t0 = Instant::now();
    let a = short_pipeline(5);
    let b = short_pipeline(5);
    let rerun_ok = a == b;

    // checkpoint round-trip: the reloaded trainer reproduces generator
    // output bit-for-bit
    let vocab = grape_core::synthgen::build_vocab(2, 2, 8).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let opts = grape_core::synthgen::GenerateOptions {
        cells_per_gene: 6,
        num_batches: 1,
        seed: 8,
        img_size: 16,
        ..Default::default()
    };
    grape_core::synthgen::generate_dataset(&vocab, &tmp.path().join("d"), &opts).unwrap();
    let ds = Dataset::load(&tmp.path().join("d")).unwrap();
    let mcfg = ModelConfig {
        img_size: 16,
        num_perturbations: 5,
        embed_dim: 8,
        style_dim: 4,
        base_width: 2,
        max_width: 4,
        map_hidden: 8,
        ..ModelConfig::desk()
    };
    let tcfg = TrainConfig { seed: 8, total_iters: 5, batch_size: 4, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(&mcfg, &tcfg).unwrap();
    for _ in 0..3 {
        trainer.step(&ds).unwrap();
    }
    let ckpt = tmp.path().join("ck.bin");
    training::save_checkpoint(&ckpt, &trainer).unwrap();
    let reloaded = load_checkpoint(&ckpt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let batch = sample_batch(&ds, 4, false, &mut rng).unwrap();
    let x = Trainer::batch_pixels(&ds, &batch.cells);
    let fake_a = generate_fake(&trainer.model, &trainer.ps, &x, &batch.z).unwrap();
    let fake_b = generate_fake(&reloaded.model, &reloaded.ps, &x, &batch.z).unwrap();
    let bits_ok = fake_a
        .iter()
        .zip(fake_b.iter())
        .all(|(p, q)| p.to_bits() == q.to_bits())
        && reloaded.iter == trainer.iter;

    let pass = rerun_ok && bits_ok;
    assert!(
        verdict(
            9,
            "determinism & persistence",
            pass,
            &format!(
                "{} artifacts digest-identical across reruns: {rerun_ok}; checkpoint round-trip bit-exact: {bits_ok}; {:.1?}",
                a.len(),
                t0.elapsed()
            ),
        ),
        "fixed-seed reruns and checkpoint round-trips must be exact"
    );
}
