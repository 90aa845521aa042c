//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! timing; the process fails if any criterion fails.
//!
//! Reference values come from oracles written here, independently of the
//! library code they check.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lipvli_core::dataset::{partition_subject_dependent, partition_subject_independent, Language};
use lipvli_core::eval::{accuracy, attribute_errors, REPORT_SCHEMA};
use lipvli_core::fusion::{
    baseline_decisions, decision_identities, fuse, rank_row, simulate_scores, ScoreMatrix, SimulationConfig,
};
use lipvli_core::geometry::{
    cosine_distance, euclidean, extract_features, manhattan, FeatureParams, LandmarkSequence, Metric, MetricSet,
    Point, LANDMARK_SCHEMA, LANDMARKS,
};
use lipvli_core::preprocess::{canny, laplacian, sobel, to_grayscale, Frame, FrameTensor};
use lipvli_core::svm::{grid_search, smo_train, Grid, Kernel, SearchOptions, SmoParams, SvmBinaryModel};
use lipvli_core::synth::{synthetic_manifest, synthetic_sequence};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. Partition arithmetic

fn partitions() -> Outcome {
    let m = synthetic_manifest(8, 32, true);
    let dep = partition_subject_dependent(&m, 7).map_err(|e| e.to_string())?;
    ensure(dep.train.len() == 1024 && dep.validation.is_empty() && dep.test.len() == 256, || {
        format!("subject-dependent sizes {}/{}/{}", dep.train.len(), dep.validation.len(), dep.test.len())
    })?;
    dep.check_partition(&m)?;
    let ind = partition_subject_independent(&m, 7).map_err(|e| e.to_string())?;
    ensure(ind.train.len() == 960 && ind.validation.len() == 160 && ind.test.len() == 160, || {
        format!("subject-independent sizes {}/{}/{}", ind.train.len(), ind.validation.len(), ind.test.len())
    })?;
    ind.check_partition(&m)?;
    let subjects = |ids: &[String]| -> HashSet<String> {
        ids.iter().map(|id| m.get(id).unwrap().subject_id.clone()).collect()
    };
    let (a, b, c) = (subjects(&ind.train), subjects(&ind.validation), subjects(&ind.test));
    ensure(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c), || "subjects shared across parts".into())?;
    Ok("1024/256 and 960/160/160, subject-disjoint".into())
}

// ---------------------------------------------------------------------------
// 2. Metrics

/// Euclidean, manhattan and cosine distance from polar coordinates.
fn metric_oracle(p: (f64, f64), q: (f64, f64)) -> (f64, f64, Option<f64>) {
    let (dx, dy) = (p.0 - q.0, p.1 - q.1);
    let e = (dx * dx + dy * dy).sqrt();
    let m = dx.abs() + dy.abs();
    let zero = (p.0 == 0.0 && p.1 == 0.0) || (q.0 == 0.0 && q.1 == 0.0);
    let c = (!zero).then(|| 1.0 - (p.1.atan2(p.0) - q.1.atan2(q.0)).cos());
    (e, m, c)
}

fn metrics() -> Outcome {
    // Hand-written cases with exact answers, then generated cases checked
    // against the polar-form oracle.
    let mut table: Vec<((f64, f64), (f64, f64), f64, f64, f64)> = vec![
        ((0.0, 0.0), (0.3, 0.4), 0.5, 0.7, 1.0),
        ((0.1, 0.1), (0.4, 0.5), 0.5, 0.7, 1.0 - 0.09 / (0.02f64.sqrt() * 0.41f64.sqrt())),
        ((0.5, 0.0), (0.0, 0.5), 0.5f64.sqrt(), 1.0, 1.0),
        ((0.2, 0.2), (0.2, 0.2), 0.0, 0.0, 0.0),
        ((1.0, 0.0), (0.25, 0.0), 0.75, 0.75, 0.0),
        ((0.0, 1.0), (1.0, 1.0), 1.0, 1.0, 1.0 - 0.5f64.sqrt()),
        ((0.6, 0.8), (0.0, 0.0), 1.0, 1.4, 1.0),
        ((0.3, 0.3), (0.6, 0.6), 0.18f64.sqrt(), 0.6, 0.0),
        ((1.0, 1.0), (0.0, 0.0), 2f64.sqrt(), 2.0, 1.0),
        ((0.0, 0.5), (0.0, 0.25), 0.25, 0.25, 0.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    while table.len() < 50 {
        let p = (rng.gen::<f64>(), rng.gen::<f64>());
        let q = (rng.gen::<f64>(), rng.gen::<f64>());
        let (e, m, c) = metric_oracle(p, q);
        table.push((p, q, e, m, c.unwrap()));
    }
    let pt = |(x, y): (f64, f64)| Point { x, y };
    for (i, &(p, q, e, m, c)) in table.iter().enumerate() {
        let got = (
            euclidean(pt(p), pt(q)).unwrap(),
            manhattan(pt(p), pt(q)).unwrap(),
            cosine_distance(pt(p), pt(q)).unwrap().value,
        );
        ensure((got.0 - e).abs() <= 1e-12 && (got.1 - m).abs() <= 1e-12 && (got.2 - c).abs() <= 1e-12, || {
            format!("case {i}: {p:?} {q:?} expected ({e}, {m}, {c}), got {got:?}")
        })?;
    }

    for _ in 0..10_000 {
        let mut draw = || pt((rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let (p, q, r) = (draw(), draw(), draw());
        for f in [euclidean, manhattan] {
            let (pq, qp, pr, rq, pp) = (f(p, q).unwrap(), f(q, p).unwrap(), f(p, r).unwrap(), f(r, q).unwrap(), f(p, p).unwrap());
            ensure(pq >= 0.0 && pq == qp && pp == 0.0 && pq <= pr + rq + 1e-12, || format!("axioms fail at {p:?} {q:?} {r:?}"))?;
            ensure(p == q || pq > 0.0, || "distinct points at distance 0".into())?;
        }
        let c = cosine_distance(p, q).unwrap().value;
        let lambda = rng.gen_range(0.1..3.0);
        let scaled = Point { x: lambda * p.x, y: lambda * p.y };
        ensure((0.0..=2.0).contains(&c) && c == cosine_distance(q, p).unwrap().value, || "cosine range/symmetry".into())?;
        ensure(cosine_distance(p, scaled).unwrap().value <= 1e-12, || "cosine scale invariance".into())?;
    }
    Ok("50 fixtures to 1e-12, axioms on 10,000 random pairs".into())
}

// ---------------------------------------------------------------------------
// 3. Feature layout

fn constant_sequence(n: usize, p: Point) -> LandmarkSequence {
    LandmarkSequence::new("c", 25.0, vec![[p; LANDMARKS]; n]).unwrap()
}

fn features() -> Outcome {
    let all = Metric::ALL;
    let strategy = (2usize..60, 2usize..60, 0usize..LANDMARKS, 1usize..8, any::<u64>());
    let mut runner = TestRunner::new(PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&strategy, |(len, frames, pivot, mask, seed)| {
            let chosen: Vec<Metric> = all.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, m)| *m).collect();
            let metrics = MetricSet::new(chosen.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = (0..len)
                .map(|_| std::array::from_fn(|_| Point { x: rng.gen(), y: rng.gen() }))
                .collect();
            let seq = LandmarkSequence::new("r", 25.0, raw).unwrap();
            let params = FeatureParams { pivot, metrics, frames };
            let v = extract_features(&seq, &params).unwrap();
            prop_assert_eq!(v.values.len(), frames * 7 * chosen.len());
            prop_assert!(v.values.iter().all(|x| x.is_finite()));
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let seq = constant_sequence(40, Point { x: 0.4, y: 0.6 });
    let metrics = MetricSet::new(vec![Metric::Euclidean, Metric::Manhattan]).unwrap();
    for pivot in 0..LANDMARKS {
        let v = extract_features(&seq, &FeatureParams { pivot, metrics: metrics.clone(), frames: 33 }).unwrap();
        ensure(v.values.len() == 33 * 7 * 2 && v.values.iter().all(|&x| x == 0.0), || "identical landmarks gave non-zero features".into())?;
    }
    Ok("1,000 random layouts, zero vector for identical landmarks".into())
}

// ---------------------------------------------------------------------------
// 4. SMO

fn params(c: f64, kernel: Kernel, tolerance: f64) -> SmoParams {
    SmoParams { c, kernel, tolerance, max_iter: 1_000_000 }
}

/// Worst violation of the per-point KKT conditions at the trained model.
fn kkt_audit(model: &SvmBinaryModel, x: &Array2<f64>, y: &[f64]) -> f64 {
    let mut alpha = vec![0.0; y.len()];
    for (&i, &coef) in model.training_indices().iter().zip(model.coefficients()) {
        alpha[i] = coef.abs();
    }
    let c = model.c();
    let scale = c.max(1.0) * 1e-9;
    let mut worst: f64 = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let yf = y[i] * model.decision_value(row.as_slice().unwrap()).unwrap();
        let v = if alpha[i] <= scale {
            (1.0 - yf).max(0.0)
        } else if alpha[i] >= c - scale {
            (yf - 1.0).max(0.0)
        } else {
            (yf - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

fn blobs(rng: &mut ChaCha8Rng, n: usize, dim: usize, gap: f64) -> (Array2<f64>, Vec<f64>) {
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let x = Array2::from_shape_fn((n, dim), |(i, d)| {
        let shift = if d == 0 { y[i] * gap / 2.0 } else { 0.0 };
        shift + rng.gen_range(-1.0..1.0)
    });
    (x, y)
}

/// Solves the dual exactly by trying every assignment of points to
/// {alpha = 0, 0 < alpha < C, alpha = C} and keeping the one that satisfies
/// the KKT conditions. Returns (alpha, b) when b is pinned by a free vector.
fn qp_oracle(k: &Array2<f64>, y: &[f64], c: f64) -> Option<(Vec<f64>, Option<f64>)> {
    let n = y.len();
    let tol = 1e-9;
    'assign: for code in 0..3usize.pow(n as u32) {
        let state: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 2 { c } else { 0.0 }).collect();
        let b;
        if free.is_empty() {
            if (0..n).map(|i| alpha[i] * y[i]).sum::<f64>().abs() > tol {
                continue;
            }
            // b ranges over an interval; take any feasible point.
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..n {
                let g: f64 = (0..n).map(|j| alpha[j] * y[j] * k[[i, j]]).sum();
                // y_i (g + b) >= 1 for alpha = 0, <= 1 for alpha = C.
                let bound = y[i] - g;
                let at_least = (state[i] == 0) == (y[i] > 0.0);
                if at_least {
                    lo = lo.max(bound);
                } else {
                    hi = hi.min(bound);
                }
            }
            if lo > hi + tol {
                continue;
            }
            return Some((alpha, None));
        } else {
            let m = free.len() + 1;
            let mut a = vec![vec![0.0; m + 1]; m];
            for (r, &i) in free.iter().enumerate() {
                for (col, &j) in free.iter().enumerate() {
                    a[r][col] = y[j] * k[[i, j]];
                }
                a[r][m - 1] = 1.0;
                let fixed: f64 = (0..n).filter(|&j| state[j] == 2).map(|j| c * y[j] * k[[i, j]]).sum();
                a[r][m] = y[i] - fixed;
            }
            for (col, &j) in free.iter().enumerate() {
                a[m - 1][col] = y[j];
            }
            a[m - 1][m] = -(0..n).filter(|&j| state[j] == 2).map(|j| c * y[j]).sum::<f64>();
            let sol = gauss(a)?;
            for (col, &j) in free.iter().enumerate() {
                if !(sol[col] > tol && sol[col] < c - tol) {
                    continue 'assign;
                }
                alpha[j] = sol[col];
            }
            b = sol[m - 1];
        }
        for i in 0..n {
            let f: f64 = (0..n).map(|j| alpha[j] * y[j] * k[[i, j]]).sum::<f64>() + b;
            let ok = match state[i] {
                0 => y[i] * f >= 1.0 - 1e-7,
                2 => y[i] * f <= 1.0 + 1e-7,
                _ => true,
            };
            if !ok {
                continue 'assign;
            }
        }
        return Some((alpha, Some(b)));
    }
    None
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn gauss(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let m = a.len();
    for col in 0..m {
        let p = (col..m).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[p][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, p);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for cc in col..=m {
                    a[r][cc] -= f * a[col][cc];
                }
            }
        }
    }
    Some((0..m).map(|r| a[r][m] / a[r][r]).collect())
}

fn smo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for p in 0..100 {
        let n = rng.gen_range(10..=200);
        let separable = p % 2 == 0;
        let dim = rng.gen_range(2..6);
        let (x, y) = blobs(&mut rng, n, dim, if separable { 4.0 } else { 0.5 });
        let kernel = match p % 4 {
            0 | 1 => Kernel::Linear,
            _ => Kernel::Rbf { gamma: 0.5 },
        };
        let c = [0.1, 1.0, 10.0, 100.0][rng.gen_range(0..4)];
        let model = smo_train(x.view(), &y, &params(c, kernel, 1e-3)).map_err(|e| format!("problem {p}: {e}"))?;
        let v = kkt_audit(&model, &x, &y);
        ensure(v <= 1e-3, || format!("problem {p} (n={n}, C={c}, {kernel:?}): KKT violation {v:.2e}"))?;
        worst = worst.max(v);
    }

    let kernel = Kernel::Rbf { gamma: 0.7 };
    let mut compared = 0;
    for p in 0..300 {
        let n = rng.gen_range(2..=6);
        let mut y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let c = [0.5, 1.0, 5.0][p % 3];
        let k = Array2::from_shape_fn((n, n), |(i, j)| {
            kernel.eval(x.row(i).as_slice().unwrap(), x.row(j).as_slice().unwrap())
        });
        let (alpha, b) = qp_oracle(&k, &y, c).ok_or_else(|| format!("oracle found no solution for problem {p}"))?;
        let model = smo_train(x.view(), &y, &params(c, kernel, 1e-10)).map_err(|e| e.to_string())?;
        for t in 0..20 {
            let q: Vec<f64> = if t < n { x.row(t).to_vec() } else { vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)] };
            let wx: f64 = (0..n).map(|j| alpha[j] * y[j] * kernel.eval(x.row(j).as_slice().unwrap(), &q)).sum();
            let got = model.decision_value(&q).unwrap();
            match b {
                Some(b) => ensure((got - (wx + b)).abs() <= 1e-6, || {
                    format!("problem {p}: decision {got} vs oracle {}", wx + b)
                })?,
                // Bias not unique: compare the kernel expansion only.
                None => ensure((got - model.bias() - wx).abs() <= 1e-6, || format!("problem {p}: expansion mismatch"))?,
            }
        }
        compared += 1;
    }

    let x = ndarray::array![[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
    let y = [1.0, 1.0, -1.0, -1.0];
    let model = smo_train(x.view(), &y, &params(100.0, Kernel::Rbf { gamma: 1.0 }, 1e-3)).map_err(|e| e.to_string())?;
    for (row, &label) in x.rows().into_iter().zip(&y) {
        ensure(model.decision_value(row.as_slice().unwrap()).unwrap() * label > 0.0, || "XOR point misclassified".into())?;
    }
    Ok(format!("KKT worst {worst:.1e} on 100 problems, {compared} QP oracle matches, XOR separated"))
}

// ---------------------------------------------------------------------------
// 5. Grid search

fn grid() -> Outcome {
    let m = synthetic_manifest(2, 20, true);
    let seqs: Vec<LandmarkSequence> = m.records().iter().map(|r| synthetic_sequence(r, 250, 0)).collect();
    let labels: Vec<String> = m.records().iter().map(|r| r.language.name().to_string()).collect();
    let grid = Grid::default();
    let opts = SearchOptions::default();
    let start = Instant::now();
    let a = grid_search(&seqs[..], &labels, &grid, &opts).map_err(|e| e.to_string())?;
    let first = start.elapsed();
    let expected = grid.len() * 9;
    ensure(a.full_table.len() + a.invalid.len() == expected, || {
        format!("{} rows + {} invalid != {expected}", a.full_table.len(), a.invalid.len())
    })?;
    let b = grid_search(&seqs[..], &labels, &grid, &opts).map_err(|e| e.to_string())?;
    ensure(a.to_json() == b.to_json() && a.to_csv() == b.to_csv(), || "rerun differs".into())?;
    ensure(first < Duration::from_secs(30), || format!("first run took {:.1} s", first.as_secs_f64()))?;
    Ok(format!(
        "{} samples, {} rows ({} invalid) = {} configs x 9, rerun identical, first run {:.1} s",
        seqs.len(),
        a.full_table.len(),
        a.invalid.len(),
        grid.len(),
        first.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 6. Fusion

/// Walks ranks one at a time by repeated maximum search.
fn fuse_oracle(scores: &[f64], langs: &[Language], pred: Language, k: usize) -> (usize, usize, bool) {
    let mut taken = vec![false; scores.len()];
    let mut first = None;
    for r in 1..=k {
        let mut best: Option<usize> = None;
        for (c, &s) in scores.iter().enumerate() {
            if !taken[c] && best.is_none_or(|b| s > scores[b]) {
                best = Some(c);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        first.get_or_insert(b);
        if langs[b] == pred {
            return (b, r, false);
        }
    }
    (first.unwrap(), 1, true)
}

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut k1 = 0;
    for inst in 0..10_000 {
        let n = rng.gen_range(1..=20);
        let n_lang = rng.gen_range(1..=4);
        let probes = rng.gen_range(1..=3);
        let labels: Vec<String> = (0..n).map(|c| format!("id{c}")).collect();
        let langs: Vec<Language> = (0..n).map(|_| Language::ALL[rng.gen_range(0..n_lang)]).collect();
        // Few distinct values, so ties are common.
        let flat: Vec<f64> = (0..n * probes).map(|_| f64::from(rng.gen_range(0..6u8))).collect();
        let probe_ids: Vec<String> = (0..probes).map(|p| format!("p{p}")).collect();
        let preds: BTreeMap<String, Language> =
            probe_ids.iter().map(|p| (p.clone(), Language::ALL[rng.gen_range(0..n_lang)])).collect();
        let gallery: BTreeMap<String, Language> = labels.iter().cloned().zip(langs.iter().copied()).collect();
        let s = ScoreMatrix::new(probe_ids.clone(), labels.clone(), flat.clone()).unwrap();
        let k = rng.gen_range(1..=n);
        let got = fuse(&s, &preds, &gallery, k).map_err(|e| e.to_string())?;
        for (i, d) in got.iter().enumerate() {
            let (c, r, fb) = fuse_oracle(&flat[i * n..(i + 1) * n], &langs, preds[&probe_ids[i]], k);
            ensure(d.predicted_identity == labels[c] && d.rank_of_choice == r && d.fallback == fb, || {
                format!("instance {inst} probe {i}: got {d:?}, oracle ({}, {r}, {fb})", labels[c])
            })?;
        }
        let one = fuse(&s, &preds, &gallery, 1).map_err(|e| e.to_string())?;
        ensure(decision_identities(&one) == baseline_decisions(&s), || format!("instance {inst}: k=1 differs from rank-1"))?;
        k1 += 1;
    }
    Ok(format!("10,000 random instances match the oracle, k=1 equals rank-1 on {k1}"))
}

// ---------------------------------------------------------------------------
// 7 and 8. Simulator

struct SimRun {
    baseline: f64,
    fused: f64,
    batch: lipvli_core::fusion::SimulatedBatch,
    decisions: Vec<lipvli_core::fusion::FusionDecision>,
}

fn sim(lang_acc: f64) -> Result<SimRun, String> {
    let cfg = SimulationConfig {
        n_subjects: 256,
        n_languages: 8,
        n_probes: 10_000,
        top1_acc: 0.496,
        topk_hit: 0.80,
        k: 8,
        lang_acc,
        seed: 2024,
    };
    let batch = simulate_scores(&cfg).map_err(|e| e.to_string())?;
    let truth: Vec<String> = batch.truth.iter().map(|t| t.identity.clone()).collect();
    let baseline = accuracy(&baseline_decisions(&batch.scores), &truth).map_err(|e| e.to_string())?;
    let decisions = fuse(&batch.scores, &batch.language_pred, &batch.subject_language, 8).map_err(|e| e.to_string())?;
    let fused = accuracy(&decision_identities(&decisions), &truth).map_err(|e| e.to_string())?;
    Ok(SimRun { baseline, fused, batch, decisions })
}

fn simulator() -> Outcome {
    let a = sim(0.86)?;
    let b = sim(0.27)?;
    ensure(a.fused >= a.baseline + 0.05, || format!("(a) fused {:.4} vs baseline {:.4}", a.fused, a.baseline))?;
    ensure(b.fused <= b.baseline, || format!("(b) fused {:.4} vs baseline {:.4}", b.fused, b.baseline))?;
    Ok(format!(
        "(a) {:.4} -> {:.4}, (b) {:.4} -> {:.4}",
        a.baseline, a.fused, b.baseline, b.fused
    ))
}

fn attribution() -> Outcome {
    let run = sim(0.86)?;
    let ranks: Vec<_> = (0..run.batch.scores.n_probes()).map(|i| rank_row(&run.batch.scores, i)).collect();
    let a = attribute_errors(&run.decisions, &ranks, &run.batch.truth, 8).map_err(|e| e.to_string())?;

    // Independent count straight from the score rows.
    let (mut wrong, mut lw, mut absent, mut outranked) = (0u64, 0u64, 0u64, 0u64);
    for (i, (d, t)) in run.decisions.iter().zip(&run.batch.truth).enumerate() {
        if d.predicted_identity == t.identity {
            continue;
        }
        wrong += 1;
        let row = run.batch.scores.row(i);
        let col = run.batch.scores.class_labels().iter().position(|l| *l == t.identity).unwrap();
        let better = row.iter().enumerate().filter(|&(c, &s)| s > row[col] || (s == row[col] && c < col)).count();
        if d.predicted_language != t.language {
            lw += 1;
        } else if better + 1 > 8 {
            absent += 1;
        } else {
            outranked += 1;
        }
    }
    ensure(a.is_partition() && a.total_errors == lw + absent + outranked, || "categories do not partition".into())?;
    ensure((a.total_errors, a.lang_wrong, a.lang_correct_id_absent, a.lang_correct_outranked) == (wrong, lw, absent, outranked), || {
        format!("library {a:?} vs recount ({wrong}, {lw}, {absent}, {outranked})")
    })?;
    let share = a.id_absent_share().unwrap();
    ensure((0.4..=0.8).contains(&share), || format!("identity-absent share {share:.4}"))?;
    Ok(format!(
        "{} errors = {} + {} + {}, identity-absent share {share:.4}",
        a.total_errors, a.lang_wrong, a.lang_correct_id_absent, a.lang_correct_outranked
    ))
}

// ---------------------------------------------------------------------------
// 9. Preprocessing

fn gray5(rows: [[u8; 5]; 5]) -> Frame {
    Frame::gray(5, 5, rows.concat()).unwrap()
}

fn preprocessing() -> Outcome {
    // Expected outputs computed by hand (replicate borders, 3x3 kernels).
    let step = gray5([[0, 0, 0, 10, 10]; 5]);
    let impulse = gray5([[0; 5], [0; 5], [0, 0, 10, 0, 0], [0; 5], [0; 5]]);
    let corner = gray5([[10, 0, 0, 0, 0], [0; 5], [0; 5], [0; 5], [0; 5]]);
    let cases: [(&str, &Frame, [[u8; 5]; 5], [[u8; 5]; 5]); 3] = [
        ("step", &step, [[0, 0, 40, 40, 0]; 5], [[0, 0, 10, 10, 0]; 5]),
        (
            "impulse",
            &impulse,
            [[0; 5], [0, 14, 20, 14, 0], [0, 20, 0, 20, 0], [0, 14, 20, 14, 0], [0; 5]],
            [[0; 5], [0, 0, 10, 0, 0], [0, 10, 40, 10, 0], [0, 0, 10, 0, 0], [0; 5]],
        ),
        (
            "corner",
            &corner,
            [[42, 32, 0, 0, 0], [32, 14, 0, 0, 0], [0; 5], [0; 5], [0; 5]],
            [[20, 10, 0, 0, 0], [10, 0, 0, 0, 0], [0; 5], [0; 5], [0; 5]],
        ),
    ];
    for (name, f, s, l) in cases {
        ensure(sobel(f).unwrap().pixels() == s.concat().as_slice(), || format!("sobel {name}: {:?}", sobel(f).unwrap().pixels()))?;
        ensure(laplacian(f).unwrap().pixels() == l.concat().as_slice(), || format!("laplacian {name}: {:?}", laplacian(f).unwrap().pixels()))?;
    }

    let gray_table: [([u8; 3], u8); 8] = [
        ([0, 0, 0], 0),
        ([255, 255, 255], 255),
        ([255, 0, 0], 76),
        ([0, 255, 0], 150),
        ([0, 0, 255], 29),
        ([100, 150, 200], 141),
        ([10, 20, 30], 18),
        ([128, 128, 128], 128),
    ];
    let rgb = Frame::new(8, 1, 3, gray_table.iter().flat_map(|(p, _)| *p).collect()).unwrap();
    let expected: Vec<u8> = gray_table.iter().map(|(_, g)| *g).collect();
    ensure(to_grayscale(&rgb).unwrap().pixels() == expected.as_slice(), || "grayscale table".into())?;

    let square = Frame::gray_from_fn(64, 64, |x, y| if (20..44).contains(&x) && (20..44).contains(&y) { 200 } else { 30 });
    let edges = canny(&square, 0.1, 0.3).unwrap();
    let (components, closed) = contour_check(edges.pixels(), 64, 64);
    ensure(components == 1 && closed, || format!("canny: {components} components, closed={closed}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 0..100 {
        let dims: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..6)).collect();
        let n: usize = dims.iter().product();
        let tensor = match t % 3 {
            0 => FrameTensor::from_u8(dims, (0..n).map(|_| rng.gen()).collect()),
            1 => FrameTensor::from_f32(dims, (0..n).map(|_| f32::from_bits(rng.gen())).collect()),
            _ => FrameTensor::from_f64(dims, (0..n).map(|_| f64::from_bits(rng.gen())).collect()),
        }
        .unwrap();
        let bytes = tensor.to_bytes();
        let back = FrameTensor::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back.to_bytes() == bytes && back.dims() == tensor.dims(), || format!("tensor {t} round trip"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("t.lbtf");
    let tensor = FrameTensor::from_f64(vec![2, 3], vec![0.5, -0.0, f64::NAN, 1e300, -7.25, f64::MIN_POSITIVE]).unwrap();
    lipvli_core::preprocess::write_tensor(&tensor, &path).map_err(|e| e.to_string())?;
    let back = lipvli_core::preprocess::read_tensor(&path).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == tensor.to_bytes(), || "file round trip".into())?;
    Ok("3 convolution fixtures exact, grayscale table exact, closed canny contour, 100 tensors bit-identical".into())
}

/// Number of 8-connected edge components, and whether the edge set
/// separates the image center from the border.
fn contour_check(px: &[u8], w: usize, h: usize) -> (usize, bool) {
    let mut label = vec![0usize; w * h];
    let mut components = 0;
    for start in 0..w * h {
        if px[start] == 0 || label[start] != 0 {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        label[start] = components;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                        let j = ny as usize * w + nx as usize;
                        if px[j] != 0 && label[j] == 0 {
                            label[j] = components;
                            stack.push(j);
                        }
                    }
                }
            }
        }
    }
    // 4-connected flood fill of background from the center.
    let mut seen = vec![false; w * h];
    let mut stack = vec![(h / 2) * w + w / 2];
    let mut leaked = px[stack[0]] != 0;
    while let Some(i) = stack.pop() {
        if seen[i] || px[i] != 0 {
            continue;
        }
        seen[i] = true;
        let (x, y) = (i % w, i / w);
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            leaked = true;
            break;
        }
        stack.extend([i - 1, i + 1, i - w, i + w]);
    }
    (components, !leaked)
}

// ---------------------------------------------------------------------------
// 10. End to end through the binary

fn lipvli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_lipvli"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("LIPVLI_OUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.code() == Some(0), || {
        format!("lipvli {} exited {:?}: {}", args[0], status.status.code(), String::from_utf8_lossy(&status.stderr))
    })
}

fn schema_check(schema: &str, doc: &Path) -> Result<(), String> {
    let schema: serde_json::Value = serde_json::from_str(schema).map_err(|e| e.to_string())?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(doc).map_err(|e| e.to_string())?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    ensure(errors.is_empty(), || format!("{} fails its schema: {}", doc.display(), errors.join("; ")))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |s: &str| dir.path().join(s);
    let p = |s: &str| d(s).to_string_lossy().into_owned();
    lipvli(&d("data"), &["synth", "--languages", "3", "--subjects-per-language", "6", "--frames", "120"])?;
    let manifest = p("data/manifest.json");
    lipvli(&d("validate"), &["validate", "--manifest", &manifest, "--check-landmarks"])?;
    lipvli(&d("split"), &["partition", "--manifest", &manifest, "--protocol", "subject_dependent", "--seed", "3"])?;
    let split = p("split/split.json");
    lipvli(&d("feat"), &["features", "--manifest", &manifest, "--split", &split, "--part", "test", "--frames", "120"])?;
    let tiny = ["--kernel", "linear,rbf:0.01", "--c", "1,10", "--pivot", "0", "--metrics", "all", "--frames", "120", "--k-min", "2", "--k-max", "3"];
    let train = |out: &str, target: &str| {
        let mut a = vec!["train", "--manifest", &manifest, "--split", &split, "--target", target];
        a.extend(tiny);
        lipvli(&d(out), &a)
    };
    train("id", "identity")?;
    train("lang", "language")?;
    let features = p("feat/features.lbtf");
    lipvli(&d("pid"), &["predict", "--model", &p("id/model.json"), "--features", &features])?;
    lipvli(&d("plang"), &["predict", "--model", &p("lang/model.json"), "--features", &features])?;
    let (ids, langs) = (p("pid/scores.csv"), p("plang/scores.csv"));
    lipvli(&d("fuse"), &["fuse", "--identity-scores", &ids, "--language-scores", &langs, "--manifest", &manifest, "--k", "3"])?;
    lipvli(
        &d("eval"),
        &[
            "evaluate", "--identity-scores", &ids, "--language-scores", &langs, "--decisions", &p("fuse/decisions.json"),
            "--manifest", &manifest, "--k", "3",
        ],
    )?;

    schema_check(REPORT_SCHEMA, &d("eval/report.json"))?;
    schema_check(LANDMARK_SCHEMA, &d("data/landmarks/S000_1.json"))?;
    for run in ["data/run_synth.json", "split/run_partition.json", "id/run_train.json", "eval/run_evaluate.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d(run)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(v["config_hash"].as_str().is_some_and(|h| h.len() == 64), || format!("{run}: no config hash"))?;
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d("eval/report.json")).unwrap()).map_err(|e| e.to_string())?;
    let m = &report["models"][0];
    Ok(format!(
        "all stages exit 0, report schema-valid (identification {}, language {}, fused {})",
        m["identification_accuracy"], m["vli_accuracy"], m["fused_accuracy"]
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, f64, fn() -> Outcome); 10] = [
        (1, "partition arithmetic", 1.0, partitions),
        (2, "metric correctness", 1.0, metrics),
        (3, "feature layout", 5.0, features),
        (4, "SMO correctness", 60.0, smo),
        (5, "grid search", 60.0, grid),
        (6, "fusion oracle equivalence", 5.0, fusion),
        (7, "simulator direction", 10.0, simulator),
        (8, "error attribution", 5.0, attribution),
        (9, "preprocessing", 10.0, preprocessing),
        (10, "end-to-end dry run", 120.0, end_to_end),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = result.and_then(|msg| {
            if secs <= budget {
                Ok(msg)
            } else {
                Err(format!("{msg}; over the {budget} s budget"))
            }
        });
        match result {
            Ok(msg) => println!("criterion {n:>2} PASS  {name} ({secs:.2} s / {budget} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.2} s / {budget} s): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
