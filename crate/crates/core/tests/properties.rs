use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;

use lipvli_core::dataset::{partition_subject_dependent, Language};
use lipvli_core::eval::{attribute_errors, confusion};
use lipvli_core::fusion::{baseline_decisions, fuse, rank_row, ProbeTruth, ScoreMatrix};
use lipvli_core::preprocess::{canny, laplacian, sobel, Frame};
use lipvli_core::svm::{smo_train, Kernel, SmoParams, SvmMulticlassModel, TrainParams};
use lipvli_core::synth::synthetic_manifest;

fn labelled_points(max: usize) -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<bool>)> {
    (4usize..max).prop_flat_map(|n| {
        (
            prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn kernel() -> impl Strategy<Value = Kernel> {
    prop_oneof![
        Just(Kernel::Linear),
        (0.1f64..2.0).prop_map(|gamma| Kernel::Rbf { gamma }),
        (0.2f64..1.0, 2u32..4).prop_map(|(gamma, degree)| Kernel::Polynomial { gamma, degree, coef0: 1.0 }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn smo_dual_constraints((pts, side) in labelled_points(40), c in 0.1f64..20.0, kernel in kernel()) {
        let mut y: Vec<f64> = side.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
        y[0] = 1.0;
        y[1] = -1.0;
        let x = Array2::from_shape_fn((pts.len(), 2), |(i, d)| if d == 0 { pts[i].0 } else { pts[i].1 });
        let params = SmoParams { c, kernel, tolerance: 1e-3, max_iter: 1_000_000 };
        let m = smo_train(x.view(), &y, &params).unwrap();
        prop_assert_eq!(m.coefficients().len(), m.n_support());
        let sum: f64 = m.coefficients().iter().sum();
        prop_assert!(sum.abs() <= 1e-8, "sum alpha y = {}", sum);
        for &coef in m.coefficients() {
            prop_assert!(coef.abs() > 0.0 && coef.abs() <= c * (1.0 + 1e-12));
        }
        for (&i, &coef) in m.training_indices().iter().zip(m.coefficients()) {
            prop_assert_eq!(coef.signum(), y[i]);
        }
    }

    #[test]
    fn predict_scores_permute_with_rows(perm_seed: u64) {
        let x = Array2::from_shape_fn((24, 3), |(i, d)| ((i * 7 + d * 3) % 11) as f64 / 5.0 + (i % 3) as f64);
        let labels: Vec<String> = (0..24).map(|i| format!("c{}", i % 3)).collect();
        let model = SvmMulticlassModel::fit(x.view(), &labels, &TrainParams::default()).unwrap();
        let ids: Vec<String> = (0..24).map(|i| format!("p{i}")).collect();
        let base = model.predict_scores(x.view(), &ids).unwrap();

        let mut perm: Vec<usize> = (0..24).collect();
        let mut s = perm_seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let xp = x.select(ndarray::Axis(0), &perm);
        let idp: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
        let permuted = model.predict_scores(xp.view(), &idp).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.row(r), base.row(i));
        }
    }

    #[test]
    fn fusion_invariants(
        rows in prop::collection::vec(prop::collection::vec(0u8..5, 6), 1..8),
        langs in prop::collection::vec(0usize..3, 6),
        preds in prop::collection::vec(0usize..3, 8),
        k in 1usize..=6,
    ) {
        let labels: Vec<String> = (0..6).map(|c| format!("s{c}")).collect();
        let probes: Vec<String> = (0..rows.len()).map(|p| format!("p{p}")).collect();
        let flat: Vec<f64> = rows.iter().flatten().map(|&v| f64::from(v)).collect();
        let s = ScoreMatrix::new(probes.clone(), labels.clone(), flat).unwrap();
        let gallery: BTreeMap<String, Language> =
            labels.iter().cloned().zip(langs.iter().map(|&l| Language::ALL[l])).collect();
        let pred: BTreeMap<String, Language> =
            probes.iter().cloned().zip(preds.iter().map(|&l| Language::ALL[l])).collect();

        let decisions = fuse(&s, &pred, &gallery, k).unwrap();
        let baseline = baseline_decisions(&s);
        let ones = fuse(&s, &pred, &gallery, 1).unwrap();
        for (i, d) in decisions.iter().enumerate() {
            let ranks = rank_row(&s, i);
            prop_assert!(ranks.ranked.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert_eq!(ranks.ranked.len(), 6);
            let r = ranks.rank_of(&d.predicted_identity).unwrap();
            prop_assert_eq!(r, d.rank_of_choice);
            prop_assert!(r <= k);
            if d.fallback {
                prop_assert_eq!(r, 1);
            }
            if gallery[&baseline[i]] == pred[&probes[i]] {
                prop_assert_eq!(&d.predicted_identity, &baseline[i]);
                prop_assert!(!d.fallback);
            }
            prop_assert_eq!(&ones[i].predicted_identity, &baseline[i]);
        }
    }

    #[test]
    fn confusion_rows_and_attribution(
        rows in prop::collection::vec(prop::collection::vec(0u8..9, 5), 1..40),
        truth_ids in prop::collection::vec(0usize..5, 40),
        preds in prop::collection::vec(0usize..2, 40),
        k in 1usize..=5,
    ) {
        let labels: Vec<String> = (0..5).map(|c| format!("s{c}")).collect();
        let n = rows.len();
        let probes: Vec<String> = (0..n).map(|p| format!("p{p}")).collect();
        let flat: Vec<f64> = rows.iter().flatten().map(|&v| f64::from(v)).collect();
        let s = ScoreMatrix::new(probes.clone(), labels.clone(), flat).unwrap();
        let lang_of = |c: usize| Language::ALL[c % 2];
        let gallery: BTreeMap<String, Language> = (0..5).map(|c| (labels[c].clone(), lang_of(c))).collect();
        let pred: BTreeMap<String, Language> =
            probes.iter().cloned().zip(preds.iter().map(|&l| Language::ALL[l])).collect();
        let truth: Vec<ProbeTruth> = (0..n)
            .map(|i| ProbeTruth { probe_id: probes[i].clone(), identity: labels[truth_ids[i]].clone(), language: lang_of(truth_ids[i]) })
            .collect();

        let decisions = fuse(&s, &pred, &gallery, k).unwrap();
        let ids: Vec<String> = decisions.iter().map(|d| d.predicted_identity.clone()).collect();
        let tids: Vec<String> = truth.iter().map(|t| t.identity.clone()).collect();
        let cm = confusion(&ids, &tids, &labels).unwrap();
        prop_assert_eq!(cm.total(), n as u64);
        for (c, label) in labels.iter().enumerate() {
            let support = tids.iter().filter(|t| *t == label).count() as u64;
            prop_assert_eq!(cm.support(c), support);
        }

        let ranks: Vec<_> = (0..n).map(|i| rank_row(&s, i)).collect();
        let a = attribute_errors(&decisions, &ranks, &truth, k).unwrap();
        let wrong = ids.iter().zip(&tids).filter(|(p, t)| p != t).count() as u64;
        prop_assert_eq!(a.total_errors, wrong);
        prop_assert!(a.is_partition());
    }

    #[test]
    fn dependent_split_is_deterministic_partition(langs in 1usize..5, subjects in 1usize..6, seed: u64) {
        let m = synthetic_manifest(langs, subjects, true);
        let a = partition_subject_dependent(&m, seed).unwrap();
        prop_assert!(a.check_partition(&m).is_ok());
        prop_assert_eq!(a.test.len(), langs * subjects);
        prop_assert_eq!(a.to_json(), partition_subject_dependent(&m, seed).unwrap().to_json());
    }

    #[test]
    fn filter_output_ranges(pixels in prop::collection::vec(any::<u8>(), 12 * 9)) {
        let f = Frame::gray(12, 9, pixels).unwrap();
        // u8 output is in [0, 255] by construction; check shape and the binary canny map.
        prop_assert_eq!(sobel(&f).unwrap().pixels().len(), 108);
        prop_assert_eq!(laplacian(&f).unwrap().pixels().len(), 108);
        let edges = canny(&f, 0.1, 0.3).unwrap();
        prop_assert!(edges.pixels().iter().all(|&p| p == 0 || p == 255));
    }
}
