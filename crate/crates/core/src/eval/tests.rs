use super::*;
use crate::attacks::InitMode;
use crate::data::{make_synthetic, SynthKind};
use crate::model::InputShape;
use crate::rng::{substream, Stream};
use approx::assert_abs_diff_eq;
use rand::Rng;

fn model(seed: u64) -> Classifier {
    let mut rng = substream(seed, Stream::Init, &[0]);
    Classifier::new("mlp:1x8", InputShape::flat(2), 2, &mut rng).unwrap()
}

fn random_masks(count: usize, n: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = substream(seed, Stream::Data, &[6]);
    (0..count)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0f64) < 0.7).collect())
        .collect()
}

#[test]
fn vanishing_budget_attack_matches_clean_accuracy() {
    let m = model(1);
    let data = make_synthetic(SynthKind::TwoGaussians, 60, 2).unwrap();
    let suite = AttackSuite::new(vec![AttackEntry {
        id: "pgd-tiny".into(),
        ptype: NormKind::Linf,
        kind: AttackKind::Pgd(PerturbationSpec::new(NormKind::Linf, 1e-9, 1e-9, 3)),
    }])
    .unwrap();
    let report = evaluate_suite(&m, &suite, &data, 5, "m").unwrap();
    assert_abs_diff_eq!(report.per_attack[0].accuracy, report.clean_accuracy, epsilon = 1e-12);
}

#[test]
fn duplicate_attack_entries_produce_identical_masks() {
    let m = model(3);
    let data = make_synthetic(SynthKind::TwoGaussians, 40, 4).unwrap();
    let spec = PerturbationSpec::new(NormKind::Linf, 0.05, 0.01, 5);
    let suite = AttackSuite::new(vec![
        AttackEntry { id: "a".into(), ptype: NormKind::Linf, kind: AttackKind::Pgd(spec) },
        AttackEntry { id: "b".into(), ptype: NormKind::Linf, kind: AttackKind::Pgd(spec) },
    ])
    .unwrap();
    let report = evaluate_suite(&m, &suite, &data, 6, "m").unwrap();
    assert_eq!(report.masks["a"], report.masks["b"]);
    assert_abs_diff_eq!(
        report.per_type[0].accuracy,
        report.per_attack[0].accuracy,
        epsilon = 1e-12
    );
}

#[test]
fn suite_rejects_duplicate_ids() {
    let spec = PerturbationSpec::new(NormKind::Linf, 0.05, 0.01, 5);
    assert!(AttackSuite::new(vec![
        AttackEntry { id: "a".into(), ptype: NormKind::Linf, kind: AttackKind::Pgd(spec) },
        AttackEntry { id: "a".into(), ptype: NormKind::L2, kind: AttackKind::Pgd(spec) },
    ])
    .is_err());
}

#[test]
fn empty_dataset_is_a_config_error() {
    let m = model(7);
    let mut data = make_synthetic(SynthKind::TwoGaussians, 10, 8).unwrap();
    data.inputs = ndarray::Array2::zeros((0, 2));
    data.labels.clear();
    let suite = AttackSuite::desk_linf(0.05, 5);
    assert!(matches!(
        evaluate_suite(&m, &suite, &data, 9, "m"),
        Err(MatError::Config(_))
    ));
}

// Brute-force recomputation of every aggregate from injected masks.
#[test]
fn aggregates_match_brute_force_on_random_masks() {
    let types = [NormKind::Linf, NormKind::Linf, NormKind::L2, NormKind::L1, NormKind::L2];
    for seed in 0..10u64 {
        let masks = random_masks(5, 100, seed);
        let agg = aggregate_masks(&types, &masks);

        for (i, mask) in masks.iter().enumerate() {
            let acc = mask.iter().filter(|&&b| b).count() as f64 / 100.0;
            assert_abs_diff_eq!(agg.per_attack[i], acc, epsilon = 1e-15);
        }
        let mut expected_types: Vec<(NormKind, f64)> = Vec::new();
        for t in [NormKind::Linf, NormKind::L2, NormKind::L1] {
            let mut correct = 0usize;
            for ex in 0..100 {
                let mut ok = true;
                for (mask, mt) in masks.iter().zip(&types) {
                    if *mt == t && !mask[ex] {
                        ok = false;
                    }
                }
                correct += usize::from(ok);
            }
            expected_types.push((t, correct as f64 / 100.0));
        }
        assert_eq!(agg.per_type.len(), expected_types.len());
        for ((ta, aa), (tb, ab)) in agg.per_type.iter().zip(&expected_types) {
            assert_eq!(ta, tb);
            assert_abs_diff_eq!(aa, ab, epsilon = 1e-15);
        }
        let r_avg = expected_types.iter().map(|(_, a)| a).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(agg.r_avg, r_avg, epsilon = 1e-15);

        let mut correct = 0usize;
        for ex in 0..100 {
            if masks.iter().all(|m| m[ex]) {
                correct += 1;
            }
        }
        assert_abs_diff_eq!(agg.r_worst, correct as f64 / 100.0, epsilon = 1e-15);
        // The worst case can never beat any per-type accuracy.
        for (_, a) in &agg.per_type {
            assert!(agg.r_worst <= a + 1e-15);
        }
    }
}

#[test]
fn worst_case_accuracy_examples() {
    let a = vec![true, false, true];
    let b = vec![true, true, false];
    assert_abs_diff_eq!(worst_case_accuracy(&[a.clone(), b]).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(worst_case_accuracy(&[a.clone()]).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    assert!(worst_case_accuracy(&[a, vec![true]]).is_err());
}

#[test]
fn worst_case_matches_brute_force_on_random_masks() {
    let masks = random_masks(5, 100, 77);
    let got = worst_case_accuracy(&masks).unwrap();
    let mut correct = 0;
    for ex in 0..100 {
        if masks.iter().all(|m| m[ex]) {
            correct += 1;
        }
    }
    assert_abs_diff_eq!(got, correct as f64 / 100.0, epsilon = 1e-15);
}

#[test]
fn adding_attacks_never_raises_worst_case() {
    let masks = random_masks(6, 80, 91);
    let mut prev = 1.0;
    for k in 1..=6 {
        let acc = worst_case_accuracy(&masks[..k]).unwrap();
        assert!(acc <= prev + 1e-15);
        prev = acc;
    }
}

#[test]
fn per_attack_accuracy_non_increasing_in_restarts() {
    let m = model(11);
    let data = make_synthetic(SynthKind::TwoGaussians, 80, 12).unwrap();
    let mut prev = f64::INFINITY;
    for restarts in [1usize, 2, 4] {
        let spec = PerturbationSpec::new(NormKind::Linf, 0.06, 0.015, 5).with_restarts(restarts);
        let suite = AttackSuite::new(vec![AttackEntry {
            id: "pgd".into(),
            ptype: NormKind::Linf,
            kind: AttackKind::Pgd(spec),
        }])
        .unwrap();
        let report = evaluate_suite(&m, &suite, &data, 13, "m").unwrap();
        let acc = report.per_attack[0].accuracy;
        assert!(acc <= prev + 1e-12, "accuracy rose from {prev} to {acc} at R={restarts}");
        prev = acc;
    }
}

#[test]
fn transfer_diagonal_is_whitebox() {
    let m1 = model(14);
    let m2 = model(15);
    let data = make_synthetic(SynthKind::TwoGaussians, 50, 16).unwrap();
    let spec = PerturbationSpec::new(NormKind::Linf, 0.05, 0.0125, 10);
    let matrix = transfer_matrix(
        &[&m1, &m2],
        &["m1".into(), "m2".into()],
        &spec,
        &data,
        17,
    )
    .unwrap();

    // Recompute the (m1, m1) entry directly with the same stream key.
    let seed = rng::fold_key(17, crate::rng::Stream::Eval, &[0]);
    let adv = pgd_attack(&m1, &data.inputs, &data.labels, &spec, seed).unwrap();
    let expected = m1.accuracy(&adv.x_adv, &data.labels).unwrap();
    assert_abs_diff_eq!(matrix.accuracies[0][0], expected, epsilon = 1e-12);
}

#[test]
fn transfer_from_constant_source_uses_clean_inputs() {
    let m1 = model(18);
    let mut constant = model(19);
    let mut params = constant.param_arrays();
    let n = params.len();
    params[n - 2].fill(0.0);
    params[n - 1].fill(0.0);
    constant.set_param_arrays(&params).unwrap();

    let data = make_synthetic(SynthKind::TwoGaussians, 50, 20).unwrap();
    let spec = PerturbationSpec::new(NormKind::Linf, 0.05, 0.0125, 10).with_init(InitMode::Zero);
    let matrix = transfer_matrix(
        &[&m1, &constant],
        &["m1".into(), "const".into()],
        &spec,
        &data,
        21,
    )
    .unwrap();
    let clean = m1.accuracy(&data.inputs, &data.labels).unwrap();
    assert_abs_diff_eq!(matrix.accuracies[0][1], clean, epsilon = 1e-12);
}

#[test]
fn obfuscation_verdict_rule() {
    // PGD mask inside the FGSM mask means pgd accuracy below fgsm accuracy.
    let (v, _) = obfuscation_verdict(0.7, 0.55, 0.55, 0.68, 0.01);
    assert_eq!(v, Verdict::Pass);

    let (v, violations) = obfuscation_verdict(0.7, 0.66, 0.9, 0.5, 0.01);
    assert_eq!(v, Verdict::Fail);
    assert!(violations.iter().any(|m| m.contains("whitebox > blackbox")), "{violations:?}");

    let (v, violations) = obfuscation_verdict(0.5, 0.8, 0.8, 0.9, 0.01);
    assert_eq!(v, Verdict::Fail);
    assert!(violations.iter().any(|m| m.contains("one-step beats iterative")));
}

#[test]
fn obfuscation_check_runs_end_to_end() {
    let m = model(22);
    let peer = model(23);
    let data = make_synthetic(SynthKind::TwoGaussians, 40, 24).unwrap();
    let report = obfuscation_check(&m, &[&peer], &data, 0.05, 0.01, 25).unwrap();
    assert!(report.fgsm_accuracy >= 0.0 && report.fgsm_accuracy <= 1.0);
    assert_eq!(report.whitebox_accuracy, report.pgd_accuracy);
}
