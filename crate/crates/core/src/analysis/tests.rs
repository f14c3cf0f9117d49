use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn jsd_reference_values() {
    let p = [0.2, 0.3, 0.5];
    assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 0.2158).abs() < 5e-5);
    assert!(matches!(jsd(&[1.0], &[0.5, 0.5]), Err(Error::LengthMismatch(1, 2))));
    assert!(matches!(jsd(&[0.9, 0.0], &[0.5, 0.5]), Err(Error::NotDistribution { .. })));
}

#[test]
fn pearson_reference_values() {
    let a = [1.0, 2.0, 3.0];
    assert!((pearson(&a, &[2.0, 1.0, 4.0]).unwrap() - 0.6547).abs() < 5e-5);
    assert!((pearson(&a, &[5.0, 7.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&a, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(pearson(&a, &[1.0, 1.0, 1.0]), Err(Error::ZeroVariance)));
    assert!(matches!(pearson(&a, &[1.0]), Err(Error::LengthMismatch(3, 1))));
}

proptest! {
    #[test]
    fn jsd_symmetric_and_bounded(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
        let sp: f64 = raw.iter().map(|r| r.0).sum();
        let sq: f64 = raw.iter().map(|r| r.1).sum();
        prop_assume!(sp > 0.0 && sq > 0.0);
        let p: Vec<f64> = raw.iter().map(|r| r.0 / sp).collect();
        let q: Vec<f64> = raw.iter().map(|r| r.1 / sq).collect();
        let d = jsd(&p, &q).unwrap();
        prop_assert_eq!(d, jsd(&q, &p).unwrap());
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&d));
    }

    #[test]
    fn pearson_affine_invariance(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
        c in prop::sample::select(vec![-3.5, -0.25, 0.5, 2.0, 7.0]),
        shift in -5.0f64..5.0,
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = pearson(&a, &b);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let moved: Vec<f64> = b.iter().map(|v| c * v + shift).collect();
        let r2 = pearson(&a, &moved).unwrap();
        prop_assert!((r2 - c.signum() * r).abs() < 1e-12);
        prop_assert!(r.abs() <= 1.0);
    }
}

/// Two-sided p by listing all 2^n sign patterns.
fn enumerate_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let obs: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= obs + 1e-9 {
            lo += 1;
        }
        if w >= obs - 1e-9 {
            hi += 1;
        }
    }
    (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
}

#[test]
fn wilcoxon_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..100 {
        let n = 1 + case % 10;
        // Rounded values force ties and zero differences.
        let a: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 6.0).round()).collect();
        let b: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 6.0).round()).collect();
        match wilcoxon_signed_rank(&a, &b) {
            Ok(w) => {
                assert!(w.exact);
                assert!((w.p_value - enumerate_p(&a, &b)).abs() <= 1e-12, "case {case}");
            }
            Err(Error::AllZeroDifferences) => assert_eq!(a, b),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn wilcoxon_reference_values() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::AllZeroDifferences)));
    let w = wilcoxon_signed_rank(&[2.0, 4.0, 6.0, 8.0, 10.0], &a).unwrap();
    assert_eq!((w.n, w.w_plus, w.statistic), (5, 15.0, 0.0));
    assert!((w.p_value - 2.0 / 32.0).abs() < 1e-15);

    // 25 positive differences: W+ = 325, normal approximation.
    let big: Vec<f64> = (1..=25).map(f64::from).collect();
    let w = wilcoxon_signed_rank(&big, &[0.0; 25]).unwrap();
    assert!(!w.exact);
    let z = (325.0 - 162.5 - 0.5) / (25.0f64 * 26.0 * 51.0 / 24.0).sqrt();
    let expected = 2.0 * (1.0 - Normal::standard().cdf(z));
    assert!((w.p_value - expected).abs() < 1e-15);
    assert!(w.p_value < 1e-4);
}

fn dump_rows(values: &[f64], selected: &[bool], labels: &[usize]) -> Vec<DumpRow> {
    values
        .iter()
        .zip(selected)
        .zip(labels)
        .enumerate()
        .map(|(i, ((&v, &s), &l))| DumpRow {
            index: i,
            score: Some(v),
            selected: s,
            entropy: v,
            gini: v / 2.0,
            lc: v / 3.0,
            margin: 1.0 - v,
            true_label: l,
        })
        .collect()
}

#[test]
fn random_selection_matches_the_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 6000;
    let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(2)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let picks = rand::seq::index::sample(&mut rng, n, 1000);
    let mut random = vec![false; n];
    picks.iter().for_each(|i| random[i] = true);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let mut top = vec![false; n];
    order[..1000].iter().for_each(|&i| top[i] = true);

    let d_random = selection_divergence(&dump_rows(&values, &random, &labels), Characteristic::Entropy, 50).unwrap();
    let d_top = selection_divergence(&dump_rows(&values, &top, &labels), Characteristic::Entropy, 50).unwrap();
    assert!(d_random < 0.05, "{d_random}");
    assert!(d_top > d_random);
    let d_label = selection_divergence(&dump_rows(&values, &random, &labels), Characteristic::TrueLabel, 50).unwrap();
    assert!(d_label < 0.05);
}

fn synthetic_runs() -> Vec<RunInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 400;
    let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let mut runs = Vec::new();
    // Functions taking ever more skewed selections get less robust.
    for (j, acq) in [Acquisition::Random, Acquisition::Dre, Acquisition::Margin, Acquisition::MaxEntropy].into_iter().enumerate() {
        for seed in 0..2u64 {
            let mut stages = vec![];
            let mut dumps = BTreeMap::new();
            for stage in 0..3 {
                stages.push(StageRecord {
                    stage,
                    labeled: 100 + 50 * stage,
                    accuracy: 0.9,
                    rob_pgd: Some(0.6 - 0.1 * j as f64 + 0.01 * seed as f64),
                    rob_square: None,
                    seconds: None,
                    acquisition: acq,
                    seed,
                });
                if stage > 0 {
                    let cut = 1.0 - 0.25 * j as f64;
                    let mut sel: Vec<bool> = values.iter().map(|&v| v <= cut && rng.random::<f64>() < 0.3).collect();
                    sel[0] = true;
                    dumps.insert(stage, dump_rows(&values, &sel, &labels));
                }
            }
            runs.push(RunInput { acquisition: acq, seed, stages, dumps });
        }
    }
    runs
}

#[test]
fn bias_study_correlates_skew_with_robustness() {
    let runs = synthetic_runs();
    let study = bias_study(&runs, &Characteristic::ALL, "rob_pgd", 50).unwrap();
    assert_eq!(study.records.len(), 2 * 4 * 5);
    assert!(study.records.iter().all(|r| (0.0..=std::f64::consts::LN_2 + 1e-9).contains(&r.d)));
    let rand_row = study.records.iter().find(|r| r.function == Acquisition::Random && r.stage == 1 && r.characteristic == Characteristic::Entropy).unwrap();
    assert!((rand_row.robustness - 0.605).abs() < 1e-12);
    assert!(study.mean_correlation(Characteristic::Entropy).unwrap() < -0.8);
    assert!(study.correlations.iter().all(|c| c.n == 4 && c.r.is_none_or(|r| r.abs() <= 1.0 + 1e-12)));
    assert_eq!(study, bias_study(&runs, &Characteristic::ALL, "rob_pgd", 50).unwrap());
}

#[test]
fn undefined_correlations_are_reported_empty() {
    let mut runs = synthetic_runs();
    for r in &mut runs {
        r.stages.iter_mut().for_each(|s| s.rob_pgd = Some(0.5));
    }
    let study = bias_study(&runs, &[Characteristic::Entropy], "rob_pgd", 50).unwrap();
    assert!(study.correlations.iter().all(|c| c.r.is_none()));
    assert_eq!(study.mean_correlation(Characteristic::Entropy), None);
    runs[0].dumps.clear();
    assert!(matches!(bias_study(&runs, &[Characteristic::Entropy], "rob_pgd", 50), Err(Error::MissingDump(_))));
}

#[test]
fn run_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let runs = synthetic_runs();
    let margin: Vec<&RunInput> = runs.iter().filter(|r| r.acquisition == Acquisition::Margin).collect();
    let records: Vec<StageRecord> = margin.iter().flat_map(|r| r.stages.clone()).collect();
    crate::learner::write_stages_csv(&dir.path().join("stages.csv"), &records).unwrap();
    for r in &margin {
        for (stage, rows) in &r.dumps {
            crate::acquisition::write_dump(&dump_path(dir.path(), r.seed, *stage), rows).unwrap();
        }
    }
    let loaded = load_run_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[0].dumps, margin[0].dumps);
    assert_eq!(loaded[1].stages, margin[1].stages);

    let out = dir.path().join("bias.csv");
    let study = bias_study(&loaded, &Characteristic::ALL, "rob_pgd", 50).unwrap();
    write_csv(&out, &study.records).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("stage,function,characteristic,d,robustness\n1,margin,entropy,"));
    write_csv(&dir.path().join("correlation.csv"), &study.correlations).unwrap();
    let corr = std::fs::read_to_string(dir.path().join("correlation.csv")).unwrap();
    assert!(corr.starts_with("stage,characteristic,r,n\n1,entropy,,1\n"));
}
