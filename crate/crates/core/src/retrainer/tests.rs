use super::*;
use crate::data::{split_indices, synth_blobs};
use crate::nets::ModelKind;

fn data() -> ExperimentData {
    let pool = synth_blobs(3, 80, 6, 0.7, 1).unwrap();
    let held = synth_blobs(3, 100, 6, 0.7, 2).unwrap();
    ExperimentData::from_parts(pool, &held, 5).unwrap()
}

fn config() -> RetrainConfig {
    RetrainConfig {
        name: None,
        dataset: DatasetConfig::Blobs { classes: 3, per_class: 80, test_per_class: 100, dim: 6, spread: 0.7, seed: 1 },
        split_seed: 5,
        model: ModelConfig { kind: ModelKind::Mlp, hidden: Some(vec![12]), dropout: 0.0, conv_channels: None },
        training: TrainingConfig { batch_size: 16, ..TrainingConfig::default() },
        pretrain_epochs: 5,
        pretrain: Mode::Standard,
        retrain_epochs: 2,
        fractions: vec![0.0, 0.04, 0.1],
        acquisitions: vec![Acquisition::Dre, Acquisition::Random],
        train_attack: AttackConfig::pgd(0.2, 0.05, 5),
        eval_attacks: vec![AttackConfig::pgd(0.2, 0.05, 5)],
        eval_limit: None,
        acquisition_params: Default::default(),
        seed: 3,
    }
}

#[test]
fn budget_above_ten_percent_is_rejected() {
    let (cfg, d) = (config(), data());
    let base = Model::build(cfg.model_spec(&d)).unwrap();
    let baseline = evaluate_baseline(&base, &d.test, &cfg).unwrap();
    let err = select_retrain_evaluate(&base, &baseline, &d.pool, &d.validation, &d.test, Acquisition::Dre, 0.11, &cfg);
    assert!(matches!(err, Err(Error::BudgetTooLarge { .. })));
    let mut bad = cfg.clone();
    bad.fractions = vec![0.2];
    assert!(bad.validate().is_err());
}

#[test]
fn retraining_set_sizes() {
    let (cfg, d) = (config(), data());
    let base = pretrain_full(cfg.model_spec(&d), &d.pool, 2, &cfg).unwrap();
    let baseline = evaluate_baseline(&base, &d.test, &cfg).unwrap();
    for (fraction, k) in [(0.0, 0), (0.04, 6), (0.1, 15)] {
        let out = select_retrain_evaluate(&base, &baseline, &d.pool, &d.validation, &d.test, Acquisition::Dre, fraction, &cfg).unwrap();
        assert_eq!(out.report.selected, k);
        assert_eq!(out.selected.len(), k);
        assert_eq!(out.report.retrain_size, d.pool.len() + k);
        assert!(out.selected.iter().all(|&i| i < d.validation.len()));
        assert_eq!(out.report.baseline_rob_pgd, baseline.robustness(AttackFamily::Pgd));
    }
}

#[test]
fn candidates_never_touch_the_evaluation_half() {
    let (val, test) = split_indices(300, 5).unwrap();
    assert!(val.iter().all(|i| !test.contains(i)));
    assert_eq!(val.len() + test.len(), 300);
}

#[test]
fn zero_pretraining_epochs_give_the_initial_model() {
    let (cfg, d) = (config(), data());
    let spec = cfg.model_spec(&d);
    let m = pretrain_full(spec.clone(), &d.pool, 0, &cfg).unwrap();
    assert_eq!(m.params(), Model::build(spec).unwrap().params());
}

#[test]
fn runs_are_reproducible() {
    let (cfg, d) = (config(), data());
    let a = run_retraining(&cfg, &d, &mut |_| {}).unwrap();
    let b = run_retraining(&cfg, &d, &mut |_| {}).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn retrain_config_parsing() {
    let cfg = parse_retrain_config(r#"{"preset": "mnist-desk", "seed": 2}"#).unwrap();
    assert_eq!(cfg.fractions, vec![0.0, 0.01, 0.04]);
    assert_eq!((cfg.pretrain_epochs, cfg.retrain_epochs, cfg.pretrain), (10, 10, Mode::Standard));
    assert_eq!(cfg.train_attack.iters, 40);
    assert!(matches!(parse_retrain_config(r#"{"preset": "mnist-desk"}"#), Err(Error::Schema { .. })));
    assert!(matches!(
        parse_retrain_config(r#"{"preset": "mnist-desk", "seed": 1, "fractions": [0.5]}"#),
        Err(Error::ConfigInvalid(_))
    ));
    assert!(matches!(
        parse_retrain_config(r#"{"preset": "mnist-desk", "seed": 1, "acquisitions": ["foo"]}"#),
        Err(Error::UnknownAcquisition { .. })
    ));
}
