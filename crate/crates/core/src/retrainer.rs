//! Selecting held-out data for adversarial retraining of a fully trained
//! model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acquisition::{select, Acquisition, AcquisitionParams};
use crate::attacks::{attack_batch, evaluate_robustness, AttackConfig, AttackFamily, RobustnessReport};
use crate::config::{attack, attacks, require_seed, schema_error, DatasetConfig, Mode, ModelConfig, TrainingConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learner::{derive_seed, train_adversarial, train_standard, ExperimentData};
use crate::nets::{Model, ModelSpec};

/// Largest selectable share of the candidate pool.
pub const MAX_FRACTION: f64 = 0.10;

const PRETRAIN: u64 = 21;
const SELECT: u64 = 22;
const GENERATE: u64 = 23;
const RETRAIN: u64 = 24;
const EVAL: u64 = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split_seed: u64,
    pub model: ModelConfig,
    /// Learning rate, momentum and batch size for both phases; early
    /// stopping is not used.
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "ten")]
    pub pretrain_epochs: usize,
    /// How the baseline is trained on the full training set.
    #[serde(default = "standard")]
    pub pretrain: Mode,
    #[serde(default = "ten")]
    pub retrain_epochs: usize,
    /// Shares of the candidate pool (the validation half) to select.
    pub fractions: Vec<f64>,
    pub acquisitions: Vec<Acquisition>,
    #[serde(deserialize_with = "attack")]
    pub train_attack: AttackConfig,
    #[serde(deserialize_with = "attacks")]
    pub eval_attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub eval_limit: Option<usize>,
    #[serde(default)]
    pub acquisition_params: AcquisitionParams,
    pub seed: u64,
}

fn ten() -> usize {
    10
}

fn standard() -> Mode {
    Mode::Standard
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        for &f in &self.fractions {
            check_fraction(f).map_err(|e| Error::ConfigInvalid(format!("fraction {f}: {e}")))?;
        }
        if self.acquisitions.is_empty() || self.fractions.is_empty() {
            return Err(Error::ConfigInvalid("need at least one acquisition and one fraction".into()));
        }
        self.training.validate()?;
        if self.train_attack.family != AttackFamily::Pgd {
            return Err(Error::ConfigInvalid("retraining examples come from a pgd attack".into()));
        }
        for a in std::iter::once(&self.train_attack).chain(&self.eval_attacks) {
            a.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn model_spec(&self, data: &ExperimentData) -> ModelSpec {
        self.model.to_spec(data.pool.image_shape(), data.pool.classes().max(data.test.classes()), self.seed)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..=MAX_FRACTION).contains(&f) {
        if f > MAX_FRACTION {
            return Err(Error::BudgetTooLarge { requested: (f * 100.0).round() as usize, available: 10 });
        }
        return Err(Error::InvalidArgument(format!("budget fraction {f} is negative")));
    }
    Ok(())
}

/// Desk-scale defaults: synthetic digits, MLP, 1% and 4% budgets.
pub fn retrain_preset(name: &str) -> Option<Value> {
    match name {
        "mnist-desk" => Some(serde_json::json!({
            "dataset": {"kind": "idx",
                "train_images": "mnist/train-images-idx3-ubyte",
                "train_labels": "mnist/train-labels-idx1-ubyte",
                "test_images": "mnist/t10k-images-idx3-ubyte",
                "test_labels": "mnist/t10k-labels-idx1-ubyte",
                "train_limit": 6000,
                "test_limit": 2000},
            "model": {"kind": "mlp", "hidden": [256, 128], "dropout": 0.1},
            "training": {"epochs": 10, "patience": null},
            "fractions": [0.0, 0.01, 0.04],
            "acquisitions": ["random", "entropy", "dre"],
            "train_attack": "mnist-train",
            "eval_attacks": ["mnist-eval"],
            "eval_limit": 500,
        })),
        _ => None,
    }
}

pub fn parse_retrain_config(text: &str) -> Result<RetrainConfig> {
    let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("config is not valid JSON: {e}")))?;
    let obj = v.as_object_mut().ok_or_else(|| Error::Schema {
        field: "<root>".into(),
        message: "configuration must be a JSON object".into(),
    })?;
    require_seed(&Value::Object(obj.clone()))?;
    let mut full = match obj.remove("preset") {
        None => Value::Object(Default::default()),
        Some(Value::String(name)) => retrain_preset(&name).ok_or_else(|| Error::Schema {
            field: "preset".into(),
            message: format!("unknown preset `{name}` (valid: mnist-desk)"),
        })?,
        Some(_) => return Err(Error::Schema { field: "preset".into(), message: "expected a preset name".into() }),
    };
    let fields = full.as_object_mut().expect("preset is an object");
    for (k, val) in std::mem::take(obj) {
        fields.insert(k, val);
    }
    if let Some(names) = full.get("acquisitions").and_then(Value::as_array) {
        for n in names.iter().filter_map(Value::as_str) {
            n.parse::<Acquisition>()?;
        }
    }
    let cfg: RetrainConfig = serde_json::from_value(full).map_err(schema_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_retrain_config(path: &Path) -> Result<RetrainConfig> {
    let mut cfg = parse_retrain_config(&std::fs::read_to_string(path)?)?;
    if let Some(dir) = path.parent() {
        cfg.dataset = cfg.dataset.resolved(dir);
    }
    Ok(cfg)
}

/// Trains a fresh model on every item of `train` (no early stopping).
pub fn pretrain_full(spec: ModelSpec, train: &Dataset, epochs: usize, cfg: &RetrainConfig) -> Result<Model> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Model::build(spec)?;
    let all: Vec<usize> = (0..train.len()).collect();
    let tc = TrainingConfig { patience: None, ..cfg.training.clone() };
    let seed = derive_seed(cfg.seed, PRETRAIN, 0);
    match cfg.pretrain {
        Mode::Standard => train_standard(&mut model, train, &all, None, epochs, &tc, seed)?,
        Mode::Robust => train_adversarial(&mut model, train, &all, None, epochs, &tc, &cfg.train_attack, 0, seed)?,
    };
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub acquisition: Acquisition,
    pub fraction: f64,
    pub seed: u64,
    pub selected: usize,
    pub retrain_size: usize,
    pub baseline_accuracy: f64,
    pub baseline_rob_pgd: Option<f64>,
    pub baseline_rob_square: Option<f64>,
    pub accuracy: f64,
    pub rob_pgd: Option<f64>,
    pub rob_square: Option<f64>,
}

/// The baseline's evaluation, shared by every retraining of it.
pub fn evaluate_baseline(model: &Model, eval: &Dataset, cfg: &RetrainConfig) -> Result<RobustnessReport> {
    evaluate_robustness(model, eval, &eval_attacks(cfg))
}

fn eval_attacks(cfg: &RetrainConfig) -> Vec<AttackConfig> {
    let seed = derive_seed(cfg.seed, EVAL, 0);
    cfg.eval_attacks.iter().map(|a| a.clone().with_seed(seed)).collect()
}

/// Outcome of one selection plus retraining, with the chosen candidate
/// indices.
#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub report: RetrainReport,
    pub selected: Vec<usize>,
    pub model: Model,
}

/// Picks `floor(fraction * |candidates|)` candidates with `acq`, attacks
/// them with the training PGD, and continues standard training of a copy of
/// `base` on `train` plus those adversarial examples (carrying the clean
/// labels). Evaluation uses `eval`, which must not overlap the candidates.
#[allow(clippy::too_many_arguments)]
pub fn select_retrain_evaluate(
    base: &Model,
    baseline: &RobustnessReport,
    train: &Dataset,
    candidates: &Dataset,
    eval: &Dataset,
    acq: Acquisition,
    fraction: f64,
    cfg: &RetrainConfig,
) -> Result<RetrainOutcome> {
    check_fraction(fraction)?;
    if candidates.is_empty() || eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = (fraction * candidates.len() as f64 + 1e-9).floor() as usize;
    let tag = ((acq as u64) << 32) | (fraction * 1e6).round() as u64;
    let mut selected = Vec::new();
    let mut retrain_set = train.clone();
    if k > 0 {
        let all: Vec<usize> = (0..candidates.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SELECT, tag));
        selected = select(acq, base, candidates, &all, &[], k, &cfg.acquisition_params, &mut rng)?.selected;
        let (x, y) = candidates.batch(&selected);
        let atk = cfg.train_attack.clone().with_seed(derive_seed(cfg.seed, GENERATE, tag));
        let adv = attack_batch(base, &x, &y, &atk)?;
        let adv = Dataset::new("adversarial", adv, y, candidates.classes())?;
        retrain_set = train.concat(&adv)?;
    }
    let mut model = base.clone();
    let all: Vec<usize> = (0..retrain_set.len()).collect();
    let tc = TrainingConfig { patience: None, ..cfg.training.clone() };
    train_standard(&mut model, &retrain_set, &all, None, cfg.retrain_epochs, &tc, derive_seed(cfg.seed, RETRAIN, tag))?;
    let after = evaluate_robustness(&model, eval, &eval_attacks(cfg))?;
    let report = RetrainReport {
        acquisition: acq,
        fraction,
        seed: cfg.seed,
        selected: selected.len(),
        retrain_size: retrain_set.len(),
        baseline_accuracy: baseline.clean_accuracy,
        baseline_rob_pgd: baseline.robustness(AttackFamily::Pgd),
        baseline_rob_square: baseline.robustness(AttackFamily::Square),
        accuracy: after.clean_accuracy,
        rob_pgd: after.robustness(AttackFamily::Pgd),
        rob_square: after.robustness(AttackFamily::Square),
    };
    Ok(RetrainOutcome { report, selected, model })
}

/// Pretrains once, then runs every (acquisition, fraction) pair of `cfg`.
/// Candidates are the validation half; evaluation uses the test half.
pub fn run_retraining(
    cfg: &RetrainConfig,
    data: &ExperimentData,
    progress: &mut dyn FnMut(&RetrainReport),
) -> Result<Vec<RetrainReport>> {
    cfg.validate()?;
    let eval = match cfg.eval_limit {
        Some(n) if n < data.test.len() => data.test.head(n)?,
        _ => data.test.clone(),
    };
    let base = pretrain_full(cfg.model_spec(data), &data.pool, cfg.pretrain_epochs, cfg)?;
    let baseline = evaluate_baseline(&base, &eval, cfg)?;
    let mut reports = Vec::new();
    for &acq in &cfg.acquisitions {
        for &fraction in &cfg.fractions {
            let out = select_retrain_evaluate(&base, &baseline, &data.pool, &data.validation, &eval, acq, fraction, cfg)?;
            progress(&out.report);
            reports.push(out.report);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests;
