//! Experiment configuration: JSON files with named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};

use crate::acquisition::{Acquisition, AcquisitionParams};
use crate::attacks::{AttackConfig, ATTACK_PRESETS};
use crate::error::{Error, Result};
use crate::nets::{ModelKind, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// MNIST-layout IDX files; relative paths resolve against the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Procedurally rendered 28x28 digits.
    SynthDigits {
        train: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Gaussian blobs (flat inputs).
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Defaults: 256-128 for the MLP, 120-84 for the CNN.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub conv_channels: Option<Vec<usize>>,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn to_spec(&self, input_shape: [usize; 3], classes: usize, seed: u64) -> ModelSpec {
        let mut spec = match self.kind {
            ModelKind::Mlp => ModelSpec::mlp(input_shape, classes, vec![256, 128], self.dropout, seed),
            ModelKind::Cnn => ModelSpec::lenet(input_shape, classes, self.dropout, seed),
        };
        if let Some(h) = &self.hidden {
            spec.hidden = h.clone();
        }
        if let Some(c) = &self.conv_channels {
            spec.conv_channels = c.clone();
        }
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Standard,
    Robust,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with momentum.
    #[default]
    Sgd,
    /// Adam; `momentum` is ignored.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Epochs after each acquisition.
    pub epochs: usize,
    /// Epochs for the initial model; defaults to `epochs`.
    #[serde(default)]
    pub initial_epochs: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Early-stopping patience in epochs; `None` trains for every epoch.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    /// Validation items used for early stopping (all when `None`).
    #[serde(default)]
    pub val_limit: Option<usize>,
    /// Adversarial epochs over which the training epsilon ramps linearly up
    /// to its configured value, counted across a whole run (0 disables).
    #[serde(default)]
    pub epsilon_warmup_epochs: usize,
    /// Re-initialise the model before each stage's training instead of
    /// continuing from the current parameters.
    #[serde(default)]
    pub retrain_from_scratch: bool,
}

fn default_lr() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    64
}

fn default_patience() -> Option<usize> {
    Some(5)
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            initial_epochs: None,
            optimizer: OptimizerKind::Sgd,
            lr: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch(),
            patience: default_patience(),
            val_limit: None,
            epsilon_warmup_epochs: 0,
            retrain_from_scratch: false,
        }
    }
}

impl TrainingConfig {
    pub fn initial_epochs(&self) -> usize {
        self.initial_epochs.unwrap_or(self.epochs)
    }

    pub fn optimizer<E: crate::diffcore::Element>(&self) -> Result<crate::diffcore::Optimizer<E>> {
        use crate::diffcore::{Adam, Optimizer, Sgd};
        Ok(match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(self.lr, self.momentum)?),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.lr)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::ConfigInvalid(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::ConfigInvalid(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// An attack given either inline or by preset name.
pub(crate) fn attack<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttackConfig, D::Error> {
    resolve_attack(Value::deserialize(d)?).map_err(serde::de::Error::custom)
}

pub(crate) fn attacks<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<AttackConfig>, D::Error> {
    match Value::deserialize(d)? {
        Value::Array(items) => items.into_iter().map(resolve_attack).collect::<Result<_>>().map_err(serde::de::Error::custom),
        other => Err(serde::de::Error::custom(format!("expected a list of attacks, got {other}"))),
    }
}

fn resolve_attack(v: Value) -> Result<AttackConfig> {
    match v {
        Value::String(name) => AttackConfig::preset(&name).ok_or_else(|| Error::Schema {
            field: "attack".into(),
            message: format!("unknown attack preset `{name}` (valid: {})", ATTACK_PRESETS.join(", ")),
        }),
        other => Ok(serde_json::from_value(other)?),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    /// Seed of the validation/test split of the held-out data.
    #[serde(default)]
    pub split_seed: u64,
    pub model: ModelConfig,
    pub acquisition: Acquisition,
    pub mode: Mode,
    /// Maximum size of the labeled pool.
    pub budget: usize,
    pub initial: usize,
    pub per_stage: usize,
    /// Defaults to `ceil((budget - initial) / per_stage)`.
    #[serde(default)]
    pub stages: Option<usize>,
    pub training: TrainingConfig,
    #[serde(deserialize_with = "attack")]
    pub train_attack: AttackConfig,
    /// Evaluated after every stage.
    #[serde(deserialize_with = "attacks")]
    pub eval_attacks: Vec<AttackConfig>,
    /// Evaluated after the last stage only.
    #[serde(default, deserialize_with = "attacks")]
    pub final_eval_attacks: Vec<AttackConfig>,
    /// Test items used for evaluation (all when `None`).
    #[serde(default)]
    pub eval_limit: Option<usize>,
    #[serde(default)]
    pub acquisition_params: AcquisitionParams,
    #[serde(default)]
    pub dump_scores: bool,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn stage_count(&self) -> usize {
        self.stages.unwrap_or_else(|| self.budget.saturating_sub(self.initial).div_ceil(self.per_stage.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.per_stage == 0 || self.budget == 0 {
            return bad("budget and per_stage must be positive".into());
        }
        if self.initial == 0 {
            return bad("the initial labeled pool must not be empty".into());
        }
        if self.initial > self.budget {
            return bad(format!("initial pool {} exceeds the budget {}", self.initial, self.budget));
        }
        if let Some(k) = self.stages {
            if self.initial + k * self.per_stage > self.budget + self.per_stage - 1 {
                return bad(format!("{k} stages of {} exceed the budget {}", self.per_stage, self.budget));
            }
        }
        self.training.validate()?;
        for a in std::iter::once(&self.train_attack).chain(&self.eval_attacks).chain(&self.final_eval_attacks) {
            a.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        }
        if self.mode == Mode::Robust && self.train_attack.family != crate::attacks::AttackFamily::Pgd {
            return bad("robust training uses a pgd attack".into());
        }
        if self.acquisition.needs_dropout() && self.model.dropout == 0.0 {
            return bad(format!("{} needs a model with dropout", self.acquisition));
        }
        Ok(())
    }
}

/// Names accepted in a config's `preset` field.
pub const EXPERIMENT_PRESETS: [&str; 3] = ["mnist", "fashion-mnist", "mnist-desk"];

/// Preset values as a JSON object; a config's own fields override them.
pub fn experiment_preset(name: &str) -> Option<Value> {
    let idx = |dir: &str, limit: Option<usize>| {
        json!({
            "kind": "idx",
            "train_images": format!("{dir}/train-images-idx3-ubyte"),
            "train_labels": format!("{dir}/train-labels-idx1-ubyte"),
            "test_images": format!("{dir}/t10k-images-idx3-ubyte"),
            "test_labels": format!("{dir}/t10k-labels-idx1-ubyte"),
            "train_limit": limit,
        })
    };
    let common = |dataset: Value, budget: usize, stages: usize| {
        json!({
            "dataset": dataset,
            "model": {"kind": "cnn", "dropout": 0.1},
            "acquisition": "random",
            "mode": "robust",
            "budget": budget,
            "initial": 200,
            "per_stage": 200,
            "stages": stages,
            "training": {"epochs": 10},
            "train_attack": "mnist-train",
            "eval_attacks": ["mnist-eval"],
            "final_eval_attacks": ["mnist-square"],
        })
    };
    Some(match name {
        "mnist" => common(idx("mnist", None), 5000, 24),
        "fashion-mnist" => common(idx("fashion-mnist", None), 6000, 29),
        "mnist-desk" => json!({
            "dataset": idx("mnist", Some(6000)),
            "model": {"kind": "cnn", "dropout": 0.1},
            "acquisition": "random",
            "mode": "robust",
            "budget": 1000,
            "initial": 100,
            "per_stage": 100,
            "stages": 9,
            "training": {"epochs": 10, "patience": null, "epsilon_warmup_epochs": 10},
            "train_attack": "mnist-train",
            "eval_attacks": ["mnist-eval"],
            "eval_limit": 500,
        }),
        _ => return None,
    })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // A dataset of another kind replaces the preset's wholesale.
                    Some(slot) if k != "dataset" || slot.get("kind") == v.get("kind") || v.get("kind").is_none() => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Field named in a serde error message, if any.
fn offending_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<root>").to_string()
}

pub(crate) fn schema_error(e: serde_json::Error) -> Error {
    let message = e.to_string();
    Error::Schema { field: offending_field(&message), message }
}

pub(crate) fn require_seed(v: &Value) -> Result<()> {
    if v.get("seed").is_none() {
        return Err(Error::Schema { field: "seed".into(), message: "missing required field".into() });
    }
    Ok(())
}

/// Expands a preset (if any) and validates the result.
pub fn config_from_value(mut v: Value) -> Result<ExperimentConfig> {
    let obj: &mut Map<String, Value> = v.as_object_mut().ok_or_else(|| Error::Schema {
        field: "<root>".into(),
        message: "configuration must be a JSON object".into(),
    })?;
    let preset = obj.remove("preset");
    let own = Value::Object(std::mem::take(obj));
    require_seed(&own)?;
    let mut full = match preset {
        None => Value::Object(Map::new()),
        Some(Value::String(name)) => experiment_preset(&name).ok_or_else(|| Error::Schema {
            field: "preset".into(),
            message: format!("unknown preset `{name}` (valid: {})", EXPERIMENT_PRESETS.join(", ")),
        })?,
        Some(_) => return Err(Error::Schema { field: "preset".into(), message: "expected a preset name".into() }),
    };
    merge(&mut full, own);
    if let Some(name) = full.get("acquisition").and_then(Value::as_str) {
        name.parse::<Acquisition>()?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(full).map_err(schema_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("config is not valid JSON: {e}")))?;
    config_from_value(v)
}

/// Reads a config file; relative dataset paths are resolved against its directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(dir) = path.parent() {
        cfg.dataset = cfg.dataset.resolved(dir);
    }
    Ok(cfg)
}

impl DatasetConfig {
    /// Joins relative paths onto `base`.
    pub fn resolved(self, base: &Path) -> Self {
        let fix = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        match self {
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
                DatasetConfig::Idx {
                    train_images: fix(train_images),
                    train_labels: fix(train_labels),
                    test_images: fix(test_images),
                    test_labels: fix(test_labels),
                    train_limit,
                    test_limit,
                }
            }
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackFamily;

    #[test]
    fn mnist_preset_matches_the_configuration_table() {
        let cfg = parse_config(r#"{"preset": "mnist", "seed": 1}"#).unwrap();
        assert_eq!((cfg.budget, cfg.initial, cfg.per_stage), (5000, 200, 200));
        assert_eq!(cfg.stage_count(), 24);
        assert_eq!(cfg.stages, None.or(Some(24)));
        let eval = &cfg.eval_attacks[0];
        assert_eq!((eval.family, eval.epsilon, eval.alpha, eval.iters), (AttackFamily::Pgd, 0.3, 0.01, 50));
        assert_eq!((cfg.train_attack.epsilon, cfg.train_attack.alpha, cfg.train_attack.iters), (0.3, 0.01, 40));
        let f = parse_config(r#"{"preset": "fashion-mnist", "seed": 1}"#).unwrap();
        assert_eq!((f.budget, f.stage_count()), (6000, 29));
    }

    #[test]
    fn derived_stage_count() {
        let mut cfg = parse_config(r#"{"preset": "mnist", "seed": 1}"#).unwrap();
        cfg.stages = None;
        assert_eq!(cfg.stage_count(), 24);
        let desk = parse_config(r#"{"preset": "mnist-desk", "seed": 3}"#).unwrap();
        assert_eq!(desk.stage_count(), 9);
        assert_eq!(desk.initial + desk.stage_count() * desk.per_stage, desk.budget);
    }

    #[test]
    fn overrides_and_inline_attacks() {
        let cfg = parse_config(
            r#"{"preset": "mnist-desk", "seed": 4, "acquisition": "dre", "mode": "standard",
                "training": {"epochs": 3},
                "dataset": {"kind": "synth_digits", "train": 500, "test": 100},
                "eval_attacks": [{"family": "square", "epsilon": 0.1, "iters": 20, "norm": "linf"}, "rgb-eval"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.acquisition, Acquisition::Dre);
        assert_eq!(cfg.mode, Mode::Standard);
        assert_eq!(cfg.training.epochs, 3);
        assert!(matches!(cfg.dataset, DatasetConfig::SynthDigits { train: 500, .. }));
        assert_eq!(cfg.training.epsilon_warmup_epochs, 10);
        assert_eq!(cfg.training.patience, None);
        assert_eq!(cfg.eval_attacks[0].family, AttackFamily::Square);
        assert_eq!(cfg.eval_attacks[1].epsilon, 8.0 / 255.0);
    }

    #[test]
    fn schema_errors_name_the_field() {
        match parse_config(r#"{"preset": "mnist"}"#) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "seed"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"preset": "mnist", "seed": 1, "budgte": 3}"#) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "budgte"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("{"), Err(Error::Parse(_))));
        assert!(matches!(parse_config(r#"{"preset": "svhn", "seed": 1}"#), Err(Error::Schema { .. })));
        let err = parse_config(r#"{"preset": "mnist", "seed": 1, "acquisition": "nope"}"#).unwrap_err();
        assert!(matches!(err, Error::UnknownAcquisition { .. }));
        assert!(err.is_config_error());
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let base = r#"{"preset": "mnist-desk", "seed": 1, "#;
        for extra in [
            r#""initial": 2000}"#,
            r#""stages": 20}"#,
            r#""acquisition": "bald", "model": {"kind": "mlp", "dropout": 0.0}}"#,
            r#""train_attack": "mnist-square"}"#,
        ] {
            let err = parse_config(&format!("{base}{extra}")).unwrap_err();
            assert!(matches!(err, Error::ConfigInvalid(_)), "{extra}: {err:?}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"preset": "mnist", "seed": 0}"#).unwrap();
        let cfg = load_config(&path).unwrap();
        match cfg.dataset {
            DatasetConfig::Idx { train_images, .. } => assert!(train_images.starts_with(dir.path())),
            other => panic!("{other:?}"),
        }
    }
}
