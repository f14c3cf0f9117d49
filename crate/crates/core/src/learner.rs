//! Standard and robust pool-based active-learning loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{build_dump, select, write_dump, Acquisition, DumpRow};
use crate::attacks::{attack_batch, evaluate_accuracy, evaluate_robustness, AttackConfig, AttackFamily};
use crate::config::{DatasetConfig, ExperimentConfig, Mode, TrainingConfig};
use crate::data::{load_idx, split_val_test, synth_blobs, synth_digits, Dataset, PoolState};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::Model;

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;
const ATTACK: u64 = 3;
const ACQUIRE: u64 = 4;
const TRAIN: u64 = 5;
const EVAL: u64 = 6;

/// splitmix64 finaliser over a seed and two counters.
pub fn derive_seed(seed: u64, purpose: u64, counter: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64, purpose: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, counter))
}

/// Pool, validation half and test half of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub pool: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl ExperimentData {
    /// Splits `heldout` into validation and test halves.
    pub fn from_parts(pool: Dataset, heldout: &Dataset, split_seed: u64) -> Result<Self> {
        let (validation, test) = split_val_test(heldout, split_seed)?;
        Ok(ExperimentData { pool, validation, test })
    }

    pub fn load(cfg: &DatasetConfig, split_seed: u64) -> Result<Self> {
        let limit = |d: Dataset, n: &Option<usize>| match n {
            Some(n) if *n < d.len() => d.head(*n),
            _ => Ok(d),
        };
        let (pool, heldout) = match cfg {
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => (
                limit(load_idx(train_images, train_labels)?, train_limit)?,
                limit(load_idx(test_images, test_labels)?, test_limit)?,
            ),
            DatasetConfig::SynthDigits { train, test, seed } => {
                (synth_digits(*train, *seed)?, synth_digits(*test, seed.wrapping_add(1))?)
            }
            DatasetConfig::Blobs { classes, per_class, test_per_class, dim, spread, seed } => (
                synth_blobs(*classes, *per_class, *dim, *spread, *seed)?,
                synth_blobs(*classes, *test_per_class, *dim, *spread, seed.wrapping_add(1))?,
            ),
        };
        Self::from_parts(pool, &heldout, split_seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub labeled: usize,
    pub accuracy: f64,
    pub rob_pgd: Option<f64>,
    pub rob_square: Option<f64>,
    pub seconds: Option<f64>,
    pub acquisition: Acquisition,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageMetrics {
    pub accuracy: f64,
    pub rob_pgd: Option<f64>,
    pub rob_square: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch (1-based) whose parameters were kept, when early stopping ran.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Minibatch SGD on the clean labeled items `indices` of `data`.
///
/// With a validation set and a patience, training stops once validation
/// accuracy has not improved for `patience` epochs and the best parameters
/// are restored.
pub fn train_standard(
    model: &mut Model,
    data: &Dataset,
    indices: &[usize],
    validation: Option<&Dataset>,
    epochs: usize,
    tc: &TrainingConfig,
    seed: u64,
) -> Result<TrainReport> {
    fit(model, data, indices, validation, epochs, tc, None, seed)
}

/// Training epsilon for the adversarial epoch numbered `done` (from 0)
/// under the warm-up schedule of `tc`.
pub fn warmup_epsilon(epsilon: f64, tc: &TrainingConfig, done: usize) -> f64 {
    match tc.epsilon_warmup_epochs {
        0 => epsilon,
        w => epsilon * ((done + 1) as f64 / w as f64).min(1.0),
    }
}

/// Like [`train_standard`], but every minibatch is replaced by PGD examples
/// generated against the current parameters; clean items are not used.
/// Early stopping monitors adversarial validation accuracy once the epsilon
/// warm-up is over; `completed` counts adversarial epochs the model has
/// already been through.
#[allow(clippy::too_many_arguments)]
pub fn train_adversarial(
    model: &mut Model,
    data: &Dataset,
    indices: &[usize],
    validation: Option<&Dataset>,
    epochs: usize,
    tc: &TrainingConfig,
    attack: &AttackConfig,
    completed: usize,
    seed: u64,
) -> Result<TrainReport> {
    if attack.family != AttackFamily::Pgd {
        return Err(Error::ConfigInvalid("adversarial training needs a pgd attack".into()));
    }
    attack.validate()?;
    fit(model, data, indices, validation, epochs, tc, Some((attack, completed)), seed)
}

#[allow(clippy::too_many_arguments)]
fn fit(
    model: &mut Model,
    data: &Dataset,
    indices: &[usize],
    validation: Option<&Dataset>,
    epochs: usize,
    tc: &TrainingConfig,
    attack: Option<(&AttackConfig, usize)>,
    seed: u64,
) -> Result<TrainReport> {
    if indices.is_empty() {
        return Err(Error::EmptyPool);
    }
    tc.validate()?;
    let mut shuffle = rng(seed, SHUFFLE, 0);
    let mut dropout = rng(seed, DROPOUT, 0);
    let mut opt = tc.optimizer()?;
    let mut order = indices.to_vec();
    let monitor = validation.zip(tc.patience);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut report = TrainReport { epochs_run: 0, best_epoch: None, best_metric: None, last_loss: None };
    for epoch in 0..epochs {
        let mut warming = false;
        let attack = attack.map(|(a, done)| {
            let mut a = a.clone();
            a.epsilon = warmup_epsilon(a.epsilon, tc, done + epoch);
            warming = done + epoch + 1 < tc.epsilon_warmup_epochs;
            a
        });
        order.shuffle(&mut shuffle);
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let (x, y) = data.batch(chunk);
            let x = match &attack {
                Some(a) => {
                    let a = a.clone().with_seed(derive_seed(seed, ATTACK, ((epoch as u64) << 32) | b as u64));
                    attack_batch(model, &x, &y, &a)?
                }
                None => x,
            };
            let loss = model.accumulate_loss_gradients(&x, &y, Some(&mut dropout))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            opt.step(model.params_mut())?;
            report.last_loss = Some(loss);
        }
        report.epochs_run = epoch + 1;
        if warming {
            continue;
        }
        if let Some((val, patience)) = monitor {
            let metric = match &attack {
                None => evaluate_accuracy(model, val)?,
                Some(a) => {
                    let a = a.clone().with_seed(derive_seed(seed, ATTACK, u64::MAX - epoch as u64));
                    evaluate_robustness(model, val, &[a])?.attacks[0].robustness
                }
            };
            if best.as_ref().is_none_or(|(m, _, _)| metric > *m) {
                best = Some((metric, epoch + 1, model.params().to_vec()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    if let Some((metric, epoch, params)) = best {
        model.load_params(&params)?;
        report.best_epoch = Some(epoch);
        report.best_metric = Some(metric);
    }
    Ok(report)
}

/// Clean accuracy plus PGD and Square robustness (first attack of each
/// family) on `test`.
pub fn evaluate_stage(model: &Model, test: &Dataset, attacks: &[AttackConfig]) -> Result<StageMetrics> {
    let report = evaluate_robustness(model, test, attacks)?;
    Ok(StageMetrics {
        accuracy: report.clean_accuracy,
        rob_pgd: report.robustness(AttackFamily::Pgd),
        rob_square: report.robustness(AttackFamily::Square),
    })
}

/// What the loop reports after each stage.
pub struct StageEvent<'a> {
    pub record: &'a StageRecord,
    pub model: &'a Model,
    pub pool: &'a PoolState,
    /// Pre-selection pool characteristics, when score dumps are enabled.
    pub dump: Option<&'a [DumpRow]>,
}

/// Runs stage 0 (standard training on the initial pool) and then up to
/// `cfg.stage_count()` acquire-and-train stages, calling `observer` after
/// each. `wall_clock` fills the `seconds` column.
pub fn run_active_learning(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    wall_clock: bool,
    observer: &mut dyn FnMut(&StageEvent) -> Result<()>,
) -> Result<Vec<StageRecord>> {
    cfg.validate()?;
    let n = data.pool.len();
    if cfg.initial > n {
        return Err(Error::ConfigInvalid(format!("initial pool {} exceeds the {n} pool items", cfg.initial)));
    }
    let validation = match cfg.training.val_limit {
        Some(v) => data.validation.head(v.min(data.validation.len()))?,
        None => data.validation.clone(),
    };
    let test = match cfg.eval_limit {
        Some(v) => data.test.head(v.min(data.test.len()))?,
        None => data.test.clone(),
    };
    let spec = cfg.model.to_spec(data.pool.image_shape(), data.pool.classes().max(data.test.classes()), cfg.seed);
    let mut model = Model::build(spec.clone())?;
    let mut pool = PoolState::init(n, cfg.initial, cfg.seed)?.with_budget(cfg.budget)?;
    let stages = cfg.stage_count();
    let eval_seed = derive_seed(cfg.seed, EVAL, 0);
    let eval_attacks: Vec<AttackConfig> = cfg.eval_attacks.iter().map(|a| a.clone().with_seed(eval_seed)).collect();
    let mut final_attacks = eval_attacks.clone();
    final_attacks.extend(cfg.final_eval_attacks.iter().map(|a| a.clone().with_seed(eval_seed)));

    let mut records = Vec::with_capacity(stages + 1);
    let mut adversarial_epochs = 0;
    let mut stage = 0;
    loop {
        let start = Instant::now();
        let mut dump = None;
        if stage > 0 {
            let take = cfg.per_stage.min(pool.remaining());
            let mut acq_rng = rng(cfg.seed, ACQUIRE, stage as u64);
            let selection = select(
                cfg.acquisition,
                &model,
                &data.pool,
                pool.unlabeled(),
                pool.labeled(),
                take,
                &cfg.acquisition_params,
                &mut acq_rng,
            )?;
            if cfg.dump_scores {
                dump = Some(build_dump(&model, &data.pool, pool.unlabeled(), &selection)?);
            }
            pool.transfer(&selection.selected, stage)?;
            if cfg.training.retrain_from_scratch {
                model = Model::build(spec.clone())?;
            }
        }
        let seed = derive_seed(cfg.seed, TRAIN, stage as u64);
        let epochs = if stage == 0 { cfg.training.initial_epochs() } else { cfg.training.epochs };
        let robust = stage > 0 && cfg.mode == Mode::Robust;
        if robust {
            let r = train_adversarial(
                &mut model,
                &data.pool,
                pool.labeled(),
                Some(&validation),
                epochs,
                &cfg.training,
                &cfg.train_attack,
                adversarial_epochs,
                seed,
            )?;
            adversarial_epochs += r.epochs_run;
        } else {
            train_standard(&mut model, &data.pool, pool.labeled(), Some(&validation), epochs, &cfg.training, seed)?;
        }
        let last = stage == stages || pool.remaining() == 0;
        let metrics = evaluate_stage(&model, &test, if last { &final_attacks } else { &eval_attacks })?;
        let record = StageRecord {
            stage,
            labeled: pool.labeled().len(),
            accuracy: metrics.accuracy,
            rob_pgd: metrics.rob_pgd,
            rob_square: metrics.rob_square,
            seconds: wall_clock.then(|| start.elapsed().as_secs_f64()),
            acquisition: cfg.acquisition,
            seed: cfg.seed,
        };
        observer(&StageEvent { record: &record, model: &model, pool: &pool, dump: dump.as_deref() })?;
        records.push(record);
        if last {
            break;
        }
        stage += 1;
    }
    Ok(records)
}

/// `<out>/dumps/seed<seed>/stage<k>.csv`
pub fn dump_path(out: &Path, seed: u64, stage: usize) -> PathBuf {
    out.join("dumps").join(format!("seed{seed}")).join(format!("stage{stage:03}.csv"))
}

/// Runs one seed, writing score dumps (if enabled) and optional per-stage
/// checkpoints under `out`.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    out: &Path,
    wall_clock: bool,
    checkpoints: bool,
    progress: &mut dyn FnMut(&StageRecord),
) -> Result<Vec<StageRecord>> {
    run_active_learning(cfg, data, wall_clock, &mut |ev: &StageEvent| {
        if let Some(rows) = ev.dump {
            write_dump(&dump_path(out, cfg.seed, ev.record.stage), rows)?;
        }
        if checkpoints {
            let path = out.join("checkpoints").join(format!("seed{}", cfg.seed)).join(format!("stage{:03}.json", ev.record.stage));
            std::fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
            ev.model.save(&path)?;
        }
        progress(ev.record);
        Ok(())
    })
}

pub fn write_stages_csv(path: &Path, records: &[StageRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stages_csv(path: &Path) -> Result<Vec<StageRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
