//! Adversarial attacks and accuracy/robustness evaluation.

mod deepfool;
mod pgd;
mod square;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::nets::Model;

pub use deepfool::{deepfool, DeepFoolConfig, DeepFoolResult};
pub use pgd::pgd_attack;
pub use square::{square_attack, square_attack_with_trace, ProbabilityOracle};

/// Items per independently seeded work unit. Results do not depend on how
/// many threads process the units.
pub(crate) const ATTACK_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Pgd,
    Square,
    Deepfool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// Radius of the perturbation ball (ignored by DeepFool).
    #[serde(default)]
    pub epsilon: f64,
    /// PGD step size.
    #[serde(default)]
    pub alpha: f64,
    /// PGD steps, Square queries, or DeepFool's iteration cap.
    pub iters: usize,
    pub norm: Norm,
    #[serde(default)]
    pub seed: u64,
    /// PGD starts from a uniform point in the ball rather than the input.
    #[serde(default = "yes")]
    pub random_start: bool,
    /// Initial fraction of pixels covered by a Square proposal.
    #[serde(default = "default_p_init")]
    pub p_init: f64,
    #[serde(default = "default_overshoot")]
    pub overshoot: f64,
}

fn yes() -> bool {
    true
}

fn default_p_init() -> f64 {
    0.8
}

fn default_overshoot() -> f64 {
    0.02
}

/// Names accepted by [`AttackConfig::preset`].
pub const ATTACK_PRESETS: [&str; 6] = ["mnist-train", "mnist-eval", "rgb-eval", "mnist-square", "rgb-square", "deepfool"];

impl AttackConfig {
    pub fn pgd(epsilon: f64, alpha: f64, iters: usize) -> Self {
        AttackConfig {
            family: AttackFamily::Pgd,
            epsilon,
            alpha,
            iters,
            norm: Norm::Linf,
            seed: 0,
            random_start: true,
            p_init: default_p_init(),
            overshoot: default_overshoot(),
        }
    }

    pub fn square(epsilon: f64, iters: usize) -> Self {
        AttackConfig { family: AttackFamily::Square, alpha: 0.0, ..Self::pgd(epsilon, 0.0, iters) }
    }

    pub fn deepfool(overshoot: f64, max_iter: usize) -> Self {
        AttackConfig { family: AttackFamily::Deepfool, norm: Norm::L2, overshoot, ..Self::pgd(0.0, 0.0, max_iter) }
    }

    /// Training and evaluation settings for MNIST-like and RGB inputs.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "mnist-train" => Self::pgd(0.3, 0.01, 40),
            "mnist-eval" => Self::pgd(0.3, 0.01, 50),
            "rgb-eval" => Self::pgd(8.0 / 255.0, 2.0 / 255.0, 50),
            "mnist-square" => Self::square(0.3, 500),
            "rgb-square" => Self::square(8.0 / 255.0, 500),
            "deepfool" => Self::deepfool(0.02, 50),
            _ => return None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be finite and >= 0", self.epsilon));
        }
        match self.family {
            AttackFamily::Pgd | AttackFamily::Square if self.norm != Norm::Linf => {
                bad(format!("{:?} works in the linf norm", self.family))
            }
            AttackFamily::Deepfool if self.norm != Norm::L2 => bad("deepfool works in the l2 norm".into()),
            AttackFamily::Pgd if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                bad(format!("pgd step size {} must be > 0", self.alpha))
            }
            AttackFamily::Square if !(self.p_init > 0.0 && self.p_init <= 1.0) => {
                bad(format!("p_init {} must lie in (0, 1]", self.p_init))
            }
            AttackFamily::Deepfool if !(self.overshoot >= 0.0 && self.overshoot.is_finite()) => {
                bad(format!("overshoot {} must be >= 0", self.overshoot))
            }
            _ => Ok(()),
        }
    }

    /// Non-fatal oddities worth reporting.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.family == AttackFamily::Pgd && self.alpha > self.epsilon && self.epsilon > 0.0 {
            out.push(format!("pgd step {} exceeds the radius {}", self.alpha, self.epsilon));
        }
        out
    }
}

/// Projects `v` into `[x - eps, x + eps] ∩ [0, 1]` so that the bound also
/// holds when the result is re-read as `f64`.
pub(crate) fn project<E: Element>(v: f64, center: E, eps: f64) -> E {
    let c = center.f64();
    let lo = (c - eps).max(0.0);
    let hi = (c + eps).min(1.0);
    let mut out = E::of(v.clamp(lo, hi));
    while out.f64() > hi {
        out = out.next_down();
    }
    while out.f64() < lo {
        out = out.next_up();
    }
    out
}

pub(crate) fn check_inputs<E: Element>(x: &Tensor<E>, labels: &[usize]) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::CountMismatch { images: x.rows(), labels: labels.len() });
    }
    if let Some(v) = x.data().iter().find(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
        if !v.is_finite() {
            return Err(Error::NonFinite("attack input"));
        }
        return Err(Error::InvalidArgument(format!("attack input {v:?} outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Runs `f` on each block of at most [`ATTACK_CHUNK`] items in parallel and
/// reassembles the outputs in order.
pub(crate) fn map_chunks<E, F>(x: &Tensor<E>, labels: &[usize], f: F) -> Result<Tensor<E>>
where
    E: Element,
    F: Fn(usize, Tensor<E>, &[usize]) -> Result<Tensor<E>> + Sync,
{
    let n = x.rows();
    if n == 0 {
        return Ok(x.clone());
    }
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    let parts = starts
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let e = (s + ATTACK_CHUNK).min(n);
            let rows: Vec<usize> = (s..e).collect();
            f(k, x.select_rows(&rows), &labels[s..e])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Applies one attack to a batch.
pub fn attack_batch<E: Element>(model: &Model<E>, x: &Tensor<E>, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor<E>> {
    match cfg.family {
        AttackFamily::Pgd => pgd_attack(model, x, labels, cfg),
        AttackFamily::Square => square_attack(model, x, labels, cfg),
        AttackFamily::Deepfool => {
            check_inputs(x, labels)?;
            let df = DeepFoolConfig { overshoot: cfg.overshoot, max_iter: cfg.iters };
            let mut out = x.clone();
            for (i, &y) in labels.iter().enumerate() {
                let r = deepfool(model, x.row(i), &df, Some(y))?;
                for (o, (&xi, &ri)) in out.row_mut(i).iter_mut().zip(x.row(i).iter().zip(r.perturbation.data())) {
                    *o = E::of((xi.f64() + ri.f64()).clamp(0.0, 1.0));
                }
            }
            Ok(out)
        }
    }
}

fn accuracy_of<E: Element>(model: &Model<E>, x: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let pred = model.predict(x)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of items whose arg-max prediction (lowest class on ties) equals the label.
pub fn evaluate_accuracy<E: Element>(model: &Model<E>, d: &Dataset<E>) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    accuracy_of(model, d.images(), d.labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub config: AttackConfig,
    pub robustness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackOutcome>,
    pub n: usize,
}

impl RobustnessReport {
    /// Robustness under the first attack of the given family.
    pub fn robustness(&self, family: AttackFamily) -> Option<f64> {
        self.attacks.iter().find(|a| a.config.family == family).map(|a| a.robustness)
    }
}

/// Clean accuracy plus accuracy on attacked versions of every item.
pub fn evaluate_robustness<E: Element>(model: &Model<E>, d: &Dataset<E>, cfgs: &[AttackConfig]) -> Result<RobustnessReport> {
    let clean_accuracy = evaluate_accuracy(model, d)?;
    let mut attacks = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        cfg.validate()?;
        let adv = attack_batch(model, d.images(), d.labels(), cfg)?;
        attacks.push(AttackOutcome { config: cfg.clone(), robustness: accuracy_of(model, &adv, d.labels())? });
    }
    Ok(RobustnessReport { clean_accuracy, attacks, n: d.len() })
}

#[cfg(test)]
mod tests;
