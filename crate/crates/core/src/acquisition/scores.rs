//! Uncertainty scores computed from softmax outputs.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{deepfool, DeepFoolConfig};
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::nets::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherFirst,
    LowerFirst,
}

/// One score per item with the order in which items should be picked.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub direction: Direction,
}

impl ScoreVector {
    /// Scores for items `0..scores.len()`.
    pub fn new(scores: Vec<f64>, direction: Direction) -> Result<Self> {
        Self::with_indices((0..scores.len()).collect(), scores, direction)
    }

    pub fn with_indices(indices: Vec<usize>, scores: Vec<f64>, direction: Direction) -> Result<Self> {
        if indices.len() != scores.len() {
            return Err(Error::LengthMismatch(indices.len(), scores.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("acquisition score"));
        }
        Ok(ScoreVector { indices, scores, direction })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Replaces positional indices by `map[position]`.
    pub fn remap(mut self, map: &[usize]) -> Self {
        self.indices.iter_mut().for_each(|i| *i = map[*i]);
        self
    }

    /// Positions ordered best first; ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let by_score = match self.direction {
                Direction::HigherFirst => self.scores[b].total_cmp(&self.scores[a]),
                Direction::LowerFirst => self.scores[a].total_cmp(&self.scores[b]),
            };
            by_score.then(self.indices[a].cmp(&self.indices[b]))
        });
        order
    }

    /// Indices of the `n` best items.
    pub fn top(&self, n: usize) -> Result<Vec<usize>> {
        if n > self.len() {
            return Err(Error::BudgetTooLarge { requested: n, available: self.len() });
        }
        Ok(self.ranking().into_iter().take(n).map(|p| self.indices[p]).collect())
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn gini(p: &[f64]) -> f64 {
    1.0 - p.iter().map(|v| v * v).sum::<f64>()
}

pub fn least_confidence(p: &[f64]) -> f64 {
    1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Largest minus second-largest probability.
pub fn margin(p: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

/// Probability rows as `f64`, rejecting anything that is not a distribution.
pub fn probability_rows<E: Element>(p: &Tensor<E>) -> Result<Vec<Vec<f64>>> {
    if p.shape().len() != 2 || p.shape()[1] < 2 {
        return Err(Error::ShapeMismatch(format!("probabilities must be [n, C >= 2], got {:?}", p.shape())));
    }
    (0..p.rows())
        .map(|i| {
            let row: Vec<f64> = p.row(i).iter().map(|v| v.f64()).collect();
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::NotDistribution { row: i, sum });
            }
            Ok(row)
        })
        .collect()
}

fn per_row<E: Element>(p: &Tensor<E>, f: fn(&[f64]) -> f64, direction: Direction) -> Result<ScoreVector> {
    let rows = probability_rows(p)?;
    ScoreVector::new(rows.iter().map(|r| f(r)).collect(), direction)
}

pub fn score_max_entropy<E: Element>(p: &Tensor<E>) -> Result<ScoreVector> {
    per_row(p, entropy, Direction::HigherFirst)
}

pub fn score_deepgini<E: Element>(p: &Tensor<E>) -> Result<ScoreVector> {
    per_row(p, gini, Direction::HigherFirst)
}

pub fn score_least_confidence<E: Element>(p: &Tensor<E>) -> Result<ScoreVector> {
    per_row(p, least_confidence, Direction::HigherFirst)
}

pub fn score_margin<E: Element>(p: &Tensor<E>) -> Result<ScoreVector> {
    per_row(p, margin, Direction::LowerFirst)
}

fn pass_rows<E: Element>(passes: &Tensor<E>) -> Result<(usize, usize, usize)> {
    match *passes.shape() {
        [t, n, c] if t >= 1 && c >= 2 => Ok((t, n, c)),
        _ => Err(Error::ShapeMismatch(format!("MC passes must be [T >= 1, n, C >= 2], got {:?}", passes.shape()))),
    }
}

fn mean_and_rows<E: Element>(passes: &Tensor<E>) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let (t, n, c) = pass_rows(passes)?;
    let per_pass: Vec<Vec<Vec<f64>>> = (0..t)
        .map(|k| probability_rows(&passes.select_rows(&[k]).reshape([n, c])?))
        .collect::<Result<_>>()?;
    let mean = (0..n)
        .map(|i| (0..c).map(|j| per_pass.iter().map(|p| p[i][j]).sum::<f64>() / t as f64).collect())
        .collect();
    Ok((mean, per_pass))
}

/// Mutual information between prediction and dropout mask, from stacked
/// `[T, n, C]` MC-dropout outputs: `H(mean) - mean(H)`.
pub fn bald_from_passes<E: Element>(passes: &Tensor<E>) -> Result<ScoreVector> {
    let (mean, per_pass) = mean_and_rows(passes)?;
    let t = per_pass.len() as f64;
    let scores = mean
        .iter()
        .enumerate()
        .map(|(i, m)| entropy(m) - per_pass.iter().map(|p| entropy(&p[i])).sum::<f64>() / t)
        .collect();
    ScoreVector::new(scores, Direction::HigherFirst)
}

/// Entropy of the averaged MC-dropout prediction.
pub fn dropout_entropy_from_passes<E: Element>(passes: &Tensor<E>) -> Result<ScoreVector> {
    let (mean, _) = mean_and_rows(passes)?;
    ScoreVector::new(mean.iter().map(|m| entropy(m)).collect(), Direction::HigherFirst)
}

pub fn score_bald<E: Element>(model: &Model<E>, x: &Tensor<E>, passes: usize, rng: &mut dyn RngCore) -> Result<ScoreVector> {
    if passes < 2 {
        return Err(Error::InvalidArgument(format!("BALD needs at least 2 passes, got {passes}")));
    }
    bald_from_passes(&model.predict_proba_mc(x, passes, rng)?)
}

pub fn score_dropout_entropy<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    passes: usize,
    rng: &mut dyn RngCore,
) -> Result<ScoreVector> {
    dropout_entropy_from_passes(&model.predict_proba_mc(x, passes, rng)?)
}

/// Expected gradient length: `sum_i p_i * ||grad_theta J(x, i)||`.
pub fn score_egl<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Result<ScoreVector> {
    let probs = probability_rows(&model.predict_proba(x)?)?;
    let scores = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for (label, &p) in probs[i].iter().enumerate() {
                if p > 0.0 {
                    s += p * model.param_grad_norm(x.row(i), label)?;
                }
            }
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::NonFinite("expected gradient length"))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreVector::new(scores, Direction::HigherFirst)
}

/// DeepFool perturbation norm relative to the model's own prediction.
/// The adversarial points themselves are discarded.
pub fn score_dfal<E: Element>(model: &Model<E>, x: &Tensor<E>, cfg: &DeepFoolConfig) -> Result<ScoreVector> {
    let scores = (0..x.rows())
        .into_par_iter()
        .map(|i| deepfool(model, x.row(i), cfg, None).map(|r| r.norm))
        .collect::<Result<Vec<f64>>>()?;
    ScoreVector::new(scores, Direction::LowerFirst)
}
