//! The twelve acquisition functions and their per-stage score dumps.

mod density;
mod procedures;
mod scores;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attacks::DeepFoolConfig;
use crate::data::Dataset;
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::nets::Model;

pub use density::{
    bin_index, categorical_pdf, estimate_pdf, largest_remainder, largest_remainder_counts, select_stratified,
    stratified_quotas, Histogram, DEFAULT_BINS,
};
pub use procedures::{boundary_priority, select_coreset, select_mcp, select_random};
pub use scores::{
    bald_from_passes, dropout_entropy_from_passes, entropy, gini, least_confidence, margin, probability_rows,
    score_bald, score_deepgini, score_dfal, score_dropout_entropy, score_egl, score_least_confidence, score_margin,
    score_max_entropy, Direction, ScoreVector,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Acquisition {
    MaxEntropy,
    DeepGini,
    Bald,
    DropoutEntropy,
    LeastConfidence,
    Margin,
    Mcp,
    Dfal,
    Egl,
    Coreset,
    Random,
    Dre,
}

impl Acquisition {
    pub const ALL: [Acquisition; 12] = [
        Acquisition::MaxEntropy,
        Acquisition::DeepGini,
        Acquisition::Bald,
        Acquisition::DropoutEntropy,
        Acquisition::LeastConfidence,
        Acquisition::Margin,
        Acquisition::Mcp,
        Acquisition::Dfal,
        Acquisition::Egl,
        Acquisition::Coreset,
        Acquisition::Random,
        Acquisition::Dre,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Acquisition::MaxEntropy => "entropy",
            Acquisition::DeepGini => "gini",
            Acquisition::Bald => "bald",
            Acquisition::DropoutEntropy => "dropout-entropy",
            Acquisition::LeastConfidence => "lc",
            Acquisition::Margin => "margin",
            Acquisition::Mcp => "mcp",
            Acquisition::Dfal => "dfal",
            Acquisition::Egl => "egl",
            Acquisition::Coreset => "coreset",
            Acquisition::Random => "random",
            Acquisition::Dre => "dre",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    }

    /// Whether the function needs MC-dropout passes.
    pub fn needs_dropout(self) -> bool {
        matches!(self, Acquisition::Bald | Acquisition::DropoutEntropy)
    }
}

impl fmt::Display for Acquisition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Acquisition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match key.as_str() {
            "entropy" | "max-entropy" | "maxentropy" => Acquisition::MaxEntropy,
            "gini" | "deepgini" | "deep-gini" => Acquisition::DeepGini,
            "bald" => Acquisition::Bald,
            "dropout-entropy" | "dropoutentropy" => Acquisition::DropoutEntropy,
            "lc" | "least-confidence" => Acquisition::LeastConfidence,
            "margin" => Acquisition::Margin,
            "mcp" => Acquisition::Mcp,
            "dfal" => Acquisition::Dfal,
            "egl" => Acquisition::Egl,
            "coreset" | "core-set" => Acquisition::Coreset,
            "random" => Acquisition::Random,
            "dre" => Acquisition::Dre,
            _ => return Err(Error::UnknownAcquisition { name: s.to_string(), valid: Self::valid_names() }),
        })
    }
}

impl Serialize for Acquisition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Acquisition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionParams {
    /// MC-dropout passes for BALD and DropOut-Entropy.
    pub mc_passes: usize,
    pub deepfool: DeepFoolConfig,
    /// DFAL scores a uniform pre-pool of `factor * n` unlabeled items.
    pub dfal_prepool_factor: usize,
    pub bins: usize,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        AcquisitionParams { mc_passes: 10, deepfool: DeepFoolConfig::default(), dfal_prepool_factor: 10, bins: DEFAULT_BINS }
    }
}

/// Dataset indices chosen for labeling, plus the scores behind the choice
/// when the function has any.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub scores: Option<ScoreVector>,
}

/// Picks `n` items of `unlabeled` (dataset indices) to label next.
#[allow(clippy::too_many_arguments)]
pub fn select<E: Element>(
    acq: Acquisition,
    model: &Model<E>,
    data: &Dataset<E>,
    unlabeled: &[usize],
    labeled: &[usize],
    n: usize,
    params: &AcquisitionParams,
    rng: &mut dyn RngCore,
) -> Result<Selection> {
    if n > unlabeled.len() {
        return Err(Error::BudgetTooLarge { requested: n, available: unlabeled.len() });
    }
    let images = |idx: &[usize]| data.images().select_rows(idx);
    let ranked = |sv: ScoreVector, map: &[usize]| -> Result<Selection> {
        let sv = sv.remap(map);
        Ok(Selection { selected: sv.top(n)?, scores: Some(sv) })
    };
    match acq {
        Acquisition::Random => {
            let picks = select_random(unlabeled.len(), n, rng)?;
            Ok(Selection { selected: picks.into_iter().map(|p| unlabeled[p]).collect(), scores: None })
        }
        Acquisition::MaxEntropy | Acquisition::DeepGini | Acquisition::LeastConfidence | Acquisition::Margin => {
            let p = model.predict_proba(&images(unlabeled))?;
            let sv = match acq {
                Acquisition::MaxEntropy => score_max_entropy(&p)?,
                Acquisition::DeepGini => score_deepgini(&p)?,
                Acquisition::LeastConfidence => score_least_confidence(&p)?,
                _ => score_margin(&p)?,
            };
            ranked(sv, unlabeled)
        }
        Acquisition::Bald => ranked(score_bald(model, &images(unlabeled), params.mc_passes, rng)?, unlabeled),
        Acquisition::DropoutEntropy => {
            ranked(score_dropout_entropy(model, &images(unlabeled), params.mc_passes, rng)?, unlabeled)
        }
        Acquisition::Egl => ranked(score_egl(model, &images(unlabeled))?, unlabeled),
        Acquisition::Dfal => {
            let size = unlabeled.len().min(params.dfal_prepool_factor.saturating_mul(n));
            let mut prepool: Vec<usize> =
                index::sample(rng, unlabeled.len(), size).into_iter().map(|p| unlabeled[p]).collect();
            prepool.sort_unstable();
            ranked(score_dfal(model, &images(&prepool), &params.deepfool)?, &prepool)
        }
        Acquisition::Mcp => {
            let p = model.predict_proba(&images(unlabeled))?;
            let picks = select_mcp(&p, n)?;
            let rows = probability_rows(&p)?;
            let ratios = rows.iter().map(|r| boundary_priority(r).2).collect();
            let sv = ScoreVector::with_indices(unlabeled.to_vec(), ratios, Direction::HigherFirst)?;
            Ok(Selection { selected: picks.into_iter().map(|p| unlabeled[p]).collect(), scores: Some(sv) })
        }
        Acquisition::Coreset => {
            let emb_u = model.penultimate_embedding(&images(unlabeled))?;
            let emb_l = if labeled.is_empty() {
                Tensor::zeros([0, emb_u.row_len()])
            } else {
                model.penultimate_embedding(&images(labeled))?
            };
            let picks = select_coreset(&emb_l, &emb_u, n)?;
            Ok(Selection { selected: picks.into_iter().map(|p| unlabeled[p]).collect(), scores: None })
        }
        Acquisition::Dre => {
            let p = model.predict_proba(&images(unlabeled))?;
            let sv = score_max_entropy(&p)?;
            let picks = select_stratified(&sv.scores, n, params.bins, rng)?;
            let selected = picks.into_iter().map(|p| unlabeled[p]).collect();
            Ok(Selection { selected, scores: Some(sv.remap(unlabeled)) })
        }
    }
}

/// One unlabeled item as seen by the model at selection time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub index: usize,
    pub score: Option<f64>,
    pub selected: bool,
    pub entropy: f64,
    pub gini: f64,
    pub lc: f64,
    pub margin: f64,
    pub true_label: usize,
}

/// Characteristics of every item of the pre-selection unlabeled pool.
pub fn build_dump<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    unlabeled: &[usize],
    selection: &Selection,
) -> Result<Vec<DumpRow>> {
    let probs = probability_rows(&model.predict_proba(&data.images().select_rows(unlabeled))?)?;
    let mut chosen = selection.selected.clone();
    chosen.sort_unstable();
    let mut score_of = std::collections::HashMap::new();
    if let Some(sv) = &selection.scores {
        score_of.extend(sv.indices.iter().copied().zip(sv.scores.iter().copied()));
    }
    Ok(unlabeled
        .iter()
        .zip(&probs)
        .map(|(&index, p)| DumpRow {
            index,
            score: score_of.get(&index).copied(),
            selected: chosen.binary_search(&index).is_ok(),
            entropy: entropy(p),
            gini: gini(p),
            lc: least_confidence(p),
            margin: margin(p),
            true_label: data.labels()[index],
        })
        .collect())
}

pub fn write_dump(path: &Path, rows: &[DumpRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRow>> {
    if !path.exists() {
        return Err(Error::MissingDump(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
