//! Bias study (distribution divergence of selections vs. robustness) and
//! paired significance testing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::acquisition::{categorical_pdf, estimate_pdf, read_dump, Acquisition, DumpRow, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::learner::{dump_path, read_stages_csv, StageRecord};

const MASS_TOLERANCE: f64 = 1e-6;
/// Largest sample size handled by exact enumeration.
pub const EXACT_LIMIT: usize = 20;

fn check_mass(p: &[f64], row: usize) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > MASS_TOLERANCE || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::NotDistribution { row, sum });
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    check_mass(p, 0)?;
    check_mass(q, 1)?;
    let half_kl = |a: f64, m: f64| if a > 0.0 { 0.5 * a * (a / m).ln() } else { 0.0 };
    let d: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            half_kl(a, m) + half_kl(b, m)
        })
        .sum();
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::TooSmall(a.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        order[start..end].iter().for_each(|&i| ranks[i] = rank);
        start = end;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Exact null distribution for up to [`EXACT_LIMIT`] non-zero differences
/// (ties handled through doubled average ranks), otherwise the normal
/// approximation with continuity and tie corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences"));
    }
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    let (p_value, exact) = if n <= EXACT_LIMIT {
        (exact_p(&ranks, w_plus), true)
    } else {
        let mut ties = 0.0;
        let sorted = {
            let mut r = ranks.clone();
            r.sort_by(f64::total_cmp);
            r
        };
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
            let t = j as f64;
            ties += t * t * t - t;
            i += j;
        }
        let mean = total / 2.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - ties / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        ((2.0 * (1.0 - normal.cdf(z))).min(1.0), false)
    };
    Ok(Wilcoxon { statistic, w_plus, p_value, n, exact })
}

/// Two-sided exact p-value of `W+` under random signs.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    // Doubled average ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut ways = vec![0u64; max + 1];
    ways[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if ways[s] > 0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    let obs = (w_plus * 2.0).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: u64 = ways[..=obs].iter().sum();
    let upper: u64 = ways[obs..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

/// Item characteristics compared between the selected set and the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Characteristic {
    Entropy,
    Gini,
    Lc,
    Margin,
    TrueLabel,
}

impl Characteristic {
    pub const ALL: [Characteristic; 5] =
        [Characteristic::Entropy, Characteristic::Gini, Characteristic::Lc, Characteristic::Margin, Characteristic::TrueLabel];

    fn value(self, r: &DumpRow) -> f64 {
        match self {
            Characteristic::Entropy => r.entropy,
            Characteristic::Gini => r.gini,
            Characteristic::Lc => r.lc,
            Characteristic::Margin => r.margin,
            Characteristic::TrueLabel => r.true_label as f64,
        }
    }
}

/// Divergence between the selected items and the pre-selection pool of one
/// dump. Continuous characteristics share the pool's bin edges; the label
/// uses one bin per class.
pub fn selection_divergence(rows: &[DumpRow], c: Characteristic, bins: usize) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyPool);
    }
    let selected: Vec<&DumpRow> = rows.iter().filter(|r| r.selected).collect();
    if selected.is_empty() {
        return Err(Error::EmptyInput);
    }
    if c == Characteristic::TrueLabel {
        let classes = rows.iter().map(|r| r.true_label).max().unwrap_or(0) + 1;
        let pool = categorical_pdf(&rows.iter().map(|r| r.true_label).collect::<Vec<_>>(), classes)?;
        let sel = categorical_pdf(&selected.iter().map(|r| r.true_label).collect::<Vec<_>>(), classes)?;
        return jsd(&sel, &pool);
    }
    let pool = estimate_pdf(&rows.iter().map(|r| c.value(r)).collect::<Vec<_>>(), bins, None)?;
    let sel = estimate_pdf(&selected.iter().map(|r| c.value(r)).collect::<Vec<_>>(), bins, Some(pool.range()))?;
    jsd(&sel.masses, &pool.masses)
}

/// One acquisition run: its stage records and per-stage dumps.
#[derive(Clone, Debug, PartialEq)]
pub struct RunInput {
    pub acquisition: Acquisition,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub dumps: BTreeMap<usize, Vec<DumpRow>>,
}

/// Reads every seed of a run directory (`stages.csv` plus dumps for each
/// stage after the first).
pub fn load_run_dir(dir: &Path) -> Result<Vec<RunInput>> {
    let records = read_stages_csv(&dir.join("stages.csv"))?;
    let mut runs: BTreeMap<(String, u64), RunInput> = BTreeMap::new();
    for r in records {
        let run = runs.entry((r.acquisition.name().to_string(), r.seed)).or_insert_with(|| RunInput {
            acquisition: r.acquisition,
            seed: r.seed,
            stages: Vec::new(),
            dumps: BTreeMap::new(),
        });
        if r.stage > 0 {
            run.dumps.insert(r.stage, read_dump(&dump_path(dir, r.seed, r.stage))?);
        }
        run.stages.push(r);
    }
    Ok(runs.into_values().collect())
}

/// Value of a numeric `stages.csv` column.
pub fn stage_column(r: &StageRecord, column: &str) -> Result<Option<f64>> {
    Ok(match column {
        "accuracy" => Some(r.accuracy),
        "rob_pgd" => r.rob_pgd,
        "rob_square" => r.rob_square,
        "seconds" => r.seconds,
        "labeled" => Some(r.labeled as f64),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown column `{other}` (valid: accuracy, rob_pgd, rob_square, seconds, labeled)"
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub stage: usize,
    pub function: Acquisition,
    pub characteristic: Characteristic,
    /// Mean over seeds.
    pub d: f64,
    /// Mean over seeds of the stage's robustness.
    pub robustness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub stage: usize,
    pub characteristic: Characteristic,
    /// Empty when undefined (fewer than two functions or zero variance).
    pub r: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasStudy {
    pub records: Vec<BiasRecord>,
    pub correlations: Vec<CorrelationRow>,
}

impl BiasStudy {
    /// Mean of the defined per-stage correlations of `c`.
    pub fn mean_correlation(&self, c: Characteristic) -> Option<f64> {
        let rs: Vec<f64> = self.correlations.iter().filter(|r| r.characteristic == c).filter_map(|r| r.r).collect();
        (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64)
    }
}

/// Per (stage, function, characteristic): the selection divergence and the
/// stage robustness (`column` of `stages.csv`), each averaged over seeds;
/// then per (stage, characteristic) the correlation across functions.
pub fn bias_study(runs: &[RunInput], characteristics: &[Characteristic], column: &str, bins: usize) -> Result<BiasStudy> {
    type Cell = (Vec<f64>, Vec<f64>);
    let mut cells: BTreeMap<(usize, Characteristic, Acquisition), Cell> = BTreeMap::new();
    for run in runs {
        for rec in run.stages.iter().filter(|r| r.stage > 0) {
            let rows = run.dumps.get(&rec.stage).ok_or_else(|| {
                Error::MissingDump(format!("{} seed {} stage {}", run.acquisition, run.seed, rec.stage))
            })?;
            let Some(rob) = stage_column(rec, column)? else { continue };
            for &c in characteristics {
                let d = selection_divergence(rows, c, bins)?;
                let cell = cells.entry((rec.stage, c, run.acquisition)).or_default();
                cell.0.push(d);
                cell.1.push(rob);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut records = Vec::with_capacity(cells.len());
    let mut groups: BTreeMap<(usize, Characteristic), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((stage, characteristic, function), (ds, robs)) in &cells {
        let rec = BiasRecord { stage: *stage, function: *function, characteristic: *characteristic, d: mean(ds), robustness: mean(robs) };
        let g = groups.entry((*stage, *characteristic)).or_default();
        g.0.push(rec.d);
        g.1.push(rec.robustness);
        records.push(rec);
    }
    records.sort_by(|a, b| (a.stage, a.function.name(), a.characteristic).cmp(&(b.stage, b.function.name(), b.characteristic)));
    let correlations = groups
        .into_iter()
        .map(|((stage, characteristic), (ds, robs))| {
            let r = match pearson(&ds, &robs) {
                Ok(r) => Some(r),
                Err(Error::ZeroVariance | Error::TooSmall(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(CorrelationRow { stage, characteristic, r, n: ds.len() })
        })
        .collect::<Result<_>>()?;
    Ok(BiasStudy { records, correlations })
}

/// [`bias_study`] over run directories with the default settings
/// (all characteristics, PGD robustness, 50 bins).
pub fn bias_study_dirs(dirs: &[&Path]) -> Result<BiasStudy> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(load_run_dir(d)?);
    }
    bias_study(&runs, &Characteristic::ALL, "rob_pgd", DEFAULT_BINS)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
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

#[cfg(test)]
mod tests;
