//! Equal-width histograms and stratified selection by score density.

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    /// Fractions of the scores per bin; all zero for an empty input.
    pub masses: Vec<f64>,
    /// Positions of the scores falling in each bin.
    pub members: Vec<Vec<usize>>,
}

impl Histogram {
    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.edges[0], *self.edges.last().expect("edges"))
    }
}

/// Bin of `v` among `bins` equal-width bins over `[lo, hi]`. Bins are
/// right-open except the last; values outside the range go to the edge bins.
/// A degenerate range puts everything in the first bin.
pub fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let k = ((v - lo) * bins as f64 / (hi - lo)).floor();
    if k < 0.0 {
        0
    } else {
        (k as usize).min(bins - 1)
    }
}

/// Equal-width histogram over `range`, or over `[min, max]` of `scores`.
pub fn estimate_pdf(scores: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("histogram input"));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) if lo.is_finite() && hi.is_finite() && lo <= hi => (lo, hi),
        Some(r) => return Err(Error::InvalidArgument(format!("histogram range {r:?}"))),
        None if scores.is_empty() => return Err(Error::EmptyInput),
        None => scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s))),
    };
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 / bins as f64 };
    let edges = (0..=bins).map(|k| if k == bins && hi > lo { hi } else { lo + k as f64 * width }).collect();
    let mut members = vec![Vec::new(); bins];
    for (i, &s) in scores.iter().enumerate() {
        members[bin_index(s, lo, hi, bins)].push(i);
    }
    let total = scores.len() as f64;
    let masses = members.iter().map(|m| if scores.is_empty() { 0.0 } else { m.len() as f64 / total }).collect();
    Ok(Histogram { edges, masses, members })
}

/// Histogram over fixed categories `0..classes` (e.g. class labels).
pub fn categorical_pdf(values: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &v in values {
        *counts.get_mut(v).ok_or(Error::LabelOutOfRange { label: v, classes })? += 1;
    }
    let total = values.len().max(1) as f64;
    Ok(counts.iter().map(|&c| c as f64 / total).collect())
}

const TIE: f64 = 1e-9;

/// Largest-remainder apportionment of `seats` proportional to `weights`.
/// Equal remainders (within 1e-9) favour the lower index.
pub fn largest_remainder(weights: &[f64], seats: usize) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return if seats == 0 {
            Ok(vec![0; weights.len()])
        } else {
            Err(Error::InvalidArgument("cannot apportion seats over zero weight".into()))
        };
    }
    let exact: Vec<f64> = weights.iter().map(|w| seats as f64 * w / total).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|q| (q + TIE).floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
    let rem = |k: usize| exact[k] - quotas[k] as f64;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rem(a), rem(b));
        if (ra - rb).abs() <= TIE {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    // Flooring with the tie slack can overshoot by rounding; never undershoots.
    let mut left = seats.saturating_sub(assigned);
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        quotas[k] += 1;
        left -= 1;
    }
    Ok(quotas)
}

/// Exact largest-remainder apportionment for integer weights (bin counts).
pub fn largest_remainder_counts(counts: &[usize], seats: usize) -> Result<Vec<usize>> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return if seats == 0 {
            Ok(vec![0; counts.len()])
        } else {
            Err(Error::InvalidArgument("cannot apportion seats over zero weight".into()))
        };
    }
    let num: Vec<u128> = counts.iter().map(|&c| c as u128 * seats as u128).collect();
    let mut quotas: Vec<usize> = num.iter().map(|v| (v / total) as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    order.sort_by(|&a, &b| (num[b] % total).cmp(&(num[a] % total)).then(a.cmp(&b)));
    let left = seats - quotas.iter().sum::<usize>();
    for &k in order.iter().take(left) {
        quotas[k] += 1;
    }
    Ok(quotas)
}

/// Per-bin quotas summing to `n`, proportional to bin counts and never
/// exceeding them. When a bin cannot fill its quota the shortfall is
/// re-apportioned over the bins that still have room.
pub fn stratified_quotas(counts: &[usize], n: usize) -> Result<Vec<usize>> {
    let available: usize = counts.iter().sum();
    if n > available {
        return Err(Error::BudgetTooLarge { requested: n, available });
    }
    let mut quotas = vec![0usize; counts.len()];
    let mut left = n;
    while left > 0 {
        let room: Vec<usize> = counts.iter().zip(&quotas).map(|(c, q)| c - q).collect();
        let weights: Vec<usize> = counts.iter().zip(&room).map(|(&c, &r)| if r > 0 { c } else { 0 }).collect();
        let share = largest_remainder_counts(&weights, left)?;
        for k in 0..counts.len() {
            let take = share[k].min(room[k]);
            quotas[k] += take;
            left -= take;
        }
    }
    Ok(quotas)
}

/// Density-matching selection: bins `scores` into `bins` equal-width bins
/// over their own range, sets per-bin quotas proportional to bin occupancy,
/// then samples uniformly without replacement inside each bin. Returns
/// positions into `scores`.
pub fn select_stratified(scores: &[f64], n: usize, bins: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(Error::BudgetTooLarge { requested: n, available: scores.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let hist = estimate_pdf(scores, bins, None)?;
    let quotas = stratified_quotas(&hist.counts(), n)?;
    let mut picked = Vec::with_capacity(n);
    for (members, &q) in hist.members.iter().zip(&quotas) {
        picked.extend(index::sample(rng, members.len(), q).into_iter().map(|i| members[i]));
    }
    Ok(picked)
}
