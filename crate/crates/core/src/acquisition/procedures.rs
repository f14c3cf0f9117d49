//! Selection procedures that do not reduce to ranking one score.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::RngCore;

use crate::diffcore::{argmax, Element, Tensor};
use crate::error::{Error, Result};

use super::scores::probability_rows;

fn check_budget(n: usize, available: usize) -> Result<()> {
    if n > available {
        return Err(Error::BudgetTooLarge { requested: n, available });
    }
    Ok(())
}

/// Top-two classes and the ratio `p(top2) / p(top1)` of a probability row.
pub fn boundary_priority(p: &[f64]) -> (usize, usize, f64) {
    let first = argmax(p);
    let second = (0..p.len()).filter(|&j| j != first).fold(None, |best: Option<usize>, j| match best {
        Some(b) if p[b] >= p[j] => Some(b),
        _ => Some(j),
    });
    let second = second.expect("at least two classes");
    (first, second, p[second] / p[first])
}

/// Multiple-boundary clustering and prioritisation.
///
/// Items are grouped by their ordered (top-1, top-2) class pair and sorted
/// within a group by `p(top2) / p(top1)`, highest first. Groups are visited
/// round-robin, ordered by their best priority, taking one item per
/// non-empty group per round. Returns row positions.
pub fn select_mcp<E: Element>(p: &Tensor<E>, n: usize) -> Result<Vec<usize>> {
    let rows = probability_rows(p)?;
    check_budget(n, rows.len())?;
    let mut clusters: BTreeMap<(usize, usize), Vec<(f64, usize)>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let (a, b, ratio) = boundary_priority(row);
        clusters.entry((a, b)).or_default().push((ratio, i));
    }
    let mut queues: Vec<Vec<(f64, usize)>> = clusters.into_values().collect();
    for q in &mut queues {
        q.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    }
    // Stable sort keeps the (top1, top2) key order for equal best priorities.
    queues.sort_by(|x, y| y[0].0.total_cmp(&x[0].0));
    let mut picked = Vec::with_capacity(n);
    let mut round = 0;
    while picked.len() < n {
        for q in &queues {
            if picked.len() == n {
                break;
            }
            if let Some(&(_, i)) = q.get(round) {
                picked.push(i);
            }
        }
        round += 1;
    }
    Ok(picked)
}

fn sq_dist<E: Element>(a: &[E], b: &[E]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum()
}

/// Greedy k-center: repeatedly takes the unlabeled point farthest (minimum
/// Euclidean distance) from the labeled points and earlier picks; ties go to
/// the lowest position. Embeddings are `[m, d]`; returns positions into
/// `unlabeled`.
pub fn select_coreset<E: Element>(labeled: &Tensor<E>, unlabeled: &Tensor<E>, n: usize) -> Result<Vec<usize>> {
    let m = unlabeled.rows();
    check_budget(n, m)?;
    if labeled.rows() > 0 && labeled.row_len() != unlabeled.row_len() {
        return Err(Error::DimMismatch(labeled.row_len(), unlabeled.row_len()));
    }
    let mut nearest: Vec<f64> = (0..m)
        .map(|i| (0..labeled.rows()).map(|j| sq_dist(unlabeled.row(i), labeled.row(j))).fold(f64::INFINITY, f64::min))
        .collect();
    let mut taken = vec![false; m];
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in (0..m).filter(|&i| !taken[i]) {
            if best.is_none_or(|b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("budget checked");
        taken[b] = true;
        picked.push(b);
        for i in 0..m {
            if !taken[i] {
                nearest[i] = nearest[i].min(sq_dist(unlabeled.row(i), unlabeled.row(b)));
            }
        }
    }
    Ok(picked)
}

/// `n` of `available` positions uniformly without replacement.
pub fn select_random(available: usize, n: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    check_budget(n, available)?;
    Ok(index::sample(rng, available, n).into_vec())
}
