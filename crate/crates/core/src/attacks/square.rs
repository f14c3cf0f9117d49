use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, chunk_rng, map_chunks, project, AttackConfig, AttackFamily};
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::nets::Model;

/// Score-based access to a classifier: probabilities only, no gradients.
pub trait ProbabilityOracle<E: Element>: Sync {
    /// `[channels, height, width]`.
    fn input_shape(&self) -> [usize; 3];
    fn predict_proba(&self, x: &Tensor<E>) -> Result<Tensor<E>>;

    /// Log-probabilities; oracles may override this with a more accurate form.
    fn predict_log_proba(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.predict_proba(x)?.map(|p| p.max(E::min_positive_value()).ln()))
    }
}

impl<E: Element> ProbabilityOracle<E> for Model<E> {
    fn input_shape(&self) -> [usize; 3] {
        self.spec().input_shape
    }

    fn predict_proba(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Model::predict_proba(self, x)
    }

    fn predict_log_proba(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Model::predict_log_proba(self, x)
    }
}

/// Fixed fractions of the query budget at which the square area halves.
const SCHEDULE: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 0.8];

fn p_at(p_init: f64, it: usize, iters: usize) -> f64 {
    let frac = it as f64 / iters as f64;
    let halvings = SCHEDULE.iter().filter(|&&t| frac >= t).count();
    p_init / f64::powi(2.0, halvings as i32)
}

/// Margin `log p_y - max_{k != y} log p_k`; negative once misclassified.
fn margins<E: Element, O: ProbabilityOracle<E> + ?Sized>(oracle: &O, x: &Tensor<E>, y: &[usize]) -> Result<Vec<f64>> {
    let lp = oracle.predict_log_proba(x)?;
    (0..y.len())
        .map(|i| {
            let row = lp.row(i);
            let own = row[y[i]].f64();
            let other = row.iter().enumerate().filter(|&(k, _)| k != y[i]).map(|(_, v)| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let m = own - other;
            if m.is_nan() {
                Err(Error::NonFinite("square attack margin"))
            } else {
                Ok(m)
            }
        })
        .collect()
}

fn sign(rng: &mut ChaCha8Rng, eps: f64) -> f64 {
    if rng.random::<bool>() {
        eps
    } else {
        -eps
    }
}

/// linf Square attack: vertical-stripe initialisation at ±eps, then random
/// square patches set to ±eps per channel, each kept only if it lowers the
/// margin.
pub fn square_attack<E: Element, O: ProbabilityOracle<E> + ?Sized>(
    oracle: &O,
    x: &Tensor<E>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<E>> {
    run(oracle, x, labels, cfg, None)
}

/// [`square_attack`] that also returns, per item, the best margin after
/// initialisation and after every iteration.
pub fn square_attack_with_trace<E: Element, O: ProbabilityOracle<E> + ?Sized>(
    oracle: &O,
    x: &Tensor<E>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor<E>, Vec<Vec<f64>>)> {
    let traces = std::sync::Mutex::new(vec![Vec::new(); labels.len()]);
    let adv = run(oracle, x, labels, cfg, Some(&traces))?;
    Ok((adv, traces.into_inner().expect("no poisoned lock")))
}

type Traces = std::sync::Mutex<Vec<Vec<f64>>>;

fn run<E: Element, O: ProbabilityOracle<E> + ?Sized>(
    oracle: &O,
    x: &Tensor<E>,
    labels: &[usize],
    cfg: &AttackConfig,
    traces: Option<&Traces>,
) -> Result<Tensor<E>> {
    if cfg.family != AttackFamily::Square {
        return Err(Error::InvalidArgument(format!("{:?} config passed to square", cfg.family)));
    }
    cfg.validate()?;
    check_inputs(x, labels)?;
    let [ch, h, w] = oracle.input_shape();
    if x.row_len() != ch * h * w {
        return Err(Error::ShapeMismatch(format!("input {:?} for oracle shape {:?}", x.shape(), [ch, h, w])));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = cfg.epsilon;
    map_chunks(x, labels, |k, x0, y| {
        let mut rng = chunk_rng(cfg.seed, k);
        let n = y.len();
        let mut best = x0.clone();
        for i in 0..n {
            let (row, orig) = (best.row_mut(i), x0.row(i));
            for c in 0..ch {
                for col in 0..w {
                    let s = sign(&mut rng, eps);
                    for r in 0..h {
                        let j = (c * h + r) * w + col;
                        row[j] = project(orig[j].f64() + s, orig[j], eps);
                    }
                }
            }
        }
        let mut best_margin = margins(oracle, &best, y)?;
        let offset = k * super::ATTACK_CHUNK;
        let record = |m: &[f64]| {
            if let Some(t) = traces {
                let mut t = t.lock().expect("no poisoned lock");
                for (i, &v) in m.iter().enumerate() {
                    t[offset + i].push(v);
                }
            }
        };
        record(&best_margin);
        for it in 0..cfg.iters {
            let active: Vec<usize> = (0..n).filter(|&i| best_margin[i] > 0.0).collect();
            if active.is_empty() {
                if traces.is_none() {
                    break;
                }
                record(&best_margin);
                continue;
            }
            let p = p_at(cfg.p_init, it, cfg.iters);
            let side = ((p * (h * w) as f64).sqrt().ceil() as usize).clamp(1, h.min(w));
            let mut proposal = best.select_rows(&active);
            for (slot, &i) in active.iter().enumerate() {
                let (row, orig) = (proposal.row_mut(slot), x0.row(i));
                let top = rng.random_range(0..=h - side);
                let left = rng.random_range(0..=w - side);
                for c in 0..ch {
                    let s = sign(&mut rng, eps);
                    for r in top..top + side {
                        for col in left..left + side {
                            let j = (c * h + r) * w + col;
                            row[j] = project(orig[j].f64() + s, orig[j], eps);
                        }
                    }
                }
            }
            let ys: Vec<usize> = active.iter().map(|&i| y[i]).collect();
            let proposed = margins(oracle, &proposal, &ys)?;
            for (slot, &i) in active.iter().enumerate() {
                if proposed[slot] < best_margin[i] {
                    best_margin[i] = proposed[slot];
                    best.row_mut(i).copy_from_slice(proposal.row(slot));
                }
            }
            record(&best_margin);
        }
        Ok(best)
    })
}

#[cfg(test)]
mod tests {
    use super::p_at;

    #[test]
    fn area_halves_at_budget_fractions() {
        assert_eq!(p_at(0.8, 0, 1000), 0.8);
        assert_eq!(p_at(0.8, 49, 1000), 0.8);
        assert_eq!(p_at(0.8, 50, 1000), 0.4);
        assert_eq!(p_at(0.8, 100, 1000), 0.2);
        assert_eq!(p_at(0.8, 200, 1000), 0.1);
        assert_eq!(p_at(0.8, 500, 1000), 0.05);
        assert_eq!(p_at(0.8, 999, 1000), 0.025);
    }
}
