use serde::{Deserialize, Serialize};

use crate::diffcore::{argmax, Element, Tensor};
use crate::error::{Error, Result};
use crate::nets::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepFoolConfig {
    pub overshoot: f64,
    pub max_iter: usize,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        DeepFoolConfig { overshoot: 0.02, max_iter: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepFoolResult<E: Element> {
    /// Already scaled by `1 + overshoot`; same length as the input.
    pub perturbation: Tensor<E>,
    pub norm: f64,
    pub success: bool,
    pub iterations: usize,
}

/// Multi-class l2 DeepFool on a single flattened input.
///
/// The reference class is `label` when given, else the model's own
/// prediction. An input already predicted differently from `label` gets a
/// zero perturbation. The perturbation is not clipped to the pixel range.
pub fn deepfool<E: Element>(model: &Model<E>, x: &[E], cfg: &DeepFoolConfig, label: Option<usize>) -> Result<DeepFoolResult<E>> {
    if !(cfg.overshoot >= 0.0 && cfg.overshoot.is_finite()) {
        return Err(Error::InvalidArgument(format!("overshoot {}", cfg.overshoot)));
    }
    let d = x.len();
    let scale = 1.0 + cfg.overshoot;
    let mut r_tot = vec![0.0f64; d];
    let mut point = x.to_vec();
    let mut iterations = 0;
    let mut reference = None;
    let success = loop {
        let (f, jac) = model.logit_jacobian(&point)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("deepfool logits"));
        }
        let k = argmax(&f);
        let k0 = *reference.get_or_insert(label.unwrap_or(k));
        if k != k0 {
            break true;
        }
        if iterations == cfg.max_iter {
            break false;
        }
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for j in (0..f.len()).filter(|&j| j != k0) {
            let w: Vec<f64> = jac[j].iter().zip(&jac[k0]).map(|(a, b)| a - b).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let gap = (f[j] - f[k0]).abs();
            if best.as_ref().is_none_or(|(dist, _, _)| gap / norm < *dist) {
                best = Some((gap / norm, norm, w));
            }
        }
        let Some((dist, norm, w)) = best else { break false };
        for (r, wi) in r_tot.iter_mut().zip(&w) {
            *r += dist / norm * wi;
        }
        for ((p, &xi), r) in point.iter_mut().zip(x).zip(&r_tot) {
            *p = E::of(xi.f64() + scale * r);
        }
        iterations += 1;
    };
    let r: Vec<f64> = r_tot.iter().map(|v| v * scale).collect();
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("deepfool perturbation"));
    }
    let perturbation = Tensor::new([d], r.iter().map(|&v| E::of(v)).collect())?;
    Ok(DeepFoolResult { perturbation, norm, success, iterations })
}
