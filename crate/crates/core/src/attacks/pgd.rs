use rand::Rng;

use super::{check_inputs, chunk_rng, map_chunks, project, AttackConfig, AttackFamily};
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::nets::Model;

/// Projected gradient descent in the linf ball.
///
/// Starts from a uniform point in the ball (or the input itself when
/// `random_start` is off), then takes `iters` signed-gradient ascent steps on
/// the cross-entropy, projecting after each. The last iterate is returned
/// whether or not it fools the model.
pub fn pgd_attack<E: Element>(model: &Model<E>, x: &Tensor<E>, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor<E>> {
    if cfg.family != AttackFamily::Pgd {
        return Err(Error::InvalidArgument(format!("{:?} config passed to pgd", cfg.family)));
    }
    cfg.validate()?;
    check_inputs(x, labels)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = cfg.epsilon;
    map_chunks(x, labels, |k, x0, y| {
        let mut rng = chunk_rng(cfg.seed, k);
        let mut adv = x0.clone();
        if cfg.random_start {
            for (a, &c) in adv.data_mut().iter_mut().zip(x0.data()) {
                *a = project(c.f64() + rng.random_range(-eps..=eps), c, eps);
            }
        }
        for _ in 0..cfg.iters {
            let (_, grad) = model.input_gradient(&adv, y)?;
            if !grad.all_finite() {
                return Err(Error::NonFinite("pgd gradient"));
            }
            for ((a, &c), g) in adv.data_mut().iter_mut().zip(x0.data()).zip(grad.data()) {
                let step = if *g > E::zero() {
                    cfg.alpha
                } else if *g < E::zero() {
                    -cfg.alpha
                } else {
                    0.0
                };
                *a = project(a.f64() + step, c, eps);
            }
        }
        Ok(adv)
    })
}
