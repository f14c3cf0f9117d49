use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Minibatch SGD with heavy-ball momentum.
///
/// `v <- momentum * v + grad; theta <- theta - lr * v`, then gradients are
/// cleared.
#[derive(Clone, Debug)]
pub struct Sgd<E = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} not in [0, 1)")));
        }
        Ok(Sgd { lr, momentum, velocity: Vec::new() })
    }

    pub fn step(&mut self, params: &mut [Tensor<E>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(i));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![E::zero(); p.len()]).collect();
        }
        let (lr, mu) = (E::of(self.lr), E::of(self.momentum));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel + g;
                *w = *w - lr * *vel;
            }
            p.clear_grad();
        }
        Ok(())
    }

    /// Forgets accumulated momentum.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<E = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        Ok(Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn step(&mut self, params: &mut [Tensor<E>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(i));
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![E::zero(); p.len()]).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let step = self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t));
        let (b1, b2, step, eps) = (E::of(self.beta1), E::of(self.beta2), E::of(step), E::of(self.eps));
        let one = E::one();
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked above").to_vec();
            for (((w, m), v), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - step * *m / (v.sqrt() + eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer<E = f32> {
    Sgd(Sgd<E>),
    Adam(Adam<E>),
}

impl<E: Element> Optimizer<E> {
    pub fn step(&mut self, params: &mut [Tensor<E>]) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::Adam(o) => o.step(params),
        }
    }
}
