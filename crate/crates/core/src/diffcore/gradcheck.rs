use super::graph::{Graph, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` records its computation on the supplied graph starting from the input
/// variable and returns the scalar output. The result is the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates of `x`.
pub fn finite_diff_check<E, F>(f: F, x: &Tensor<E>, step: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Graph<'_, E>, Var) -> Result<Var>,
{
    if step == 0.0 {
        return Err(Error::StepSizeZero);
    }
    let mut g = Graph::new();
    let input = g.leaf(x.clone(), true);
    let out = f(&mut g, input)?;
    g.backward(out)?;
    let analytic = g.grad_or_zeros(input);

    let eval = |point: Tensor<E>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(point, false);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0].f64())
    };

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] = E::of(x.data()[i].f64() + step);
        let mut minus = x.clone();
        minus.data_mut()[i] = E::of(x.data()[i].f64() - step);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !numeric.is_finite() || !a.f64().is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        worst = worst.max((a.f64() - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
