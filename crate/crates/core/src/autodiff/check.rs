//! Finite-difference verification of analytic gradients.

use super::{Element, Parameter, Tensor};
use crate::error::{Error, Result};

/// Compare analytic gradients of a scalar function against central
/// differences, coordinate by coordinate.
///
/// `f` must rebuild the graph on every call (it is invoked `2n + 1`
/// times for `n` checked coordinates). Returns the worst relative
/// error `|a - n| / max(1e-12, |a| + |n|)`; non-finite values anywhere
/// are an error. Use `f64` elements — `f32` central differences drown
/// in round-off.
pub fn grad_check<E, F>(f: F, params: &[Parameter<E>], step: E) -> Result<E>
where
    E: Element,
    F: Fn() -> Result<Tensor<E>>,
{
    if step <= E::zero() {
        return Err(Error::input("grad_check: step must be positive"));
    }
    for p in params {
        p.tensor().zero_grad();
    }
    let out = f()?;
    let base = out.item()?;
    if !base.is_finite() {
        return Err(Error::numeric(format!(
            "grad_check: non-finite output {base}"
        )));
    }
    out.backward()?;
    let analytic: Vec<Vec<E>> = params
        .iter()
        .map(|p| {
            p.tensor()
                .grad_vec()
                .unwrap_or_else(|| vec![E::zero(); p.tensor().numel()])
        })
        .collect();

    let floor = E::from_f64(1e-12);
    let two = E::from_f64(2.0);
    let mut worst = E::zero();
    for (p, grads) in params.iter().zip(&analytic) {
        let n = p.tensor().numel();
        for i in 0..n {
            let orig = p.tensor().data()[i];
            let eval_at = |v: E| -> Result<E> {
                let mut data = p.tensor().data_vec();
                data[i] = v;
                p.tensor().set_data(&data);
                let y = f()?.item()?;
                if !y.is_finite() {
                    return Err(Error::numeric(format!(
                        "grad_check: non-finite value at {}[{i}]",
                        p.name()
                    )));
                }
                Ok(y)
            };
            let plus = eval_at(orig + step);
            let minus = plus.and_then(|pl| eval_at(orig - step).map(|mi| (pl, mi)));
            // restore before propagating any error
            let mut data = p.tensor().data_vec();
            data[i] = orig;
            p.tensor().set_data(&data);
            let (plus, minus) = minus?;
            let numeric = (plus - minus) / (two * step);
            let a = grads[i];
            let rel = (a - numeric).abs() / floor.max(a.abs() + numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
