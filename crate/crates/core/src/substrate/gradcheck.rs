use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst relative error,
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    let y0 = y.item();
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {y0}")));
    }
    let analytic = tape.backward(y)?.wrt(xv);

    let eval = |x: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, tape.constant(x))?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("perturbed f = {v}")))
        }
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = x.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::tape::mix;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|_, x| Ok(x.mul(x).sum()), &Tensor::vector(vec![1.0, 2.0]), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reports_non_finite() {
        let err = grad_check(|_, x| Ok(x.scale(f64::INFINITY).sum()), &Tensor::vector(vec![1.0]), 1e-5);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn detects_a_wrong_adjoint() {
        // relu's kink sits between the probes, so the numeric slope is 0.5 while the analytic one is 1
        let err = grad_check(|_, x| Ok(x.relu().sum()), &Tensor::vector(vec![1e-9]), 1e-4).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn mix_adjoints() {
        let x = Tensor::vector(vec![0.3, 0.2, -0.5, 1.5, 0.7]);
        let err = grad_check(
            |t, x| {
                let p = x.at(0).sigmoid();
                let a = x.slice(0, 1, 2);
                let b = x.slice(0, 3, 2);
                let w = t.constant(Tensor::vector(vec![0.9, -1.3]));
                Ok(mix(p, a, b)?.mul(w).sum())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
