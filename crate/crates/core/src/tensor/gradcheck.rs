use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and a central finite difference with step `1e-5`.
///
/// Relative error per coordinate is `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check<S, F>(f: F, point: &Tensor<S>) -> Result<f64>
where
    S: Scalar,
    F: for<'t> Fn(Var<'t, S>) -> Result<Var<'t, S>>,
{
    finite_diff_check_with_step(f, point, 1e-5)
}

pub fn finite_diff_check_with_step<S, F>(f: F, point: &Tensor<S>, h: f64) -> Result<f64>
where
    S: Scalar,
    F: for<'t> Fn(Var<'t, S>) -> Result<Var<'t, S>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point.clone());
        let loss = f(x)?;
        tape.backward(loss)?.get_or_zeros(x)
    };
    let eval = |p: Tensor<S>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        let y = f(x)?;
        let v = y.value().item().as_f64();
        Ok(v)
    };

    let mut worst = 0.0_f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus.data_mut()[i] += S::of(h);
        minus.data_mut()[i] -= S::of(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::<f64>::from_f64(&[4], &[0.3, -1.0, 2.0, 5.5]).unwrap();
        let w = Tensor::<f64>::from_f64(&[4], &[1.5, -2.0, 0.25, 3.0]).unwrap();
        let err = finite_diff_check(
            |x| {
                let c = x.tape().constant(w.clone());
                Ok((x * c).sum())
            },
            &p,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_away_from_zero() {
        let p = Tensor::<f64>::from_f64(&[5], &[0.3, -1.0, 2.0, -0.7, 1.1]).unwrap();
        let err = finite_diff_check(|x| Ok((x.relu() * x).sum()), &p).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let p = Tensor::<f64>::from_f64(&[2, 3], &[0.2, -0.4, 1.3, 0.9, 0.1, -2.0]).unwrap();
        let err = finite_diff_check(
            |x| Ok(x.log_softmax()?.select_per_row(&[2, 0])?.mean().scale(-1.0)),
            &p,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
