//! Central finite-difference gradient checking.

use super::{Param, Tape, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` and returns `max |analytic - numeric| / max(1, |numeric|)` over
/// every coordinate of every trainable parameter. Frozen parameters are skipped.
///
/// `f` receives one tape variable per entry of `params`, in order.
pub fn grad_check<Func>(params: &mut [Param<f64>], h: f64, f: Func) -> Result<f64>
where
    Func: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |params: &[Param<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| grads.get(v).map(|g| g.data().to_vec()))
        .collect();

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        for j in 0..params[pi].numel() {
            let orig = params[pi].value.data()[j];
            params[pi].value.data_mut()[j] = orig + h;
            let plus = eval(params)?;
            params[pi].value.data_mut()[j] = orig - h;
            let minus = eval(params)?;
            params[pi].value.data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_is_exact() {
        let mut ps = vec![Param::trainable(Tensor::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap())];
        let err = grad_check(&mut ps, 1e-4, |t, v| Ok(t.sum(v[0]))).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn frozen_coordinates_are_skipped() {
        // The frozen parameter enters non-linearly; if it were checked its
        // missing analytic gradient would show up as a large error.
        let mut ps = vec![
            Param::trainable(Tensor::from_f64(vec![2], &[0.5, 1.5]).unwrap()),
            Param::frozen(Tensor::from_f64(vec![2], &[2.0, 3.0]).unwrap()),
        ];
        let err = grad_check(&mut ps, 1e-4, |t, v| {
            let m = t.mul(v[0], v[1])?;
            let mm = t.mul(m, v[1])?;
            Ok(t.sum(mm))
        })
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut ps: Vec<Param<f64>> = vec![];
        assert!(grad_check(&mut ps, 0.0, |t, _| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
    }
}
