//! Central finite-difference gradient verification (64-bit only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences `(f(x+h) - f(x-h)) / 2h`
/// coordinate by coordinate and returns the worst relative error.
pub fn finite_diff_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Checks the gradient of an arbitrary graph function with respect to every
/// input tensor. The output is contracted with fixed pseudo-random weights so
/// that functions with constant sums (softmax) still get a non-trivial check.
///
/// `build` must be deterministic; anything random inside it has to be reseeded
/// on every call.
pub fn check_graph_fn<F>(inputs: &[Tensor<f64>], build: F, h: f64, fault: Option<Fault>) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        if let Some(fl) = fault {
            g.inject_fault(fl);
        }
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = with_grad;
                g.input(t)
            })
            .collect();
        let out = build(&mut g, &vars)?;
        let n = g.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let weights = Tensor::randn(&[n, 1], 1.0, &mut rng);
        let w = g.input(weights);
        let flat = g.reshape(out, &[1, n])?;
        let loss = g.matmul(flat, w)?;
        let value = g.value(loss)[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let per_input = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect();
        Ok((value, per_input))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let mut failure = None;
        let err = finite_diff_check(
            |x| {
                let mut probe = inputs.to_vec();
                probe[idx].data_mut().copy_from_slice(x);
                match eval(&probe, false) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input.data(),
            &analytic[idx],
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_error_is_rounding_level() {
        let err = finite_diff_check(|x| 2.5 * x[0] - 4.0 * x[1], &[0.3, -1.7], &[2.5, -4.0], 1e-5);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let err = finite_diff_check(|x| x[0] * x[0], &[3.0], &[-6.0], 1e-5);
        assert!((err - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
