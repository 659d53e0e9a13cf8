use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Verify the tape gradient of a scalar-valued function against central
/// finite differences.
///
/// `f` receives a fresh graph and a gradient-tracked leaf holding the probe
/// point and must return a scalar node. The analytic gradient comes from one
/// backward pass; the numeric one from (f(x+eps·e) - f(x-eps·e)) / 2eps per
/// coordinate. Returns the maximum relative error over coordinates with
/// denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        let val = g.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(val)
    };

    // analytic gradient at the probe point
    let mut g = Graph::new();
    let leaf = g.leaf(point);
    let out = f(&mut g, leaf)?;
    if !g.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    g.backward(out)?;
    let analytic = match g.grad(leaf) {
        Some(t) => t.clone(),
        None => Tensor::zeros(point.shape().to_vec()),
    };

    let mut max_rel = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x^2); at x = [3] analytic and numeric both give 6
        let point = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let sq = g.hadamard(v, v)?;
                Ok(g.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn epsilon_range_enforced() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|g, v| Ok(g.sum(v)), &p, 0.0).is_err());
        assert!(grad_check(|g, v| Ok(g.sum(v)), &p, 0.1).is_err());
    }

    #[test]
    fn negated_backward_is_caught() {
        // negative control: a broken backward must yield a large error
        let point = Tensor::new(vec![4], vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let r = g.relu_negated_backward_fixture(v);
                Ok(g.sum(r))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5, "broken gradient must be caught, got {err}");
    }
}
