use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// Returns `max_i |g_a[i] - g_n[i]| / max(1, |g_a[i]| + |g_n[i]|)` where
/// `g_n[i] = (f(θ + h·e_i) - f(θ - h·e_i)) / 2h`.
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: (theta.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let numeric = numeric_gradient(&mut f, theta, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

/// Central-difference gradient of `f` at `theta`.
pub fn numeric_gradient<F>(f: &mut F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe)?;
        probe[i] = theta[i] - h;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective while perturbing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, Rng};

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|t| Ok(t[0] * t[0]), &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Mean sigmoid cross-entropy of a single linear unit over a fixed batch;
    /// parameters are `[w_0..w_{d-1}, b]`.
    fn one_layer_loss(x: &Matrix, y: &[f64], theta: &[f64]) -> f64 {
        let d = x.cols();
        let mut loss = 0.0;
        for r in 0..x.rows() {
            let s: f64 = x.row(r).iter().zip(theta).map(|(a, w)| a * w).sum::<f64>() + theta[d];
            let p = sigmoid(s);
            loss -= y[r] * p.ln() + (1.0 - y[r]) * (1.0 - p).ln();
        }
        loss / x.rows() as f64
    }

    fn one_layer_grad(x: &Matrix, y: &[f64], theta: &[f64]) -> Vec<f64> {
        let d = x.cols();
        let n = x.rows() as f64;
        let mut g = vec![0.0; d + 1];
        for r in 0..x.rows() {
            let s: f64 = x.row(r).iter().zip(theta).map(|(a, w)| a * w).sum::<f64>() + theta[d];
            let delta = (sigmoid(s) - y[r]) / n;
            for (gi, a) in g.iter_mut().zip(x.row(r)) {
                *gi += delta * a;
            }
            g[d] += delta;
        }
        g
    }

    #[test]
    fn sigmoid_cross_entropy_layer_passes() {
        let mut rng = Rng::new(9);
        let x = Matrix::normal(8, 3, 3.0, &mut rng);
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let theta: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let analytic = one_layer_grad(&x, &y, &theta);
        let err = grad_check(|t| Ok(one_layer_loss(&x, &y, t)), &theta, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");

        let doubled: Vec<f64> = analytic.iter().map(|g| 2.0 * g).collect();
        let err = grad_check(|t| Ok(one_layer_loss(&x, &y, t)), &theta, &doubled, 1e-5).unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn wrong_scale_is_detected() {
        let err = grad_check(|t| Ok(t[0] * t[0]), &[3.0], &[12.0], 1e-5).unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let res = grad_check(|t| Ok(t[0].ln()), &[0.0], &[1.0], 1e-5);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
