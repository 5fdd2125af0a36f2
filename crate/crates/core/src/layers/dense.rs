use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct FcCache {
    pub input: Matrix,
    pub pre_activation: Matrix,
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    pub input: Matrix,
    pub weight: Matrix,
    pub bias: Matrix,
}

/// `out = φ(x·W + b)` for a batch `x` of shape `B×c`, `W: c×d`, `b: 1×d`.
pub fn fc_forward(
    weight: &Matrix,
    bias: &Matrix,
    activation: Activation,
    x: &Matrix,
) -> Result<(Matrix, FcCache)> {
    let pre = x.matmul(weight)?.add_row_broadcast(bias)?;
    let out = pre.map(|v| activation.apply(v));
    Ok((
        out,
        FcCache {
            input: x.clone(),
            pre_activation: pre,
        },
    ))
}

pub fn fc_backward(
    weight: &Matrix,
    activation: Activation,
    cache: &FcCache,
    upstream: &Matrix,
) -> Result<FcGrads> {
    let d_pre = match activation {
        Activation::Identity => upstream.clone(),
        Activation::Relu => upstream.zip_with(&cache.pre_activation, "fc_backward", |g, p| {
            g * activation.derivative(p)
        })?,
    };
    Ok(FcGrads {
        input: d_pre.matmul_nt(weight)?,
        weight: cache.input.matmul_tn(&d_pre)?,
        bias: d_pre.sum_rows(),
    })
}

/// A fully-connected layer owning its parameters and forward cache.
#[derive(Clone, Debug)]
pub struct FcLayer {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
    cache: Option<FcCache>,
}

impl FcLayer {
    /// He-style uniform init scaled by fan-in; zero bias.
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        Self::from_params(
            Matrix::uniform(fan_in, fan_out, -limit, limit, rng),
            Matrix::zeros(1, fan_out),
            activation,
        )
    }

    pub fn from_params(weight: Matrix, bias: Matrix, activation: Activation) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            activation,
            cache: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (out, cache) = fc_forward(&self.weight.value, &self.bias.value, self.activation, x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Inference-only forward; leaves no cache behind.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        Ok(fc_forward(&self.weight.value, &self.bias.value, self.activation, x)?.0)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("fc backward called without a cached forward".into()))?;
        let grads = fc_backward(&self.weight.value, self.activation, &cache, upstream)?;
        self.weight.accumulate(&grads.weight);
        self.bias.accumulate(&grads.bias);
        Ok(grads.input)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn scalar_identity_chain_rule() {
        let cache = FcCache {
            input: Matrix::from_rows(&[&[1.5]]),
            pre_activation: Matrix::from_rows(&[&[0.0]]),
        };
        let w = Matrix::from_rows(&[&[2.0]]);
        let g = fc_backward(&w, Activation::Identity, &cache, &Matrix::from_rows(&[&[-0.25]]))
            .unwrap();
        assert_eq!(g.weight.get(0, 0), 1.5 * -0.25);
        assert_eq!(g.bias.get(0, 0), -0.25);
        assert_eq!(g.input.get(0, 0), 2.0 * -0.25);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let mut layer = FcLayer::from_params(
            Matrix::from_rows(&[&[1.0]]),
            Matrix::from_rows(&[&[-5.0]]),
            Activation::Relu,
        );
        let out = layer.forward(&Matrix::from_rows(&[&[2.0]])).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        let dx = layer.backward(&Matrix::from_rows(&[&[1.0]])).unwrap();
        assert_eq!(dx.get(0, 0), 0.0);
        assert_eq!(layer.weight.grad.get(0, 0), 0.0);
        assert_eq!(layer.bias.grad.get(0, 0), 0.0);
    }

    #[test]
    fn backward_without_forward_is_protocol_error() {
        let mut rng = Rng::new(0);
        let mut layer = FcLayer::new(3, 2, Activation::Relu, &mut rng);
        assert!(matches!(
            layer.backward(&Matrix::zeros(1, 2)),
            Err(Error::Protocol(_))
        ));
    }

    /// Objective `Σ r ⊙ fc(x)` with a fixed random projection `r`.
    fn projected(w: &Matrix, b: &Matrix, act: Activation, x: &Matrix, r: &Matrix) -> f64 {
        let (out, _) = fc_forward(w, b, act, x).unwrap();
        out.hadamard(r).unwrap().as_slice().iter().sum()
    }

    #[test]
    fn full_layer_passes_grad_check() {
        let mut rng = Rng::new(21);
        for act in [Activation::Relu, Activation::Identity] {
            let x = Matrix::normal(5, 4, 1.0, &mut rng);
            let w = Matrix::normal(4, 3, 0.7, &mut rng);
            let b = Matrix::normal(1, 3, 0.3, &mut rng);
            let r = Matrix::normal(5, 3, 1.0, &mut rng);
            let (_, cache) = fc_forward(&w, &b, act, &x).unwrap();
            let g = fc_backward(&w, act, &cache, &r).unwrap();

            let mut theta = w.as_slice().to_vec();
            theta.extend_from_slice(b.as_slice());
            let mut analytic = g.weight.as_slice().to_vec();
            analytic.extend_from_slice(g.bias.as_slice());
            let err = grad_check(
                |t| {
                    let w = Matrix::from_vec(4, 3, t[..12].to_vec())?;
                    let b = Matrix::from_vec(1, 3, t[12..].to_vec())?;
                    Ok(projected(&w, &b, act, &x, &r))
                },
                &theta,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{act:?} params: {err}");

            let err = grad_check(
                |t| Ok(projected(&w, &b, act, &Matrix::from_vec(5, 4, t.to_vec())?, &r)),
                x.as_slice(),
                g.input.as_slice(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{act:?} input: {err}");
        }
    }
}
