use crate::error::{Error, Result};
use crate::layers::{fc_backward, fc_forward, Activation, FcCache, FcLayer, Param};
use crate::tensor::{Matrix, Rng};

/// How a domain's layer is combined with the shared layer. Only the
/// element-wise product / bias sum is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Combination {
    #[default]
    ProductAndSum,
}

/// Effective weights for one domain: `W*_p = W_p ⊙ W`, `b*_p = b_p + b`.
pub fn star_layer_params(
    shared_weight: &Matrix,
    shared_bias: &Matrix,
    domain_weight: &Matrix,
    domain_bias: &Matrix,
) -> Result<(Matrix, Matrix)> {
    Ok((
        domain_weight.hadamard(shared_weight)?,
        domain_bias.add(shared_bias)?,
    ))
}

/// Domain-specific factor of one star layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainLayer {
    pub weight: Param,
    pub bias: Param,
}

impl DomainLayer {
    /// All-ones weights and zero bias, so the effective layer starts as the
    /// shared one.
    pub fn identity(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::new(Matrix::ones(fan_in, fan_out)),
            bias: Param::new(Matrix::zeros(1, fan_out)),
        }
    }
}

#[derive(Clone, Debug)]
struct StarCache {
    domain: usize,
    layers: Vec<(FcCache, Matrix)>,
}

/// Shared centered FCN plus one factor stack per domain.
#[derive(Clone, Debug)]
pub struct StarFcn {
    pub shared: Vec<FcLayer>,
    pub domains: Vec<Vec<DomainLayer>>,
    pub combination: Combination,
    cache: Option<StarCache>,
}

/// ReLU on every layer but the last, which emits the raw logit.
pub(crate) fn activation_for(layer: usize, num_layers: usize) -> Activation {
    if layer + 1 == num_layers {
        Activation::Identity
    } else {
        Activation::Relu
    }
}

impl StarFcn {
    pub fn new(input: usize, widths: &[usize], num_domains: usize, rng: &mut Rng) -> Self {
        let mut shared = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (l, &w) in widths.iter().enumerate() {
            shared.push(FcLayer::new(fan_in, w, activation_for(l, widths.len()), rng));
            fan_in = w;
        }
        let domains = (0..num_domains)
            .map(|_| {
                shared
                    .iter()
                    .map(|l| DomainLayer::identity(l.fan_in(), l.fan_out()))
                    .collect()
            })
            .collect();
        Self {
            shared,
            domains,
            combination: Combination::ProductAndSum,
            cache: None,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Checks that every domain stack mirrors the shared stack.
    pub fn validate(&self) -> Result<()> {
        for stack in &self.domains {
            if stack.len() != self.shared.len() {
                return Err(Error::Config("domain stack depth differs from shared".into()));
            }
            for (d, s) in stack.iter().zip(&self.shared) {
                if d.weight.value.shape() != s.weight.value.shape()
                    || d.bias.value.shape() != s.bias.value.shape()
                {
                    return Err(Error::Shape {
                        op: "star_fcn",
                        left: s.weight.value.shape(),
                        right: d.weight.value.shape(),
                    });
                }
            }
        }
        match self.shared.last() {
            Some(last) if last.fan_out() == 1 => Ok(()),
            _ => Err(Error::Config("star FCN must end in a width-1 layer".into())),
        }
    }

    fn stack(&self, domain: usize) -> Result<&[DomainLayer]> {
        if domain == 0 || domain > self.num_domains() {
            return Err(Error::Domain {
                domain,
                num_domains: self.num_domains(),
            });
        }
        Ok(&self.domains[domain - 1])
    }

    /// Effective `(W*_p, b*_p)` for every layer of `domain`.
    pub fn effective_layers(&self, domain: usize) -> Result<Vec<(Matrix, Matrix)>> {
        let stack = self.stack(domain)?;
        self.shared
            .iter()
            .zip(stack)
            .map(|(s, d)| {
                star_layer_params(&s.weight.value, &s.bias.value, &d.weight.value, &d.bias.value)
            })
            .collect()
    }

    pub fn forward_train(&mut self, x: &Matrix, domain: usize) -> Result<Matrix> {
        let effective = self.effective_layers(domain)?;
        let mut h = x.clone();
        let mut layers = Vec::with_capacity(effective.len());
        for ((w, b), s) in effective.into_iter().zip(&self.shared) {
            let (out, cache) = fc_forward(&w, &b, s.activation, &h)?;
            layers.push((cache, w));
            h = out;
        }
        self.cache = Some(StarCache { domain, layers });
        Ok(h)
    }

    pub fn forward_infer(&self, x: &Matrix, domain: usize) -> Result<Matrix> {
        let mut h = x.clone();
        for ((w, b), s) in self.effective_layers(domain)?.into_iter().zip(&self.shared) {
            h = fc_forward(&w, &b, s.activation, &h)?.0;
        }
        Ok(h)
    }

    /// Routes `∂L/∂W*` to the shared factor (`⊙ W_p`) and to the domain
    /// factor (`⊙ W`); bias gradients go to both unchanged.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("star FCN backward without forward".into()))?;
        let p = cache.domain - 1;
        let mut grad = upstream.clone();
        for (l, (fc_cache, effective_w)) in cache.layers.iter().enumerate().rev() {
            let shared = &mut self.shared[l];
            let g = fc_backward(effective_w, shared.activation, fc_cache, &grad)?;
            let domain = &mut self.domains[p][l];
            let d_shared = g.weight.hadamard(&domain.weight.value)?;
            let d_domain = g.weight.hadamard(&shared.weight.value)?;
            shared.weight.accumulate(&d_shared);
            shared.bias.accumulate(&g.bias);
            domain.weight.accumulate(&d_domain);
            domain.bias.accumulate(&g.bias);
            grad = g.input;
        }
        Ok(grad)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.shared.iter().flat_map(|l| l.params()).collect();
        for stack in &self.domains {
            for d in stack {
                out.push(&d.weight);
                out.push(&d.bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.shared.iter_mut().flat_map(|l| l.params_mut()).collect();
        for stack in &mut self.domains {
            for d in stack {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out
    }
}

/// Plain stack of fully-connected layers, used by the baselines.
#[derive(Clone, Debug)]
pub struct FcStack {
    pub layers: Vec<FcLayer>,
}

impl FcStack {
    pub fn new(input: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (l, &w) in widths.iter().enumerate() {
            layers.push(FcLayer::new(fan_in, w, activation_for(l, widths.len()), rng));
            fan_in = w;
        }
        Self { layers }
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let mut grad = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(grad)
    }

    /// `(weight, bias)` per layer.
    pub fn weights(&self) -> Vec<(Matrix, Matrix)> {
        self.layers
            .iter()
            .map(|l| (l.weight.value.clone(), l.bias.value.clone()))
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_domain_factors_keep_shared_layer() {
        let mut rng = Rng::new(1);
        let w = Matrix::normal(3, 2, 1.0, &mut rng);
        let b = Matrix::normal(1, 2, 1.0, &mut rng);
        let (ws, bs) = star_layer_params(&w, &b, &Matrix::ones(3, 2), &Matrix::zeros(1, 2)).unwrap();
        assert!(ws.bitwise_eq(&w));
        assert!(bs.bitwise_eq(&b));
    }

    #[test]
    fn zero_domain_weights_gate_off_shared_weights() {
        let w = Matrix::from_rows(&[&[1.0, -2.0]]);
        let (ws, _) = star_layer_params(&w, &Matrix::zeros(1, 2), &Matrix::zeros(1, 2), &Matrix::zeros(1, 2))
            .unwrap();
        assert!(ws.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_arithmetic() {
        let (ws, bs) = star_layer_params(
            &Matrix::from_rows(&[&[2.0]]),
            &Matrix::from_rows(&[&[1.0]]),
            &Matrix::from_rows(&[&[3.0]]),
            &Matrix::from_rows(&[&[-1.0]]),
        )
        .unwrap();
        assert_eq!(ws, Matrix::from_rows(&[&[6.0]]));
        assert_eq!(bs, Matrix::from_rows(&[&[0.0]]));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let res = star_layer_params(
            &Matrix::zeros(2, 2),
            &Matrix::zeros(1, 2),
            &Matrix::zeros(2, 3),
            &Matrix::zeros(1, 2),
        );
        assert!(matches!(res, Err(Error::Shape { .. })));
    }

    #[test]
    fn fresh_star_fcn_equals_its_shared_stack() {
        let mut rng = Rng::new(2);
        let fcn = StarFcn::new(4, &[5, 3, 1], 3, &mut rng);
        fcn.validate().unwrap();
        let shared = FcStack {
            layers: fcn.shared.clone(),
        };
        let x = Matrix::normal(7, 4, 1.0, &mut rng);
        for p in 1..=3 {
            let a = fcn.forward_infer(&x, p).unwrap();
            let b = shared.forward_infer(&x).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }
        assert!(matches!(fcn.forward_infer(&x, 4), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_only_reaches_the_batch_domain() {
        let mut rng = Rng::new(3);
        let mut fcn = StarFcn::new(4, &[3, 1], 2, &mut rng);
        let x = Matrix::normal(5, 4, 1.0, &mut rng);
        fcn.forward_train(&x, 2).unwrap();
        fcn.backward(&Matrix::ones(5, 1)).unwrap();
        for d in &fcn.domains[0] {
            assert!(!d.weight.is_touched() && !d.bias.is_touched());
            assert!(d.weight.grad.as_slice().iter().all(|&g| g == 0.0));
        }
        assert!(fcn.domains[1].iter().all(|d| d.weight.is_touched()));
        assert!(matches!(
            fcn.backward(&Matrix::ones(5, 1)),
            Err(Error::Protocol(_))
        ));
    }
}
