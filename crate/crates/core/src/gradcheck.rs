//! Finite-difference verification of every hand-written backward pass.
//!
//! Each layer is checked on the objective `Σ r ⊙ f(x)` for a fixed random
//! projection `r`, against both its inputs and its parameters. Whole models
//! are checked on the mean sigmoid cross-entropy of one single-domain batch.

use std::fmt;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::layers::{Activation, BnState, FcLayer, FeatureTables, LnState, Param, PnState};
use crate::model::{AuxNet, CtrModel, ModelConfig, ModelKind, NormKind, StarFcn};
use crate::optim::bce_with_logits;
use crate::tensor::{grad_check, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub num_domains: usize,
    pub embed_dim: usize,
    pub layers: Vec<usize>,
    pub batch_size: usize,
    /// Vocabulary sizes for behavior, profile, item and context.
    pub vocab: [usize; 4],
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            num_domains: 2,
            embed_dim: 4,
            layers: vec![8, 4, 1],
            batch_size: 4,
            vocab: [10, 6, 10, 4],
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::Config("gradcheck needs at least two domains".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("gradcheck batch_size must be at least 2".into()));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Config("step and tolerance must be positive".into()));
        }
        self.model_config(ModelKind::Star, NormKind::Partitioned).validate()
    }

    pub fn model_config(&self, kind: ModelKind, norm: NormKind) -> ModelConfig {
        ModelConfig {
            kind,
            norm,
            num_domains: self.num_domains,
            vocab: self.vocab,
            embed_dim: self.embed_dim,
            layers: self.layers.clone(),
            aux: true,
            aux_embed_dim: 2,
            aux_hidden: 3,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub module: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<CheckRow>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_relative_error < self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            let verdict = if r.max_relative_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<24}{:>8}  {:.3e}  {verdict}",
                r.module, r.coordinates, r.max_relative_error
            )?;
        }
        Ok(())
    }
}

/// A layer with a continuous input, checked against `Σ r ⊙ forward(x)`.
trait Probe: Clone {
    fn values(&mut self) -> Vec<&mut Matrix>;
    fn forward(&mut self, x: &Matrix) -> Result<Matrix>;
    /// Input gradient followed by parameter gradients in `values` order.
    fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<f64>)>;
}

fn param_grads(params: &[&Param]) -> Vec<f64> {
    params.iter().flat_map(|p| p.grad.as_slice().to_vec()).collect()
}

fn flatten(values: Vec<&mut Matrix>) -> Vec<f64> {
    values.into_iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

fn assign(values: Vec<&mut Matrix>, theta: &[f64]) {
    let mut off = 0;
    for m in values {
        let n = m.len();
        m.as_mut_slice().copy_from_slice(&theta[off..off + n]);
        off += n;
    }
}

fn jitter(values: Vec<&mut Matrix>, scale: f64, rng: &mut Rng) {
    for m in values {
        m.as_mut_slice().iter_mut().for_each(|v| *v += scale * rng.normal());
    }
}

fn check_probe<P: Probe>(mut layer: P, x: &Matrix, rng: &mut Rng, h: f64) -> Result<(usize, f64)> {
    let r = Matrix::normal(x.rows(), layer.clone().forward(x)?.cols(), 1.0, rng);
    layer.forward(x)?;
    let (dx, dparams) = layer.backward(&r)?;

    let mut theta = x.as_slice().to_vec();
    theta.extend(flatten(layer.values()));
    let mut analytic = dx.into_vec();
    analytic.extend(dparams);
    let (rows, cols) = x.shape();
    let err = grad_check(
        |t| {
            let mut l = layer.clone();
            assign(l.values(), &t[rows * cols..]);
            let out = l.forward(&Matrix::from_vec(rows, cols, t[..rows * cols].to_vec())?)?;
            Ok(out.hadamard(&r)?.as_slice().iter().sum())
        },
        &theta,
        &analytic,
        h,
    )?;
    Ok((theta.len(), err))
}

impl Probe for FcLayer {
    fn values(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight.value, &mut self.bias.value]
    }
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        FcLayer::forward(self, x)
    }
    fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let dx = FcLayer::backward(self, upstream)?;
        Ok((dx, param_grads(&self.params())))
    }
}

impl Probe for BnState {
    fn values(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.gamma.value, &mut self.beta.value]
    }
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.forward_train(x)
    }
    fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let dx = BnState::backward(self, upstream)?;
        Ok((dx, param_grads(&[&self.gamma, &self.beta])))
    }
}

impl Probe for LnState {
    fn values(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.gamma.value, &mut self.beta.value]
    }
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.forward_train(x)
    }
    fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let dx = LnState::backward(self, upstream)?;
        Ok((dx, param_grads(&[&self.gamma, &self.beta])))
    }
}

/// A component that also takes the batch's domain.
#[derive(Clone)]
struct InDomain<T> {
    inner: T,
    domain: usize,
}

impl Probe for InDomain<PnState> {
    fn values(&mut self) -> Vec<&mut Matrix> {
        let pn = &mut self.inner;
        let mut out = vec![&mut pn.gamma.value, &mut pn.beta.value];
        out.extend(pn.domain_gamma.iter_mut().map(|p| &mut p.value));
        out.extend(pn.domain_beta.iter_mut().map(|p| &mut p.value));
        out
    }
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.inner.forward_train(x, self.domain)
    }
    fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let pn = &mut self.inner;
        let dx = pn.backward(upstream)?;
        let mut params = vec![&pn.gamma, &pn.beta];
        params.extend(pn.domain_gamma.iter());
        params.extend(pn.domain_beta.iter());
        Ok((dx, param_grads(&params)))
    }
}

impl Probe for InDomain<StarFcn> {
    fn values(&mut self) -> Vec<&mut Matrix> {
        self.inner.params_mut().into_iter().map(|p| &mut p.value).collect()
    }
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.inner.forward_train(x, self.domain)
    }
    fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let dx = self.inner.backward(upstream)?;
        Ok((dx, param_grads(&self.inner.params())))
    }
}

impl Probe for InDomain<AuxNet> {
    fn values(&mut self) -> Vec<&mut Matrix> {
        let (dense, table) = self.inner.split_mut();
        let mut out: Vec<&mut Matrix> = dense.into_iter().map(|p| &mut p.value).collect();
        out.push(&mut table.weights);
        out
    }
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.inner.forward_train(x, self.domain)
    }
    fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let dx = self.inner.backward(upstream)?;
        let mut g = param_grads(&self.inner.params());
        g.extend(self.inner.domain_embedding.dense_grad().into_vec());
        Ok((dx, g))
    }
}

/// Random examples of one domain within `vocab`.
pub fn random_batch(domain: usize, n: usize, vocab: [usize; 4], rng: &mut Rng) -> Vec<Example> {
    (0..n)
        .map(|_| Example {
            domain,
            clicked: rng.bernoulli(0.4),
            behavior: (0..rng.below(4)).map(|_| rng.below(vocab[0])).collect(),
            user: rng.below(vocab[1]),
            item: rng.below(vocab[2]),
            context: rng.below(vocab[3]),
        })
        .collect()
}

fn check_embedding(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<(usize, f64)> {
    let mut tables = FeatureTables::new(cfg.vocab, cfg.embed_dim, rng);
    let batch = random_batch(1, cfg.batch_size, cfg.vocab, rng);
    let r = Matrix::normal(batch.len(), tables.pooled_width(), 1.0, rng);
    tables.backward(&batch, &r);
    let flat = |t: &FeatureTables| -> Vec<f64> {
        t.tables.iter().flat_map(|e| e.weights.as_slice().to_vec()).collect()
    };
    let theta = flat(&tables);
    let analytic: Vec<f64> = tables
        .tables
        .iter()
        .flat_map(|e| e.dense_grad().into_vec())
        .collect();
    let err = grad_check(
        |t| {
            let mut probe = tables.clone();
            assign(probe.tables.iter_mut().map(|e| &mut e.weights).collect(), t);
            Ok(probe.pool_batch(&batch)?.hadamard(&r)?.as_slice().iter().sum())
        },
        &theta,
        &analytic,
        cfg.step,
    )?;
    Ok((theta.len(), err))
}

fn check_model(cfg: &GradCheckConfig, kind: ModelKind, norm: NormKind, rng: &mut Rng) -> Result<(usize, f64)> {
    let mut model = CtrModel::new(cfg.model_config(kind, norm))?;
    // Move every parameter off its initial value so no factor is exactly one
    // or zero.
    let theta: Vec<f64> = model.flat_params().iter().map(|v| v + 0.3 * rng.normal()).collect();
    model.set_flat_params(&theta)?;
    let domain = cfg.num_domains;
    let batch = random_batch(domain, cfg.batch_size, cfg.vocab, rng);
    model.zero_grad();
    let logits = model.forward_train(&batch)?;
    let labels: Vec<f64> = batch.iter().map(Example::label).collect();
    let (_, d) = bce_with_logits(&logits, &labels)?;
    model.backward(&batch, &d)?;
    let analytic = model.flat_grads();
    let err = grad_check(
        |t| {
            let mut m = model.clone();
            m.set_flat_params(t)?;
            m.loss(&batch, true)
        },
        &theta,
        &analytic,
        cfg.step,
    )?;
    Ok((theta.len(), err))
}

/// Checks every layer and every model variant.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = Rng::derived(cfg.seed, 0x6ead_c4ec);
    let h = cfg.step;
    let b = cfg.batch_size;
    let m = cfg.num_domains;
    let width = cfg.embed_dim * 4;
    let mut rows = Vec::new();
    let mut push = |module: &str, res: (usize, f64)| {
        rows.push(CheckRow {
            module: module.to_string(),
            coordinates: res.0,
            max_relative_error: res.1,
        })
    };

    for (name, act) in [("dense.relu", Activation::Relu), ("dense.identity", Activation::Identity)] {
        let x = Matrix::normal(b, width, 1.0, &mut rng);
        let mut layer = FcLayer::new(width, cfg.layers[0], act, &mut rng);
        jitter(vec![&mut layer.bias.value], 0.3, &mut rng);
        push(name, check_probe(layer, &x, &mut rng, h)?);
    }

    push("embedding", check_embedding(cfg, &mut rng)?);

    let mut bn = BnState::new(width);
    jitter(Probe::values(&mut bn), 0.5, &mut rng);
    push("norm.bn", check_probe(bn, &Matrix::normal(b, width, 1.0, &mut rng), &mut rng, h)?);

    let mut ln = LnState::new(width);
    jitter(Probe::values(&mut ln), 0.5, &mut rng);
    push("norm.ln", check_probe(ln, &Matrix::normal(b, width, 1.0, &mut rng), &mut rng, h)?);

    let mut pn = InDomain {
        inner: PnState::new(width, m),
        domain: m,
    };
    jitter(pn.values(), 0.5, &mut rng);
    push("norm.pn", check_probe(pn, &Matrix::normal(b, width, 1.0, &mut rng), &mut rng, h)?);

    let mut star = InDomain {
        inner: StarFcn::new(width, &cfg.layers, m, &mut rng),
        domain: m,
    };
    jitter(star.values(), 0.3, &mut rng);
    push("star_fcn", check_probe(star, &Matrix::normal(b, width, 1.0, &mut rng), &mut rng, h)?);

    let mut aux = InDomain {
        inner: AuxNet::new(m, 2, width, 3, &mut rng),
        domain: m,
    };
    jitter(aux.values(), 0.3, &mut rng);
    push("aux", check_probe(aux, &Matrix::normal(b, width, 1.0, &mut rng), &mut rng, h)?);

    for kind in [ModelKind::Star, ModelKind::Base, ModelKind::SharedBottom] {
        for norm in [NormKind::Partitioned, NormKind::Batch, NormKind::Layer] {
            push(&format!("model.{kind}.{norm}"), check_model(cfg, kind, norm, &mut rng)?);
        }
    }
    Ok(GradCheckReport {
        rows,
        tolerance: cfg.tolerance,
    })
}
