//! The STAR model and its baselines.
//!
//! Every variant shares the same front end: one set of embedding tables for
//! all domains, mean pooling per field, and a normalizer at the FCN input.
//! They differ in the tower that maps the normalized features to the main
//! logit `s_m`:
//!
//! - `Star`: shared FCN whose weights are modulated per domain,
//! - `Base`: a single shared FCN that ignores the domain,
//! - `SharedBottom`: an independent FCN per domain.
//!
//! An optional auxiliary network adds `s_a` to the logit before the sigmoid.

mod auxiliary;
pub mod checkpoint;
mod star;

use std::fmt;
use std::str::FromStr;

pub use auxiliary::AuxNet;
pub use star::{star_layer_params, Combination, DomainLayer, FcStack, StarFcn};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::layers::{batch_domain, BnState, EmbeddingTable, FeatureTables, LnState, Param, PnState};
use crate::optim::{bce_with_logits, sigmoid, AdamState};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Star,
    Base,
    SharedBottom,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Star => "star",
            ModelKind::Base => "base",
            ModelKind::SharedBottom => "shared_bottom",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(ModelKind::Star),
            "base" => Ok(ModelKind::Base),
            "shared_bottom" => Ok(ModelKind::SharedBottom),
            other => Err(Error::Config(format!(
                "unknown model variant `{other}` (expected star, base or shared_bottom)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Batch,
    Layer,
    Partitioned,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Batch => "bn",
            NormKind::Layer => "ln",
            NormKind::Partitioned => "pn",
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bn" => Ok(NormKind::Batch),
            "ln" => Ok(NormKind::Layer),
            "pn" => Ok(NormKind::Partitioned),
            other => Err(Error::Config(format!(
                "unknown normalizer `{other}` (expected bn, ln or pn)"
            ))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture of a model. `layers` lists the FCN widths and must end in 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub norm: NormKind,
    pub num_domains: usize,
    /// Vocabulary sizes for behavior, profile, item and context.
    pub vocab: [usize; 4],
    pub embed_dim: usize,
    pub layers: Vec<usize>,
    pub aux: bool,
    pub aux_embed_dim: usize,
    pub aux_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Star,
            norm: NormKind::Partitioned,
            num_domains: 5,
            vocab: [2000, 400, 2000, 16],
            embed_dim: 8,
            layers: vec![64, 32, 1],
            aux: true,
            aux_embed_dim: 4,
            aux_hidden: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn pooled_width(&self) -> usize {
        self.embed_dim * self.vocab.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::Config("num_domains must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.vocab.contains(&0) {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        if self.layers.last() != Some(&1) || self.layers.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths {:?} must be positive and end in 1",
                self.layers
            )));
        }
        if self.aux && (self.aux_embed_dim == 0 || self.aux_hidden == 0) {
            return Err(Error::Config("auxiliary network sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Normalizer applied to the pooled features.
#[derive(Clone, Debug)]
pub enum Normalizer {
    Batch(BnState),
    Layer(LnState),
    Partitioned(PnState),
}

impl Normalizer {
    pub fn new(kind: NormKind, width: usize, num_domains: usize) -> Self {
        match kind {
            NormKind::Batch => Normalizer::Batch(BnState::new(width)),
            NormKind::Layer => Normalizer::Layer(LnState::new(width)),
            NormKind::Partitioned => Normalizer::Partitioned(PnState::new(width, num_domains)),
        }
    }

    pub fn kind(&self) -> NormKind {
        match self {
            Normalizer::Batch(_) => NormKind::Batch,
            Normalizer::Layer(_) => NormKind::Layer,
            Normalizer::Partitioned(_) => NormKind::Partitioned,
        }
    }

    pub fn forward_train(&mut self, z: &Matrix, domain: usize) -> Result<Matrix> {
        match self {
            Normalizer::Batch(s) => s.forward_train(z),
            Normalizer::Layer(s) => s.forward_train(z),
            Normalizer::Partitioned(s) => s.forward_train(z, domain),
        }
    }

    pub fn forward_infer(&self, z: &Matrix, domain: usize) -> Result<Matrix> {
        match self {
            Normalizer::Batch(s) => s.forward_infer(z),
            Normalizer::Layer(s) => s.forward_infer(z),
            Normalizer::Partitioned(s) => s.forward_infer(z, domain),
        }
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        match self {
            Normalizer::Batch(s) => s.backward(upstream),
            Normalizer::Layer(s) => s.backward(upstream),
            Normalizer::Partitioned(s) => s.backward(upstream),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Normalizer::Batch(s) => vec![&s.gamma, &s.beta],
            Normalizer::Layer(s) => vec![&s.gamma, &s.beta],
            Normalizer::Partitioned(s) => {
                let mut out = vec![&s.gamma, &s.beta];
                for (g, b) in s.domain_gamma.iter().zip(&s.domain_beta) {
                    out.push(g);
                    out.push(b);
                }
                out
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Normalizer::Batch(s) => vec![&mut s.gamma, &mut s.beta],
            Normalizer::Layer(s) => vec![&mut s.gamma, &mut s.beta],
            Normalizer::Partitioned(s) => {
                let mut out = vec![&mut s.gamma, &mut s.beta];
                for (g, b) in s.domain_gamma.iter_mut().zip(s.domain_beta.iter_mut()) {
                    out.push(g);
                    out.push(b);
                }
                out
            }
        }
    }
}

/// The part of the model that maps normalized features to `s_m`.
#[derive(Clone, Debug)]
pub enum Tower {
    Shared(FcStack),
    PerDomain(Vec<FcStack>),
    Star(StarFcn),
}

impl Tower {
    fn stack_mut(stacks: &mut [FcStack], domain: usize) -> Result<&mut FcStack> {
        let m = stacks.len();
        stacks.get_mut(domain.wrapping_sub(1)).ok_or(Error::Domain {
            domain,
            num_domains: m,
        })
    }

    fn stack(stacks: &[FcStack], domain: usize) -> Result<&FcStack> {
        stacks.get(domain.wrapping_sub(1)).ok_or(Error::Domain {
            domain,
            num_domains: stacks.len(),
        })
    }

    pub fn forward_train(&mut self, x: &Matrix, domain: usize) -> Result<Matrix> {
        match self {
            Tower::Shared(s) => s.forward_train(x),
            Tower::PerDomain(stacks) => Self::stack_mut(stacks, domain)?.forward_train(x),
            Tower::Star(s) => s.forward_train(x, domain),
        }
    }

    pub fn forward_infer(&self, x: &Matrix, domain: usize) -> Result<Matrix> {
        match self {
            Tower::Shared(s) => s.forward_infer(x),
            Tower::PerDomain(stacks) => Self::stack(stacks, domain)?.forward_infer(x),
            Tower::Star(s) => s.forward_infer(x, domain),
        }
    }

    pub fn backward(&mut self, upstream: &Matrix, domain: usize) -> Result<Matrix> {
        match self {
            Tower::Shared(s) => s.backward(upstream),
            Tower::PerDomain(stacks) => Self::stack_mut(stacks, domain)?.backward(upstream),
            Tower::Star(s) => s.backward(upstream),
        }
    }

    /// `(weight, bias)` per layer as seen by `domain`'s examples.
    pub fn effective_layers(&self, domain: usize) -> Result<Vec<(Matrix, Matrix)>> {
        match self {
            Tower::Shared(s) => Ok(s.weights()),
            Tower::PerDomain(stacks) => Ok(Self::stack(stacks, domain)?.weights()),
            Tower::Star(s) => s.effective_layers(domain),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Tower::Shared(s) => s.params(),
            Tower::PerDomain(stacks) => stacks.iter().flat_map(FcStack::params).collect(),
            Tower::Star(s) => s.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Tower::Shared(s) => s.params_mut(),
            Tower::PerDomain(stacks) => stacks.iter_mut().flat_map(FcStack::params_mut).collect(),
            Tower::Star(s) => s.params_mut(),
        }
    }
}

/// Parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub embedding: usize,
    pub normalizer: usize,
    pub tower: usize,
    pub aux: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embedding + self.normalizer + self.tower + self.aux
    }
}

/// Main and auxiliary logits for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitParts {
    pub main: Vec<f64>,
    pub aux: Option<Vec<f64>>,
}

impl LogitParts {
    pub fn combined(&self) -> Vec<f64> {
        match &self.aux {
            Some(aux) => self.main.iter().zip(aux).map(|(m, a)| m + a).collect(),
            None => self.main.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct ForwardCache {
    domain: usize,
    rows: usize,
    used_aux: bool,
}

/// A multi-domain CTR model: STAR or one of the baselines.
#[derive(Clone, Debug)]
pub struct CtrModel {
    pub config: ModelConfig,
    pub tables: FeatureTables,
    pub norm: Normalizer,
    pub tower: Tower,
    pub aux: Option<AuxNet>,
    /// When false, `s_a` is not added even if an auxiliary network exists.
    pub aux_enabled: bool,
    cache: Option<ForwardCache>,
}

impl CtrModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derived(config.seed, 0x5eed_0001);
        let width = config.pooled_width();
        if config.norm == NormKind::Layer && width < 2 {
            return Err(Error::Config("layer norm needs a pooled width of at least 2".into()));
        }
        let tables = FeatureTables::new(config.vocab, config.embed_dim, &mut rng);
        let norm = Normalizer::new(config.norm, width, config.num_domains);
        let tower = match config.kind {
            ModelKind::Star => Tower::Star(StarFcn::new(width, &config.layers, config.num_domains, &mut rng)),
            ModelKind::Base => Tower::Shared(FcStack::new(width, &config.layers, &mut rng)),
            ModelKind::SharedBottom => Tower::PerDomain(
                (0..config.num_domains)
                    .map(|_| FcStack::new(width, &config.layers, &mut rng))
                    .collect(),
            ),
        };
        let aux = config.aux.then(|| {
            AuxNet::new(
                config.num_domains,
                config.aux_embed_dim,
                width,
                config.aux_hidden,
                &mut rng,
            )
        });
        Ok(Self {
            aux_enabled: aux.is_some(),
            config,
            tables,
            norm,
            tower,
            aux,
            cache: None,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    fn aux_active(&self) -> bool {
        self.aux_enabled && self.aux.is_some()
    }

    fn domain_of(&self, batch: &[Example]) -> Result<usize> {
        let domains: Vec<usize> = batch.iter().map(|e| e.domain).collect();
        batch_domain(&domains, self.num_domains())
    }

    /// Training-mode forward pass over a single-domain batch; returns logits
    /// and caches what `backward` needs.
    pub fn forward_train(&mut self, batch: &[Example]) -> Result<Vec<f64>> {
        let domain = self.domain_of(batch)?;
        let pooled = self.tables.pool_batch(batch)?;
        let normalized = self.norm.forward_train(&pooled, domain)?;
        let mut logits = self.tower.forward_train(&normalized, domain)?.into_vec();
        let used_aux = self.aux_active();
        if used_aux {
            let aux = self.aux.as_mut().expect("aux active");
            let s_a = aux.forward_train(&pooled, domain)?;
            for (l, a) in logits.iter_mut().zip(s_a.as_slice()) {
                *l += a;
            }
        }
        self.cache = Some(ForwardCache {
            domain,
            rows: batch.len(),
            used_aux,
        });
        Ok(logits)
    }

    /// Backpropagates `∂L/∂logit` through the batch last seen by
    /// `forward_train`, accumulating into every reachable parameter.
    pub fn backward(&mut self, batch: &[Example], d_logits: &[f64]) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("model backward without forward".into()))?;
        if batch.len() != cache.rows || d_logits.len() != cache.rows {
            return Err(Error::Protocol(format!(
                "backward got {} examples and {} gradients for a forward over {}",
                batch.len(),
                d_logits.len(),
                cache.rows
            )));
        }
        let upstream = Matrix::from_vec(cache.rows, 1, d_logits.to_vec())?;
        let d_norm = self.tower.backward(&upstream, cache.domain)?;
        let mut d_pooled = self.norm.backward(&d_norm)?;
        if cache.used_aux {
            let aux = self.aux.as_mut().expect("aux used in forward");
            d_pooled.add_assign(&aux.backward(&upstream)?)?;
        }
        self.tables.backward(batch, &d_pooled);
        Ok(())
    }

    /// Inference-mode logits split into the main and auxiliary parts.
    pub fn logit_parts(&self, batch: &[Example]) -> Result<LogitParts> {
        let domain = self.domain_of(batch)?;
        let pooled = self.tables.pool_batch(batch)?;
        let normalized = self.norm.forward_infer(&pooled, domain)?;
        let main = self.tower.forward_infer(&normalized, domain)?.into_vec();
        let aux = if self.aux_active() {
            let aux = self.aux.as_ref().expect("aux active");
            Some(aux.forward_infer(&pooled, domain)?.into_vec())
        } else {
            None
        };
        Ok(LogitParts { main, aux })
    }

    pub fn predict_logits(&self, batch: &[Example]) -> Result<Vec<f64>> {
        Ok(self.logit_parts(batch)?.combined())
    }

    /// Predicted CTRs for a single-domain batch.
    pub fn predict(&self, batch: &[Example]) -> Result<Vec<f64>> {
        Ok(self.predict_logits(batch)?.into_iter().map(sigmoid).collect())
    }

    /// Predicted CTRs for examples from any mix of domains, in input order.
    pub fn predict_examples(&self, examples: &[Example]) -> Result<Vec<f64>> {
        predict_grouped(examples, self.num_domains(), |batch| self.predict(batch))
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
        self.tables_mut().into_iter().for_each(EmbeddingTable::zero_grad);
    }

    /// One optimization step on a single-domain batch; returns the loss.
    pub fn train_step(&mut self, adam: &mut AdamState, batch: &[Example]) -> Result<f64> {
        self.zero_grad();
        let logits = self.forward_train(batch)?;
        let labels: Vec<f64> = batch.iter().map(Example::label).collect();
        let (loss, d_logits) = bce_with_logits(&logits, &labels)?;
        self.backward(batch, &d_logits)?;
        let mut params = self.params_mut_inner();
        let (dense, tables) = (&mut params.0, &mut params.1);
        adam.step(dense, tables)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss}")));
        }
        Ok(loss)
    }

    /// Training loss on `batch` without touching any state.
    pub fn loss(&self, batch: &[Example], train_mode: bool) -> Result<f64> {
        let logits = if train_mode {
            let mut scratch = self.clone();
            scratch.forward_train(batch)?
        } else {
            self.predict_logits(batch)?
        };
        let labels: Vec<f64> = batch.iter().map(Example::label).collect();
        Ok(bce_with_logits(&logits, &labels)?.0)
    }

    fn params_mut_inner(&mut self) -> (Vec<&mut Param>, Vec<&mut EmbeddingTable>) {
        let mut dense = self.norm.params_mut();
        dense.extend(self.tower.params_mut());
        let mut tables: Vec<&mut EmbeddingTable> = self.tables.tables.iter_mut().collect();
        if let Some(aux) = self.aux.as_mut() {
            let (aux_dense, aux_table) = aux.split_mut();
            dense.extend(aux_dense);
            tables.push(aux_table);
        }
        (dense, tables)
    }

    /// Dense parameters in a fixed order: normalizer, tower, auxiliary.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.norm.params();
        out.extend(self.tower.params());
        if let Some(aux) = &self.aux {
            out.extend(aux.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.params_mut_inner().0
    }

    /// Embedding tables: the four feature tables, then the domain table of
    /// the auxiliary network if present.
    pub fn tables(&self) -> Vec<&EmbeddingTable> {
        let mut out: Vec<&EmbeddingTable> = self.tables.tables.iter().collect();
        if let Some(aux) = &self.aux {
            out.push(&aux.domain_embedding);
        }
        out
    }

    pub fn tables_mut(&mut self) -> Vec<&mut EmbeddingTable> {
        self.params_mut_inner().1
    }

    pub fn param_count(&self) -> ParamCount {
        let size = |ps: Vec<&Param>| ps.iter().map(|p| p.value.len()).sum::<usize>();
        ParamCount {
            embedding: self.tables.tables.iter().map(|t| t.weights.len()).sum(),
            normalizer: size(self.norm.params()),
            tower: size(self.tower.params()),
            aux: self.aux.as_ref().map_or(0, |a| {
                size(a.params()) + a.domain_embedding.weights.len()
            }),
        }
    }

    /// Every trainable value flattened: dense parameters, then tables.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for p in self.params() {
            out.extend_from_slice(p.value.as_slice());
        }
        for t in self.tables() {
            out.extend_from_slice(t.weights.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.flat_params().len();
        if values.len() != expected {
            return Err(Error::Shape {
                op: "set_flat_params",
                left: (expected, 1),
                right: (values.len(), 1),
            });
        }
        let mut offset = 0;
        let (dense, tables) = self.params_mut_inner();
        for p in dense {
            let n = p.value.len();
            p.value.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        for t in tables {
            let n = t.weights.len();
            t.weights.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Accumulated gradients in `flat_params` order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for p in self.params() {
            out.extend_from_slice(p.grad.as_slice());
        }
        for t in self.tables() {
            out.extend_from_slice(t.dense_grad().as_slice());
        }
        out
    }
}

/// Unknown-variant-checked constructor for the comparison models.
pub fn build_baseline(variant: &str, mut config: ModelConfig) -> Result<CtrModel> {
    config.kind = match variant.parse::<ModelKind>()? {
        ModelKind::Star => {
            return Err(Error::Config("`star` is not a baseline variant".into()));
        }
        kind => kind,
    };
    CtrModel::new(config)
}

/// Runs `predict` on maximal runs of same-domain examples and stitches the
/// results back in input order.
pub(crate) fn predict_grouped<F>(examples: &[Example], num_domains: usize, mut predict: F) -> Result<Vec<f64>>
where
    F: FnMut(&[Example]) -> Result<Vec<f64>>,
{
    let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); num_domains];
    for (i, ex) in examples.iter().enumerate() {
        if ex.domain == 0 || ex.domain > num_domains {
            return Err(Error::Domain {
                domain: ex.domain,
                num_domains,
            });
        }
        by_domain[ex.domain - 1].push(i);
    }
    let mut out = vec![0.0; examples.len()];
    for idx in by_domain.iter().filter(|v| !v.is_empty()) {
        let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
        for (&i, y) in idx.iter().zip(predict(&batch)?) {
            out[i] = y;
        }
    }
    Ok(out)
}
