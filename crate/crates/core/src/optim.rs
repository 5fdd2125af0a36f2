//! Sigmoid cross-entropy and the Adam optimizer.
//!
//! Adam here is lazy: a parameter tensor or embedding row is only updated on
//! steps where a backward pass actually reached it. Its moments do not decay
//! in between, and bias correction uses the number of updates that slot has
//! received. A slot that has gradient on every step therefore follows dense
//! Adam exactly, and domain-specific tensors never move on another domain's
//! mini-batch.

use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, Param};
use crate::tensor::Matrix;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
///
/// Returns the loss and its gradient with respect to each logit,
/// `(ŷ − y) / B`.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape {
            op: "bce_with_logits",
            left: (logits.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if logits.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!("label {bad} is not 0 or 1")));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&s, &y) in logits.iter().zip(labels) {
        loss += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
        grad.push((sigmoid(s) - y) / n);
    }
    Ok((loss / n, grad))
}

/// Mean cross-entropy of probabilities, `-y ln ŷ - (1-y) ln(1-ŷ)`.
pub fn bce_loss(yhat: &[f64], labels: &[f64]) -> Result<f64> {
    let logits: Vec<f64> = yhat
        .iter()
        .map(|&p| {
            if p > 0.0 && p < 1.0 {
                Ok((p / (1.0 - p)).ln())
            } else {
                Err(Error::Numeric(format!("probability {p} outside (0, 1)")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(bce_with_logits(&logits, labels)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Matrix,
    v: Matrix,
    /// Updates applied so far; per row for embedding tables.
    updates: Vec<u32>,
}

impl Moments {
    fn for_shape(shape: (usize, usize), counters: usize) -> Self {
        Self {
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
            updates: vec![0; counters],
        }
    }
}

/// Adam moments for every parameter of one model, in the model's visiting
/// order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    dense: Vec<Moments>,
    sparse: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            dense: Vec::new(),
            sparse: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters and embedding tables.
    ///
    /// The slices must list the same tensors in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Param], tables: &mut [&mut EmbeddingTable]) -> Result<()> {
        if self.dense.is_empty() && self.sparse.is_empty() {
            self.dense = params
                .iter()
                .map(|p| Moments::for_shape(p.value.shape(), 1))
                .collect();
            self.sparse = tables
                .iter()
                .map(|t| Moments::for_shape(t.weights.shape(), t.vocab_size()))
                .collect();
        }
        if params.len() != self.dense.len() || tables.len() != self.sparse.len() {
            return Err(Error::Protocol(format!(
                "optimizer built for {} tensors and {} tables, got {} and {}",
                self.dense.len(),
                self.sparse.len(),
                params.len(),
                tables.len()
            )));
        }
        for (p, mom) in params.iter().zip(&self.dense) {
            if p.value.shape() != mom.m.shape() || p.grad.shape() != mom.m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: mom.m.shape(),
                    right: p.grad.shape(),
                });
            }
        }
        for (t, mom) in tables.iter().zip(&self.sparse) {
            if t.weights.shape() != mom.m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: mom.m.shape(),
                    right: t.weights.shape(),
                });
            }
        }

        self.step += 1;
        let cfg = self.config;
        for (p, mom) in params.iter_mut().zip(self.dense.iter_mut()) {
            if !p.is_touched() {
                continue;
            }
            mom.updates[0] += 1;
            let t = mom.updates[0];
            let Param { value, grad, .. } = &mut **p;
            update_slice(
                &cfg,
                t,
                value.as_mut_slice(),
                grad.as_slice(),
                mom.m.as_mut_slice(),
                mom.v.as_mut_slice(),
            );
        }
        for (table, mom) in tables.iter_mut().zip(self.sparse.iter_mut()) {
            let dim = table.dim();
            let (weights, grads) = table.split_mut();
            for (&row, g) in grads {
                mom.updates[row] += 1;
                let t = mom.updates[row];
                let range = row * dim..(row + 1) * dim;
                update_slice(
                    &cfg,
                    t,
                    weights.row_mut(row),
                    g,
                    &mut mom.m.as_mut_slice()[range.clone()],
                    &mut mom.v.as_mut_slice()[range],
                );
            }
        }
        Ok(())
    }
}

fn update_slice(cfg: &AdamConfig, t: u32, value: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((w, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}
