use std::collections::BTreeMap;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

pub const NUM_FIELDS: usize = 4;
pub const FIELD_NAMES: [&str; NUM_FIELDS] = ["behavior", "profile", "item", "context"];

/// Embedding rows with sparse, row-keyed gradient accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Matrix,
    grads: BTreeMap<usize, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        Self::from_weights(Matrix::normal(vocab_size, dim, 0.1, rng))
    }

    pub fn from_weights(weights: Matrix) -> Self {
        Self {
            weights,
            grads: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.weights.row(id)
    }

    /// Mean of the rows for `ids`, written into `out`; zero for an empty list.
    fn mean_into(&self, ids: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if ids.is_empty() {
            return;
        }
        for &id in ids {
            for (o, w) in out.iter_mut().zip(self.weights.row(id)) {
                *o += w;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }

    /// Spreads the gradient of a mean-pooled output back over its rows.
    pub fn accumulate_mean(&mut self, ids: &[usize], grad: &[f64]) {
        if ids.is_empty() {
            return;
        }
        let inv = 1.0 / ids.len() as f64;
        let dim = self.dim();
        for &id in ids {
            let g = self.grads.entry(id).or_insert_with(|| vec![0.0; dim]);
            for (gi, d) in g.iter_mut().zip(grad) {
                *gi += d * inv;
            }
        }
    }

    pub fn sparse_grads(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Dense copy of the accumulated gradient (zero rows where untouched).
    pub fn dense_grad(&self) -> Matrix {
        let mut out = Matrix::zeros(self.vocab_size(), self.dim());
        for (&id, g) in &self.grads {
            out.row_mut(id).copy_from_slice(g);
        }
        out
    }

    /// Gives the optimizer mutable weights alongside the touched rows.
    pub fn split_mut(&mut self) -> (&mut Matrix, &BTreeMap<usize, Vec<f64>>) {
        (&mut self.weights, &self.grads)
    }
}

/// One embedding table per input field, shared by every domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTables {
    pub tables: [EmbeddingTable; NUM_FIELDS],
}

impl FeatureTables {
    /// `vocab` holds the sizes for behavior, profile, item and context.
    pub fn new(vocab: [usize; NUM_FIELDS], dim: usize, rng: &mut Rng) -> Self {
        Self {
            tables: vocab.map(|v| EmbeddingTable::new(v, dim, rng)),
        }
    }

    pub fn dim(&self) -> usize {
        self.tables[0].dim()
    }

    pub fn pooled_width(&self) -> usize {
        self.tables.iter().map(EmbeddingTable::dim).sum()
    }

    pub fn vocab_sizes(&self) -> [usize; NUM_FIELDS] {
        [0, 1, 2, 3].map(|f| self.tables[f].vocab_size())
    }

    pub fn validate(&self, example: &Example) -> Result<()> {
        for (f, ids) in example.field_ids().iter().enumerate() {
            let vocab = self.tables[f].vocab_size();
            if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
                return Err(Error::Index {
                    field: FIELD_NAMES[f].to_string(),
                    id,
                    vocab,
                });
            }
        }
        Ok(())
    }

    /// Pools a batch into a `B × pooled_width` matrix.
    pub fn pool_batch(&self, batch: &[Example]) -> Result<Matrix> {
        let width = self.pooled_width();
        let mut out = Matrix::zeros(batch.len(), width);
        for (r, ex) in batch.iter().enumerate() {
            self.validate(ex)?;
            let row = out.row_mut(r);
            let mut offset = 0;
            for (table, ids) in self.tables.iter().zip(ex.field_ids()) {
                let d = table.dim();
                table.mean_into(ids, &mut row[offset..offset + d]);
                offset += d;
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, batch: &[Example], d_pooled: &Matrix) {
        for (r, ex) in batch.iter().enumerate() {
            let row = d_pooled.row(r);
            let mut offset = 0;
            for (table, ids) in self.tables.iter_mut().zip(ex.field_ids()) {
                let d = table.dim();
                table.accumulate_mean(ids, &row[offset..offset + d]);
                offset += d;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tables.iter_mut().for_each(EmbeddingTable::zero_grad);
    }
}

/// Per-field mean of looked-up embeddings, fields concatenated.
pub fn embed_and_pool(example: &Example, tables: &FeatureTables) -> Result<Vec<f64>> {
    Ok(tables.pool_batch(std::slice::from_ref(example))?.into_vec())
}
