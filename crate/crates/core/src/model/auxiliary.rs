use crate::error::{Error, Result};
use crate::layers::{Activation, EmbeddingTable, FcLayer, Param};
use crate::tensor::{Matrix, Rng};

/// Auxiliary network: a learned embedding of the domain indicator,
/// concatenated with the pooled features and passed through two
/// fully-connected stages to a scalar `s_a`.
///
/// No batch-dependent normalization is applied, so its output for an
/// example does not depend on the rest of the batch.
#[derive(Clone, Debug)]
pub struct AuxNet {
    pub domain_embedding: EmbeddingTable,
    pub hidden: FcLayer,
    pub output: FcLayer,
    cache: Option<AuxCache>,
}

#[derive(Clone, Debug)]
struct AuxCache {
    domain: usize,
    rows: usize,
}

impl AuxNet {
    pub fn new(
        num_domains: usize,
        embed_dim: usize,
        feature_width: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            domain_embedding: EmbeddingTable::new(num_domains, embed_dim, rng),
            hidden: FcLayer::new(embed_dim + feature_width, hidden, Activation::Relu, rng),
            output: FcLayer::new(hidden, 1, Activation::Identity, rng),
            cache: None,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domain_embedding.vocab_size()
    }

    fn input(&self, features: &Matrix, domain: usize) -> Result<Matrix> {
        if domain == 0 || domain > self.num_domains() {
            return Err(Error::Domain {
                domain,
                num_domains: self.num_domains(),
            });
        }
        let emb = self.domain_embedding.row(domain - 1);
        let mut tiled = Matrix::zeros(features.rows(), emb.len());
        for r in 0..features.rows() {
            tiled.row_mut(r).copy_from_slice(emb);
        }
        Matrix::hcat(&[&tiled, features])
    }

    pub fn forward_train(&mut self, features: &Matrix, domain: usize) -> Result<Matrix> {
        let x = self.input(features, domain)?;
        let h = self.hidden.forward(&x)?;
        let out = self.output.forward(&h)?;
        self.cache = Some(AuxCache {
            domain,
            rows: features.rows(),
        });
        Ok(out)
    }

    pub fn forward_infer(&self, features: &Matrix, domain: usize) -> Result<Matrix> {
        let x = self.input(features, domain)?;
        self.output.infer(&self.hidden.infer(&x)?)
    }

    /// Returns the gradient with respect to the pooled features.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("aux backward without forward".into()))?;
        let dh = self.output.backward(upstream)?;
        let dx = self.hidden.backward(&dh)?;
        let d_emb = self.domain_embedding.dim();
        let d_domain = dx.column_slice(0, d_emb).sum_rows();
        // One lookup of the domain row, so its gradient is the batch sum.
        self.domain_embedding
            .accumulate_mean(&[cache.domain - 1], d_domain.as_slice());
        debug_assert_eq!(dx.rows(), cache.rows);
        Ok(dx.column_slice(d_emb, dx.cols() - d_emb))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.hidden.params().to_vec();
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [a, b] = self.hidden.params_mut();
        let [c, d] = self.output.params_mut();
        vec![a, b, c, d]
    }

    /// Dense parameters and the domain table, borrowed together.
    pub fn split_mut(&mut self) -> (Vec<&mut Param>, &mut EmbeddingTable) {
        let [a, b] = self.hidden.params_mut();
        let [c, d] = self.output.params_mut();
        (vec![a, b, c, d], &mut self.domain_embedding)
    }
}
