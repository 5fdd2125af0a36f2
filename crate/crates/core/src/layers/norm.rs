//! Batch, layer and partitioned normalization.
//!
//! Batch normalization (BN) and partitioned normalization (PN) share one
//! standardize-then-affine kernel. PN differs only in where the affine and
//! the moving moments come from: the effective scale is `γ ⊙ γ_p`, the
//! effective shift is `β + β_p`, and each domain keeps its own moving mean
//! and variance for inference. With `γ_p = 1` and `β_p = 0` the two are
//! therefore bitwise identical in training mode.

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.01;

/// Moving moments used at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DomainStats {
    /// First batch initializes the moments; later batches are blended in as
    /// `E ← (1 − m)·E + m·μ` (likewise for the variance).
    fn absorb(slot: &mut Option<DomainStats>, batch: &DomainStats, momentum: f64) {
        match slot {
            None => *slot = Some(batch.clone()),
            Some(stats) => {
                for (e, mu) in stats.mean.iter_mut().zip(&batch.mean) {
                    *e = (1.0 - momentum) * *e + momentum * mu;
                }
                for (v, s2) in stats.var.iter_mut().zip(&batch.var) {
                    *v = (1.0 - momentum) * *v + momentum * s2;
                }
            }
        }
    }
}

/// Per-column mean and biased variance of a batch.
fn column_moments(z: &Matrix) -> Result<DomainStats> {
    let b = z.rows();
    if b < 2 {
        return Err(Error::Degenerate(format!(
            "batch normalization needs at least 2 rows, got {b}"
        )));
    }
    let n = b as f64;
    let mean: Vec<f64> = z.sum_rows().as_slice().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; z.cols()];
    for r in 0..b {
        for ((v, x), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok(DomainStats { mean, var })
}

/// `(z − mean) / √(var + ε)` column-wise; also returns the per-column std.
fn standardize(z: &Matrix, stats: &DomainStats, eps: f64) -> (Matrix, Vec<f64>) {
    let std: Vec<f64> = stats.var.iter().map(|v| (v + eps).sqrt()).collect();
    let mut out = z.clone();
    for r in 0..out.rows() {
        for ((x, m), s) in out.row_mut(r).iter_mut().zip(&stats.mean).zip(&std) {
            *x = (*x - m) / s;
        }
    }
    (out, std)
}

fn affine(xhat: &Matrix, scale: &[f64], shift: &[f64]) -> Matrix {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((x, g), b) in out.row_mut(r).iter_mut().zip(scale).zip(shift) {
            *x = g * *x + b;
        }
    }
    out
}

#[derive(Clone, Debug)]
struct BatchCache {
    xhat: Matrix,
    std: Vec<f64>,
    scale: Vec<f64>,
    domain: usize,
}

/// Gradients of a batch-statistics standardize + affine step.
struct AffineGrads {
    input: Matrix,
    scale: Matrix,
    shift: Matrix,
}

fn batch_backward(cache: &BatchCache, upstream: &Matrix) -> Result<AffineGrads> {
    let (b, d) = cache.xhat.shape();
    if upstream.shape() != (b, d) {
        return Err(Error::Shape {
            op: "batch_norm_backward",
            left: (b, d),
            right: upstream.shape(),
        });
    }
    let n = b as f64;
    let shift = upstream.sum_rows();
    let scale = upstream.hadamard(&cache.xhat)?.sum_rows();
    // dx̂ = dy ⊙ scale, and Σ_i dx̂, Σ_i dx̂ ⊙ x̂ per column follow from the sums above.
    let sum_dxhat: Vec<f64> = shift.as_slice().iter().zip(&cache.scale).map(|(s, g)| s * g).collect();
    let sum_dxhat_xhat: Vec<f64> =
        scale.as_slice().iter().zip(&cache.scale).map(|(s, g)| s * g).collect();
    let mut input = Matrix::zeros(b, d);
    for r in 0..b {
        let xr = cache.xhat.row(r);
        let ur = upstream.row(r);
        for (j, out) in input.row_mut(r).iter_mut().enumerate() {
            let dxhat = ur[j] * cache.scale[j];
            *out = (n * dxhat - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]) / (n * cache.std[j]);
        }
    }
    Ok(AffineGrads {
        input,
        scale,
        shift,
    })
}

/// Batch normalization with a single global set of moments.
#[derive(Clone, Debug)]
pub struct BnState {
    pub gamma: Param,
    pub beta: Param,
    pub stats: Option<DomainStats>,
    pub momentum: f64,
    pub epsilon: f64,
    cache: Option<BatchCache>,
}

impl BnState {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Param::new(Matrix::ones(1, width)),
            beta: Param::new(Matrix::zeros(1, width)),
            stats: None,
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.value.cols()
    }

    pub fn forward_train(&mut self, z: &Matrix) -> Result<Matrix> {
        let moments = column_moments(z)?;
        let (xhat, std) = standardize(z, &moments, self.epsilon);
        let scale = self.gamma.value.as_slice().to_vec();
        let out = affine(&xhat, &scale, self.beta.value.as_slice());
        DomainStats::absorb(&mut self.stats, &moments, self.momentum);
        self.cache = Some(BatchCache {
            xhat,
            std,
            scale,
            domain: 0,
        });
        Ok(out)
    }

    pub fn forward_infer(&self, z: &Matrix) -> Result<Matrix> {
        let stats = self
            .stats
            .as_ref()
            .ok_or(Error::UninitializedStats { domain: None })?;
        let (xhat, _) = standardize(z, stats, self.epsilon);
        Ok(affine(
            &xhat,
            self.gamma.value.as_slice(),
            self.beta.value.as_slice(),
        ))
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("batch norm backward without forward".into()))?;
        let g = batch_backward(&cache, upstream)?;
        self.gamma.accumulate(&g.scale);
        self.beta.accumulate(&g.shift);
        Ok(g.input)
    }

    /// Inference-time `(scale, shift)` such that output = `scale ⊙ z + shift`.
    pub fn folded_affine(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let stats = self
            .stats
            .as_ref()
            .ok_or(Error::UninitializedStats { domain: None })?;
        Ok(fold_affine(
            self.gamma.value.as_slice(),
            self.beta.value.as_slice(),
            stats,
            self.epsilon,
        ))
    }
}

fn fold_affine(scale: &[f64], shift: &[f64], stats: &DomainStats, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let s: Vec<f64> = scale
        .iter()
        .zip(&stats.var)
        .map(|(g, v)| g / (v + eps).sqrt())
        .collect();
    let t = shift
        .iter()
        .zip(&s)
        .zip(&stats.mean)
        .map(|((b, s), e)| b - s * e)
        .collect();
    (s, t)
}

/// Checks that every example in a batch comes from the same domain and
/// returns it.
pub fn batch_domain(domains: &[usize], num_domains: usize) -> Result<usize> {
    let first = *domains
        .first()
        .ok_or_else(|| Error::Degenerate("empty batch".into()))?;
    if first == 0 || first > num_domains {
        return Err(Error::Domain {
            domain: first,
            num_domains,
        });
    }
    if let Some(other) = domains.iter().find(|&&p| p != first) {
        return Err(Error::Contract(format!(
            "mini-batch mixes domains {first} and {other}"
        )));
    }
    Ok(first)
}

/// Partitioned normalization: global affine modulated per domain, with
/// per-domain moving moments.
#[derive(Clone, Debug)]
pub struct PnState {
    pub gamma: Param,
    pub beta: Param,
    pub domain_gamma: Vec<Param>,
    pub domain_beta: Vec<Param>,
    pub stats: Vec<Option<DomainStats>>,
    pub momentum: f64,
    pub epsilon: f64,
    cache: Option<BatchCache>,
}

impl PnState {
    pub fn new(width: usize, num_domains: usize) -> Self {
        Self {
            gamma: Param::new(Matrix::ones(1, width)),
            beta: Param::new(Matrix::zeros(1, width)),
            domain_gamma: (0..num_domains)
                .map(|_| Param::new(Matrix::ones(1, width)))
                .collect(),
            domain_beta: (0..num_domains)
                .map(|_| Param::new(Matrix::zeros(1, width)))
                .collect(),
            stats: vec![None; num_domains],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            cache: None,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.stats.len()
    }

    pub fn width(&self) -> usize {
        self.gamma.value.cols()
    }

    fn index(&self, domain: usize) -> Result<usize> {
        if domain == 0 || domain > self.num_domains() {
            return Err(Error::Domain {
                domain,
                num_domains: self.num_domains(),
            });
        }
        Ok(domain - 1)
    }

    /// `(γ ⊙ γ_p, β + β_p)`.
    pub fn effective_affine(&self, domain: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let i = self.index(domain)?;
        let scale = self
            .gamma
            .value
            .as_slice()
            .iter()
            .zip(self.domain_gamma[i].value.as_slice())
            .map(|(g, gp)| g * gp)
            .collect();
        let shift = self
            .beta
            .value
            .as_slice()
            .iter()
            .zip(self.domain_beta[i].value.as_slice())
            .map(|(b, bp)| b + bp)
            .collect();
        Ok((scale, shift))
    }

    /// Normalizes a batch drawn entirely from `domain` and updates only that
    /// domain's moving moments.
    pub fn forward_train(&mut self, z: &Matrix, domain: usize) -> Result<Matrix> {
        let i = self.index(domain)?;
        let (scale, shift) = self.effective_affine(domain)?;
        let moments = column_moments(z)?;
        let (xhat, std) = standardize(z, &moments, self.epsilon);
        let out = affine(&xhat, &scale, &shift);
        DomainStats::absorb(&mut self.stats[i], &moments, self.momentum);
        self.cache = Some(BatchCache {
            xhat,
            std,
            scale,
            domain,
        });
        Ok(out)
    }

    pub fn forward_infer(&self, z: &Matrix, domain: usize) -> Result<Matrix> {
        let i = self.index(domain)?;
        let stats = self.stats[i]
            .as_ref()
            .ok_or(Error::UninitializedStats {
                domain: Some(domain),
            })?;
        let (scale, shift) = self.effective_affine(domain)?;
        let (xhat, _) = standardize(z, stats, self.epsilon);
        Ok(affine(&xhat, &scale, &shift))
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("partitioned norm backward without forward".into()))?;
        let i = cache.domain - 1;
        let g = batch_backward(&cache, upstream)?;
        let d_gamma = g.scale.hadamard(&self.domain_gamma[i].value)?;
        let d_domain_gamma = g.scale.hadamard(&self.gamma.value)?;
        self.gamma.accumulate(&d_gamma);
        self.domain_gamma[i].accumulate(&d_domain_gamma);
        self.beta.accumulate(&g.shift);
        self.domain_beta[i].accumulate(&g.shift);
        Ok(g.input)
    }

    /// Inference-time per-domain `(scale_p, shift_p)` with
    /// `scale_p = (γ ⊙ γ_p) / √(Var_p + ε)` and `shift_p = β + β_p − scale_p ⊙ E_p`.
    pub fn folded_affine(&self, domain: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let i = self.index(domain)?;
        let stats = self.stats[i]
            .as_ref()
            .ok_or(Error::UninitializedStats {
                domain: Some(domain),
            })?;
        let (scale, shift) = self.effective_affine(domain)?;
        Ok(fold_affine(&scale, &shift, stats, self.epsilon))
    }
}

#[derive(Clone, Debug)]
struct RowCache {
    xhat: Matrix,
    std: Vec<f64>,
}

/// Layer normalization: per-row standardization with a learned per-feature
/// affine. Train and inference behave identically.
#[derive(Clone, Debug)]
pub struct LnState {
    pub gamma: Param,
    pub beta: Param,
    pub epsilon: f64,
    cache: Option<RowCache>,
}

impl LnState {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Param::new(Matrix::ones(1, width)),
            beta: Param::new(Matrix::zeros(1, width)),
            epsilon: DEFAULT_EPSILON,
            cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.value.cols()
    }

    fn standardize_rows(&self, z: &Matrix) -> Result<RowCache> {
        let d = z.cols();
        if d < 2 {
            return Err(Error::Degenerate(format!(
                "layer normalization needs at least 2 features, got {d}"
            )));
        }
        let n = d as f64;
        let mut xhat = z.clone();
        let mut std = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let row = xhat.row_mut(r);
            // A constant row centers to exactly zero.
            let mean = if row.iter().all(|&x| x == row[0]) {
                row[0]
            } else {
                row.iter().sum::<f64>() / n
            };
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let s = (var + self.epsilon).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) / s);
            std.push(s);
        }
        Ok(RowCache { xhat, std })
    }

    pub fn forward_train(&mut self, z: &Matrix) -> Result<Matrix> {
        let cache = self.standardize_rows(z)?;
        let out = affine(
            &cache.xhat,
            self.gamma.value.as_slice(),
            self.beta.value.as_slice(),
        );
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn forward_infer(&self, z: &Matrix) -> Result<Matrix> {
        let cache = self.standardize_rows(z)?;
        Ok(affine(
            &cache.xhat,
            self.gamma.value.as_slice(),
            self.beta.value.as_slice(),
        ))
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("layer norm backward without forward".into()))?;
        let (b, d) = cache.xhat.shape();
        if upstream.shape() != (b, d) {
            return Err(Error::Shape {
                op: "layer_norm_backward",
                left: (b, d),
                right: upstream.shape(),
            });
        }
        self.gamma
            .accumulate(&upstream.hadamard(&cache.xhat)?.sum_rows());
        self.beta.accumulate(&upstream.sum_rows());
        let gamma = self.gamma.value.as_slice();
        let n = d as f64;
        let mut input = Matrix::zeros(b, d);
        for r in 0..b {
            let xr = cache.xhat.row(r);
            let dxhat: Vec<f64> = upstream.row(r).iter().zip(gamma).map(|(u, g)| u * g).collect();
            let sum: f64 = dxhat.iter().sum();
            let sum_x: f64 = dxhat.iter().zip(xr).map(|(a, x)| a * x).sum();
            for (j, out) in input.row_mut(r).iter_mut().enumerate() {
                *out = (n * dxhat[j] - sum - xr[j] * sum_x) / (n * cache.std[r]);
            }
        }
        Ok(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Rng};

    fn column_mean_var(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let n = m.rows() as f64;
        let mut mean = vec![0.0; m.cols()];
        let mut var = vec![0.0; m.cols()];
        for j in 0..m.cols() {
            mean[j] = (0..m.rows()).map(|r| m.get(r, j)).sum::<f64>() / n;
            var[j] = (0..m.rows()).map(|r| (m.get(r, j) - mean[j]).powi(2)).sum::<f64>() / n;
        }
        (mean, var)
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> Matrix {
        let mut rng = Rng::new(seed);
        let mut z = Matrix::normal(b, d, 2.0, &mut rng);
        for r in 0..b {
            for (j, x) in z.row_mut(r).iter_mut().enumerate() {
                *x += j as f64;
            }
        }
        z
    }

    #[test]
    fn bn_train_standardizes_columns() {
        let z = random_batch(1, 64, 3);
        let mut bn = BnState::new(3);
        bn.epsilon = 0.0;
        let out = bn.forward_train(&z).unwrap();
        let (mean, var) = column_mean_var(&out);
        for j in 0..3 {
            assert!(mean[j].abs() < 1e-10, "{mean:?}");
            assert!((var[j] - 1.0).abs() < 1e-10, "{var:?}");
        }
    }

    #[test]
    fn bn_train_applies_affine() {
        let z = random_batch(2, 64, 3);
        let mut bn = BnState::new(3);
        bn.epsilon = 0.0;
        bn.gamma.value.fill(2.0);
        bn.beta.value.fill(3.0);
        let out = bn.forward_train(&z).unwrap();
        let (mean, var) = column_mean_var(&out);
        for j in 0..3 {
            assert!((mean[j] - 3.0).abs() < 1e-6);
            assert!((var[j] - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bn_moving_stats_with_unit_momentum_equal_batch_moments() {
        let z = random_batch(3, 16, 4);
        let (mean, var) = column_mean_var(&z);
        let mut bn = BnState::new(4);
        bn.momentum = 1.0;
        bn.forward_train(&random_batch(30, 16, 4)).unwrap();
        bn.forward_train(&z).unwrap();
        let stats = bn.stats.as_ref().unwrap();
        for j in 0..4 {
            assert_eq!(stats.mean[j], mean[j]);
            assert_eq!(stats.var[j], var[j]);
        }
    }

    #[test]
    fn bn_needs_two_rows_and_trained_stats() {
        let mut bn = BnState::new(2);
        assert!(matches!(
            bn.forward_train(&Matrix::zeros(1, 2)),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            bn.forward_infer(&Matrix::zeros(1, 2)),
            Err(Error::UninitializedStats { domain: None })
        ));
    }

    #[test]
    fn bn_infer_matches_hand_formula_and_is_deterministic() {
        let mut bn = BnState::new(3);
        bn.gamma.value = Matrix::row_vector(&[1.5, -0.5, 2.0]);
        bn.beta.value = Matrix::row_vector(&[0.1, 0.2, 0.3]);
        bn.stats = Some(DomainStats {
            mean: vec![1.0, -2.0, 0.5],
            var: vec![4.0, 0.25, 1.0],
        });
        let z = Matrix::row_vector(&[3.0, -1.0, 0.5]);
        let out = bn.forward_infer(&z).unwrap();
        let eps = DEFAULT_EPSILON;
        let expected = [
            1.5 * (3.0 - 1.0) / (4.0 + eps).sqrt() + 0.1,
            -0.5 * (-1.0 + 2.0) / (0.25 + eps).sqrt() + 0.2,
            2.0 * 0.0 / (1.0 + eps).sqrt() + 0.3,
        ];
        for j in 0..3 {
            assert!((out.get(0, j) - expected[j]).abs() < 1e-12);
        }
        assert!(out.bitwise_eq(&bn.forward_infer(&z).unwrap()));

        let mut centered = BnState::new(3);
        centered.stats = bn.stats.clone();
        let at_mean = centered
            .forward_infer(&Matrix::row_vector(&[1.0, -2.0, 0.5]))
            .unwrap();
        assert!(at_mean.as_slice().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn pn_with_neutral_domain_params_is_bitwise_bn() {
        let z = random_batch(4, 32, 5);
        let mut rng = Rng::new(40);
        let gamma = Matrix::normal(1, 5, 1.0, &mut rng);
        let beta = Matrix::normal(1, 5, 1.0, &mut rng);
        let mut bn = BnState::new(5);
        bn.gamma.value = gamma.clone();
        bn.beta.value = beta.clone();
        let mut pn = PnState::new(5, 3);
        pn.gamma.value = gamma;
        pn.beta.value = beta;
        let a = bn.forward_train(&z).unwrap();
        let b = pn.forward_train(&z, 2).unwrap();
        assert!(a.bitwise_eq(&b));

        let upstream = Matrix::normal(32, 5, 1.0, &mut rng);
        let da = bn.backward(&upstream).unwrap();
        let db = pn.backward(&upstream).unwrap();
        assert!(da.bitwise_eq(&db));
        assert!(bn.gamma.grad.bitwise_eq(&pn.gamma.grad));
    }

    #[test]
    fn single_domain_pn_matches_bn() {
        let mut bn = BnState::new(4);
        let mut pn = PnState::new(4, 1);
        for seed in 0..5 {
            let z = random_batch(100 + seed, 8, 4);
            assert!(bn
                .forward_train(&z)
                .unwrap()
                .bitwise_eq(&pn.forward_train(&z, 1).unwrap()));
        }
        let z = random_batch(7, 3, 4);
        assert!(bn
            .forward_infer(&z)
            .unwrap()
            .bitwise_eq(&pn.forward_infer(&z, 1).unwrap()));
    }

    #[test]
    fn pn_leaves_other_domains_untouched() {
        let mut pn = PnState::new(3, 3);
        pn.forward_train(&random_batch(5, 8, 3), 1).unwrap();
        pn.forward_train(&random_batch(6, 8, 3), 3).unwrap();
        pn.domain_gamma[0].value.fill(1.3);
        let snapshot = (
            pn.domain_gamma[0].clone(),
            pn.domain_beta[0].clone(),
            pn.stats[0].clone(),
            pn.stats[1].clone(),
        );
        pn.forward_train(&random_batch(8, 8, 3), 3).unwrap();
        pn.backward(&Matrix::ones(8, 3)).unwrap();
        assert_eq!(pn.domain_gamma[0], snapshot.0);
        assert_eq!(pn.domain_beta[0], snapshot.1);
        assert_eq!(pn.stats[0], snapshot.2);
        assert_eq!(pn.stats[1], snapshot.3);
        assert!(pn.domain_gamma[2].is_touched());
    }

    #[test]
    fn pn_errors() {
        let mut pn = PnState::new(2, 2);
        assert!(matches!(
            pn.forward_train(&Matrix::zeros(4, 2), 3),
            Err(Error::Domain { domain: 3, .. })
        ));
        assert!(matches!(
            pn.forward_infer(&Matrix::zeros(1, 2), 2),
            Err(Error::UninitializedStats { domain: Some(2) })
        ));
        assert!(matches!(batch_domain(&[1, 1, 2], 2), Err(Error::Contract(_))));
        assert!(matches!(batch_domain(&[0, 0], 2), Err(Error::Domain { .. })));
        assert_eq!(batch_domain(&[2, 2], 2).unwrap(), 2);
    }

    #[test]
    fn pn_infer_centers_at_domain_mean_and_depends_on_domain() {
        let mut pn = PnState::new(2, 2);
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let mut a = Matrix::normal(16, 2, 1.0, &mut rng);
            a.as_mut_slice().iter_mut().for_each(|x| *x += 5.0);
            pn.forward_train(&a, 1).unwrap();
            pn.forward_train(&Matrix::normal(16, 2, 1.0, &mut rng), 2).unwrap();
        }
        let e1 = pn.stats[0].as_ref().unwrap().mean.clone();
        let out = pn.forward_infer(&Matrix::row_vector(&e1), 1).unwrap();
        assert!(out.as_slice().iter().all(|x| x.abs() < 1e-12));
        let z = Matrix::row_vector(&[1.0, 1.0]);
        let d = pn
            .forward_infer(&z, 1)
            .unwrap()
            .max_abs_diff(&pn.forward_infer(&z, 2).unwrap())
            .unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn pn_domains_with_same_distribution_agree_at_inference() {
        let mut pn = PnState::new(3, 2);
        pn.momentum = 0.001;
        let mut r1 = Rng::new(1000);
        let mut r2 = Rng::new(2000);
        for _ in 0..8000 {
            pn.forward_train(&Matrix::normal(10_000, 3, 1.5, &mut r1), 1).unwrap();
            pn.forward_train(&Matrix::normal(10_000, 3, 1.5, &mut r2), 2).unwrap();
        }
        let z = Matrix::row_vector(&[0.3, -0.2, 0.1]);
        let d = pn
            .forward_infer(&z, 1)
            .unwrap()
            .max_abs_diff(&pn.forward_infer(&z, 2).unwrap())
            .unwrap();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn ln_constant_row_yields_beta() {
        let mut ln = LnState::new(4);
        ln.gamma.value = Matrix::row_vector(&[2.0, 3.0, 4.0, 5.0]);
        ln.beta.value = Matrix::row_vector(&[0.5, -0.5, 1.5, 0.25]);
        for c in [0.1, 3.7, -2.0 / 3.0] {
            let out = ln.forward_infer(&Matrix::row_vector(&[c; 4])).unwrap();
            assert_eq!(out.as_slice(), ln.beta.value.as_slice());
        }
    }

    #[test]
    fn ln_rows_are_standardized_and_match_hand_computation() {
        let mut ln = LnState::new(5);
        ln.epsilon = 0.0;
        let z = random_batch(9, 6, 5);
        let out = ln.forward_train(&z).unwrap();
        for r in 0..6 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }

        let ln = LnState::new(3);
        let out = ln.forward_infer(&Matrix::row_vector(&[1.0, 2.0, 3.0])).unwrap();
        let s = (2.0f64 / 3.0 + DEFAULT_EPSILON).sqrt();
        let expected = [-1.0 / s, 0.0, 1.0 / s];
        for j in 0..3 {
            assert!((out.get(0, j) - expected[j]).abs() < 1e-12);
        }
        assert!(matches!(
            ln.forward_infer(&Matrix::zeros(2, 1)),
            Err(Error::Degenerate(_))
        ));
    }

    /// Projects the normalizer output onto a fixed random matrix and checks
    /// gradients with respect to the input and every affine parameter.
    fn check_normalizer<F>(mut forward: F, params: &[Matrix], z: &Matrix, analytic: Vec<f64>, r: &Matrix)
    where
        F: FnMut(&Matrix, &[Matrix]) -> Matrix,
    {
        let mut theta = z.as_slice().to_vec();
        for p in params {
            theta.extend_from_slice(p.as_slice());
        }
        let err = grad_check(
            |t| {
                let zz = Matrix::from_vec(z.rows(), z.cols(), t[..z.len()].to_vec())?;
                let mut off = z.len();
                let ps: Vec<Matrix> = params
                    .iter()
                    .map(|p| {
                        let m = Matrix::from_vec(1, p.cols(), t[off..off + p.cols()].to_vec()).unwrap();
                        off += p.cols();
                        m
                    })
                    .collect();
                Ok(forward(&zz, &ps).hadamard(r)?.as_slice().iter().sum())
            },
            &theta,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn bn_backward_passes_grad_check() {
        let z = random_batch(13, 6, 3);
        let mut rng = Rng::new(14);
        let r = Matrix::normal(6, 3, 1.0, &mut rng);
        let mut bn = BnState::new(3);
        bn.gamma.value = Matrix::normal(1, 3, 1.0, &mut rng);
        bn.beta.value = Matrix::normal(1, 3, 1.0, &mut rng);
        bn.forward_train(&z).unwrap();
        let dz = bn.backward(&r).unwrap();
        let mut analytic = dz.as_slice().to_vec();
        analytic.extend_from_slice(bn.gamma.grad.as_slice());
        analytic.extend_from_slice(bn.beta.grad.as_slice());
        let params = [bn.gamma.value.clone(), bn.beta.value.clone()];
        check_normalizer(
            |z, p| {
                let mut s = BnState::new(3);
                s.gamma.value = p[0].clone();
                s.beta.value = p[1].clone();
                s.forward_train(z).unwrap()
            },
            &params,
            &z,
            analytic,
            &r,
        );
    }

    #[test]
    fn pn_backward_passes_grad_check() {
        let z = random_batch(15, 5, 4);
        let mut rng = Rng::new(16);
        let r = Matrix::normal(5, 4, 1.0, &mut rng);
        let mut pn = PnState::new(4, 2);
        pn.gamma.value = Matrix::normal(1, 4, 1.0, &mut rng);
        pn.beta.value = Matrix::normal(1, 4, 1.0, &mut rng);
        pn.domain_gamma[1].value = Matrix::normal(1, 4, 1.0, &mut rng);
        pn.domain_beta[1].value = Matrix::normal(1, 4, 1.0, &mut rng);
        pn.forward_train(&z, 2).unwrap();
        let dz = pn.backward(&r).unwrap();
        let mut analytic = dz.as_slice().to_vec();
        for p in [&pn.gamma, &pn.beta, &pn.domain_gamma[1], &pn.domain_beta[1]] {
            analytic.extend_from_slice(p.grad.as_slice());
        }
        assert!(!pn.domain_gamma[0].is_touched());
        let params = [
            pn.gamma.value.clone(),
            pn.beta.value.clone(),
            pn.domain_gamma[1].value.clone(),
            pn.domain_beta[1].value.clone(),
        ];
        check_normalizer(
            |z, p| {
                let mut s = PnState::new(4, 2);
                s.gamma.value = p[0].clone();
                s.beta.value = p[1].clone();
                s.domain_gamma[1].value = p[2].clone();
                s.domain_beta[1].value = p[3].clone();
                s.forward_train(z, 2).unwrap()
            },
            &params,
            &z,
            analytic,
            &r,
        );
    }

    #[test]
    fn ln_backward_passes_grad_check() {
        let z = random_batch(17, 4, 5);
        let mut rng = Rng::new(18);
        let r = Matrix::normal(4, 5, 1.0, &mut rng);
        let mut ln = LnState::new(5);
        ln.gamma.value = Matrix::normal(1, 5, 1.0, &mut rng);
        ln.beta.value = Matrix::normal(1, 5, 1.0, &mut rng);
        ln.forward_train(&z).unwrap();
        let dz = ln.backward(&r).unwrap();
        let mut analytic = dz.as_slice().to_vec();
        analytic.extend_from_slice(ln.gamma.grad.as_slice());
        analytic.extend_from_slice(ln.beta.grad.as_slice());
        let params = [ln.gamma.value.clone(), ln.beta.value.clone()];
        check_normalizer(
            |z, p| {
                let mut s = LnState::new(5);
                s.gamma.value = p[0].clone();
                s.beta.value = p[1].clone();
                s.forward_train(z).unwrap()
            },
            &params,
            &z,
            analytic,
            &r,
        );
    }
}
