//! Folded inference and batch file scoring.
//!
//! Folding precomputes, for every domain, the effective FCN weights and the
//! frozen normalization affine `scale_p = γγ_p / √(Var_p + ε)`,
//! `shift_p = β + β_p − scale_p E_p`. The auxiliary network's domain
//! embedding is folded into a per-domain hidden bias. Scoring then costs the
//! same whatever the number of domains.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{parse_line, Example};
use crate::error::{Error, Result};
use crate::layers::{fc_forward, Activation, EmbeddingTable, FeatureTables};
use crate::model::{CtrModel, Normalizer};
use crate::optim::sigmoid;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldedLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FoldedNorm {
    /// Per-feature affine, one `(scale, shift)` pair per domain.
    Affine { scale: Vec<Vec<f64>>, shift: Vec<Vec<f64>> },
    /// Layer norm depends on the row itself and stays as is.
    Layer { gamma: Vec<f64>, beta: Vec<f64>, epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldedAux {
    /// Rows of the hidden weight that read the pooled features.
    pub feature_weight: Matrix,
    /// Hidden bias plus the domain embedding's contribution, per domain.
    pub domain_bias: Vec<Matrix>,
    pub output_weight: Matrix,
    pub output_bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct FoldedModel {
    pub tables: FeatureTables,
    pub norm: FoldedNorm,
    /// Effective layers per domain.
    pub layers: Vec<Vec<FoldedLayer>>,
    pub aux: Option<FoldedAux>,
}

#[derive(Serialize, Deserialize)]
struct FoldedFile {
    format: String,
    version: u32,
    tables: Vec<Matrix>,
    norm: FoldedNorm,
    layers: Vec<Vec<FoldedLayer>>,
    aux: Option<FoldedAux>,
}

const FOLDED_FORMAT: &str = "star-folded";
pub const FOLDED_VERSION: u32 = 1;

fn fold_error(e: Error, domain: Option<usize>) -> Error {
    match (e, domain) {
        (Error::UninitializedStats { .. }, Some(p)) => {
            Error::Fold(format!("domain {p} has no normalization statistics"))
        }
        (Error::UninitializedStats { .. }, None) => {
            Error::Fold("batch normalization has no moving statistics".into())
        }
        (e, _) => e,
    }
}

/// Precomputes the per-domain serving parameters of a trained model.
pub fn fold(model: &CtrModel) -> Result<FoldedModel> {
    let m = model.num_domains();
    let norm = match &model.norm {
        Normalizer::Batch(bn) => {
            let (scale, shift) = bn.folded_affine().map_err(|e| fold_error(e, None))?;
            FoldedNorm::Affine {
                scale: vec![scale; m],
                shift: vec![shift; m],
            }
        }
        Normalizer::Partitioned(pn) => {
            let (mut scale, mut shift) = (Vec::with_capacity(m), Vec::with_capacity(m));
            for p in 1..=m {
                let (s, t) = pn.folded_affine(p).map_err(|e| fold_error(e, Some(p)))?;
                scale.push(s);
                shift.push(t);
            }
            FoldedNorm::Affine { scale, shift }
        }
        Normalizer::Layer(ln) => FoldedNorm::Layer {
            gamma: ln.gamma.value.as_slice().to_vec(),
            beta: ln.beta.value.as_slice().to_vec(),
            epsilon: ln.epsilon,
        },
    };
    let layers = (1..=m)
        .map(|p| {
            let eff = model.tower.effective_layers(p)?;
            let n = eff.len();
            Ok(eff
                .into_iter()
                .enumerate()
                .map(|(l, (weight, bias))| FoldedLayer {
                    weight,
                    bias,
                    relu: l + 1 < n,
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<FoldedLayer>>>>()?;
    let aux = match (&model.aux, model.aux_enabled) {
        (Some(aux), true) => {
            let d = aux.domain_embedding.dim();
            let w = &aux.hidden.weight.value;
            let embed_weight = w.row_slice(0, d);
            let feature_weight = w.row_slice(d, w.rows() - d);
            let domain_bias = (0..m)
                .map(|p| {
                    Matrix::row_vector(aux.domain_embedding.row(p))
                        .matmul(&embed_weight)?
                        .add(&aux.hidden.bias.value)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(FoldedAux {
                feature_weight,
                domain_bias,
                output_weight: aux.output.weight.value.clone(),
                output_bias: aux.output.bias.value.clone(),
            })
        }
        _ => None,
    };
    Ok(FoldedModel {
        tables: model.tables.clone(),
        norm,
        layers,
        aux,
    })
}

impl FoldedModel {
    pub fn num_domains(&self) -> usize {
        self.layers.len()
    }

    fn normalize(&self, pooled: &Matrix, p: usize) -> Matrix {
        let mut out = pooled.clone();
        match &self.norm {
            FoldedNorm::Affine { scale, shift } => {
                for r in 0..out.rows() {
                    for ((x, s), t) in out.row_mut(r).iter_mut().zip(&scale[p - 1]).zip(&shift[p - 1]) {
                        *x = *x * s + t;
                    }
                }
            }
            FoldedNorm::Layer { gamma, beta, epsilon } => {
                let n = out.cols() as f64;
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let mean = if row.iter().all(|&x| x == row[0]) {
                        row[0]
                    } else {
                        row.iter().sum::<f64>() / n
                    };
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    let std = (var + epsilon).sqrt();
                    for ((x, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                        *x = (*x - mean) / std * g + b;
                    }
                }
            }
        }
        out
    }

    /// Logits for a single-domain batch.
    pub fn logits(&self, batch: &[Example]) -> Result<Vec<f64>> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        let p = first.domain;
        if p == 0 || p > self.num_domains() {
            return Err(Error::Domain {
                domain: p,
                num_domains: self.num_domains(),
            });
        }
        if batch.iter().any(|e| e.domain != p) {
            return Err(Error::Contract("folded scoring expects a single-domain batch".into()));
        }
        let pooled = self.tables.pool_batch(batch)?;
        let mut h = self.normalize(&pooled, p);
        for layer in &self.layers[p - 1] {
            let act = if layer.relu { Activation::Relu } else { Activation::Identity };
            h = fc_forward(&layer.weight, &layer.bias, act, &h)?.0;
        }
        let mut logits = h.into_vec();
        if let Some(aux) = &self.aux {
            let hidden = fc_forward(&aux.feature_weight, &aux.domain_bias[p - 1], Activation::Relu, &pooled)?.0;
            let s_a = fc_forward(&aux.output_weight, &aux.output_bias, Activation::Identity, &hidden)?.0;
            for (l, a) in logits.iter_mut().zip(s_a.as_slice()) {
                *l += a;
            }
        }
        Ok(logits)
    }

    pub fn predict(&self, batch: &[Example]) -> Result<Vec<f64>> {
        Ok(self.logits(batch)?.into_iter().map(sigmoid).collect())
    }

    /// Predictions for examples of any mix of domains, in input order.
    pub fn predict_examples(&self, examples: &[Example]) -> Result<Vec<f64>> {
        crate::model::predict_grouped(examples, self.num_domains(), |b| self.predict(b))
    }

    pub fn to_json(&self) -> String {
        let file = FoldedFile {
            format: FOLDED_FORMAT.into(),
            version: FOLDED_VERSION,
            tables: self.tables.tables.iter().map(|t| t.weights.clone()).collect(),
            norm: self.norm.clone(),
            layers: self.layers.clone(),
            aux: self.aux.clone(),
        };
        serde_json::to_string(&file).expect("folded model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FoldedFile =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("bad folded model: {e}")))?;
        if file.format != FOLDED_FORMAT {
            return Err(Error::Data(format!("not a folded model: `{}`", file.format)));
        }
        if file.version != FOLDED_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: FOLDED_VERSION,
            });
        }
        let tables: [EmbeddingTable; 4] = file
            .tables
            .into_iter()
            .map(EmbeddingTable::from_weights)
            .collect::<Vec<_>>()
            .try_into()
            .map_err(|_| Error::Data("folded model needs exactly 4 embedding tables".into()))?;
        Ok(Self {
            tables: FeatureTables { tables },
            norm: file.norm,
            layers: file.layers,
            aux: file.aux,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Outcome of scoring a dataset file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSummary {
    pub scored: usize,
    /// `(line number, message)` for every line that could not be scored.
    pub rejected: Vec<(usize, String)>,
}

/// Formats one predictions-file row: `user\tp\tyhat\ty`.
pub fn format_prediction(ex: &Example, yhat: f64) -> String {
    format!("{}\t{}\t{:.16e}\t{}", ex.user, ex.domain, yhat, u8::from(ex.clicked))
}

/// Scores every line of `input`, writing rows in input order. Lines whose
/// domain or ids the model does not know are skipped and reported.
pub fn score_reader(folded: &FoldedModel, input: impl BufRead, mut output: impl Write) -> Result<ScoreSummary> {
    let mut summary = ScoreSummary::default();
    let mut accepted = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let ex = parse_line(&line?, i + 1)?;
        if ex.domain > folded.num_domains() {
            summary.rejected.push((
                i + 1,
                format!("unknown domain {} (model has {})", ex.domain, folded.num_domains()),
            ));
            continue;
        }
        if let Err(e) = folded.tables.validate(&ex) {
            summary.rejected.push((i + 1, e.to_string()));
            continue;
        }
        accepted.push(ex);
    }
    let yhat = folded.predict_examples(&accepted)?;
    for (ex, y) in accepted.iter().zip(&yhat) {
        writeln!(output, "{}", format_prediction(ex, *y))?;
    }
    output.flush()?;
    summary.scored = accepted.len();
    Ok(summary)
}

pub fn score_file(folded: &FoldedModel, input: impl AsRef<Path>, output: impl AsRef<Path>) -> Result<ScoreSummary> {
    score_reader(
        folded,
        BufReader::new(File::open(input)?),
        BufWriter::new(File::create(output)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind, NormKind};
    use crate::optim::{AdamConfig, AdamState};
    use crate::tensor::Rng;

    fn examples(domain: usize, n: usize, rng: &mut Rng) -> Vec<Example> {
        (0..n)
            .map(|_| Example {
                domain,
                clicked: rng.bernoulli(0.3),
                behavior: (0..rng.below(4)).map(|_| rng.below(12)).collect(),
                user: rng.below(8),
                item: rng.below(12),
                context: rng.below(3),
            })
            .collect()
    }

    fn trained(kind: ModelKind, norm: NormKind, domains: &[usize]) -> CtrModel {
        let cfg = ModelConfig {
            kind,
            norm,
            num_domains: 3,
            vocab: [12, 8, 12, 3],
            embed_dim: 3,
            layers: vec![6, 4, 1],
            aux: true,
            aux_embed_dim: 2,
            aux_hidden: 4,
            seed: 1,
        };
        let mut model = CtrModel::new(cfg).unwrap();
        let mut adam = AdamState::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            for &p in domains {
                model.train_step(&mut adam, &examples(p, 16, &mut rng)).unwrap();
            }
        }
        model
    }

    #[test]
    fn folded_matches_unfolded() {
        for kind in [ModelKind::Star, ModelKind::Base, ModelKind::SharedBottom] {
            for norm in [NormKind::Batch, NormKind::Layer, NormKind::Partitioned] {
                let model = trained(kind, norm, &[1, 2, 3]);
                let folded = fold(&model).unwrap();
                let mut rng = Rng::new(9);
                for p in 1..=3 {
                    let batch = examples(p, 200, &mut rng);
                    let a = model.predict(&batch).unwrap();
                    let b = folded.predict(&batch).unwrap();
                    for (x, y) in a.iter().zip(&b) {
                        assert!((x - y).abs() <= 1e-12, "{kind} {norm} domain {p}: {x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn identity_factors_fold_to_shared_weights() {
        let model = CtrModel::new(ModelConfig::default()).unwrap();
        let crate::model::Tower::Star(star) = &model.tower else { unreachable!() };
        for p in 1..=model.num_domains() {
            for ((w, b), shared) in model.tower.effective_layers(p).unwrap().iter().zip(&star.shared) {
                assert!(w.bitwise_eq(&shared.weight.value) && b.bitwise_eq(&shared.bias.value));
            }
        }
    }

    #[test]
    fn missing_domain_stats_name_the_domain() {
        let model = trained(ModelKind::Star, NormKind::Partitioned, &[1, 3]);
        match fold(&model) {
            Err(Error::Fold(msg)) => assert!(msg.contains("domain 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let fresh = CtrModel::new(ModelConfig { norm: NormKind::Batch, ..ModelConfig::default() }).unwrap();
        assert!(matches!(fold(&fresh), Err(Error::Fold(_))));
    }

    #[test]
    fn json_round_trip_scores_identically() {
        let model = trained(ModelKind::Star, NormKind::Partitioned, &[1, 2, 3]);
        let folded = fold(&model).unwrap();
        let back = FoldedModel::from_json(&folded.to_json()).unwrap();
        let batch = examples(2, 50, &mut Rng::new(4));
        assert_eq!(folded.predict(&batch).unwrap(), back.predict(&batch).unwrap());
        assert_eq!(fold(&model).unwrap().to_json(), folded.to_json());
    }

    #[test]
    fn scoring_preserves_order_and_reports_unknown_domains() {
        let model = trained(ModelKind::Star, NormKind::Partitioned, &[1, 2, 3]);
        let folded = fold(&model).unwrap();
        let mut rng = Rng::new(6);
        let mut data: Vec<Example> = (0..60).map(|i| examples(1 + i % 3, 1, &mut rng).remove(0)).collect();
        data[10].domain = 7;
        let mut input = Vec::new();
        crate::data::write_dataset_to(&mut input, &data).unwrap();
        let mut out = Vec::new();
        let summary = score_reader(&folded, input.as_slice(), &mut out).unwrap();
        assert_eq!(summary.scored, 59);
        assert_eq!(summary.rejected.len(), 1);
        assert_eq!(summary.rejected[0].0, 11);
        let text = String::from_utf8(out).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        let kept: Vec<&Example> = data.iter().filter(|e| e.domain != 7).collect();
        for (row, ex) in rows.iter().zip(&kept) {
            let fields: Vec<&str> = row.split('\t').collect();
            assert_eq!(fields[0], ex.user.to_string());
            assert_eq!(fields[1], ex.domain.to_string());
            let y: f64 = fields[2].parse().unwrap();
            assert_eq!(y, folded.predict(std::slice::from_ref(*ex)).unwrap()[0]);
        }

        let mut empty = Vec::new();
        assert_eq!(score_reader(&folded, &b""[..], &mut empty).unwrap().scored, 0);
        assert!(empty.is_empty());
    }
}
