//! Experiment plumbing shared by the command-line tool and the examples:
//! flat `key=value` configuration, training, evaluation and ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use sha2::{Digest, Sha256};

use crate::data::{generate, stream_batches, Example, GeneratorConfig, GroundTruth, ShuffleBuffer};
use crate::error::{Error, Result};
use crate::eval::{MetricReport, Prediction};
use crate::model::{CtrModel, ModelConfig, ModelKind, NormKind};
use crate::optim::{AdamConfig, AdamState};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub norm: NormKind,
    pub aux: bool,
    pub layers: Vec<usize>,
    pub embed_dim: usize,
    pub aux_embed_dim: usize,
    pub aux_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffle buffer capacity; 0 means 50 batches.
    pub buffer_capacity: usize,
    pub seed: u64,
    pub train_examples: usize,
    pub test_examples: usize,
    pub log_every: usize,
    pub generator: GeneratorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Star,
            norm: NormKind::Partitioned,
            aux: true,
            layers: vec![64, 32, 1],
            embed_dim: 8,
            aux_embed_dim: 4,
            aux_hidden: 8,
            lr: 1e-3,
            batch_size: 128,
            epochs: 3,
            buffer_capacity: 0,
            seed: 0,
            train_examples: 200_000,
            test_examples: 50_000,
            log_every: 100,
            generator: GeneratorConfig::default(),
        }
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, found `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_list(value: &str) -> Option<Vec<usize>> {
    value.split(',').map(|s| s.trim().parse().ok()).collect()
}

impl ExperimentConfig {
    /// Applies settings in order. Every unknown key is collected and
    /// reported in one error.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            match self.set(k, v) {
                Ok(()) => {}
                Err(Error::Config(msg)) if msg.starts_with("unknown") => unknown.push(k.clone()),
                Err(e) => return Err(e),
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// Defaults overridden by `key=value` strings, e.g. command-line
    /// arguments.
    pub fn from_overrides<I, S>(args: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let pairs = args
            .into_iter()
            .map(|a| {
                let a = a.as_ref();
                a.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("expected key=value, got `{a}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut config = Self::default();
        config.apply(&pairs)?;
        config.validate()?;
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "model" => self.model = value.parse()?,
            "norm" => self.norm = value.parse()?,
            "aux" => {
                self.aux = match value {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    _ => return Err(bad()),
                }
            }
            "layers" => self.layers = parse_list(value).ok_or_else(bad)?,
            "embed_dim" => self.embed_dim = int()?,
            "aux_embed_dim" => self.aux_embed_dim = int()?,
            "aux_hidden" => self.aux_hidden = int()?,
            "lr" => self.lr = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = int()?,
            "epochs" => self.epochs = int()?,
            "buffer_capacity" => self.buffer_capacity = int()?,
            "train_examples" => self.train_examples = int()?,
            "test_examples" => self.test_examples = int()?,
            "log_every" => self.log_every = int()?,
            "seed" => {
                self.seed = value.parse().map_err(|_| bad())?;
                self.generator.seed = self.seed;
            }
            _ => self.generator.set(key, value)?,
        }
        Ok(())
    }

    pub fn buffer_capacity(&self) -> usize {
        if self.buffer_capacity == 0 {
            50 * self.batch_size
        } else {
            self.buffer_capacity
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            norm: self.norm,
            num_domains: self.generator.num_domains(),
            vocab: self.generator.vocab(),
            embed_dim: self.embed_dim,
            layers: self.layers.clone(),
            aux: self.aux,
            aux_embed_dim: self.aux_embed_dim,
            aux_hidden: self.aux_hidden,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.generator.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.batch_size > self.buffer_capacity() {
            return Err(Error::Config("batch_size exceeds buffer_capacity".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    /// Canonical `key=value` text; every setting appears exactly once.
    pub fn to_key_values(&self) -> String {
        let g = &self.generator;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("model", self.model.to_string());
        kv("norm", self.norm.to_string());
        kv("aux", self.aux.to_string());
        kv("layers", list(&self.layers));
        kv("embed_dim", self.embed_dim.to_string());
        kv("aux_embed_dim", self.aux_embed_dim.to_string());
        kv("aux_hidden", self.aux_hidden.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("seed", self.seed.to_string());
        kv("train_examples", self.train_examples.to_string());
        kv("test_examples", self.test_examples.to_string());
        kv("log_every", self.log_every.to_string());
        kv("num_users", g.num_users.to_string());
        kv("num_items", g.num_items.to_string());
        kv("num_contexts", g.num_contexts.to_string());
        kv("latent_dim", g.latent_dim.to_string());
        kv("max_behavior", g.max_behavior.to_string());
        kv("interest_pool", g.interest_pool.to_string());
        kv("signal_scale", format!("{:e}", g.signal_scale));
        kv("calibration_samples", g.calibration_samples.to_string());
        kv("num_domains", g.num_domains().to_string());
        for (i, p) in g.profiles.iter().enumerate() {
            let d = i + 1;
            kv(&format!("domain.{d}.share"), format!("{:e}", p.traffic_share));
            kv(&format!("domain.{d}.ctr"), format!("{:e}", p.base_ctr));
            kv(&format!("domain.{d}.alpha"), format!("{:e}", p.specificity));
            let shift: Vec<String> = p.feature_shift.iter().map(|x| format!("{x:e}")).collect();
            kv(&format!("domain.{d}.shift"), shift.join(","));
        }
        s
    }

    /// SHA-256 of the canonical settings.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_key_values().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Generator settings for the full train + test draw.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_examples: self.train_examples + self.test_examples,
            seed: self.seed,
            ..self.generator.clone()
        }
    }
}

/// A generated dataset split by arrival: the first part trains, the rest
/// tests.
pub struct Split {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub truth: GroundTruth,
}

pub fn generate_split(config: &ExperimentConfig) -> Result<Split> {
    let (mut all, truth) = generate(&config.generator_config())?;
    let test = all.split_off(config.train_examples.min(all.len()));
    Ok(Split { train: all, test, truth })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    pub skipped_batches: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, mean loss over the preceding log_every steps)`.
    pub losses: Vec<(u64, f64)>,
    pub epochs: Vec<EpochStats>,
}

/// Trains a fresh model; `log` receives `step\tloss` lines.
pub fn train(config: &ExperimentConfig, data: &[Example], mut log: impl Write) -> Result<(CtrModel, TrainLog)> {
    config.validate()?;
    let mut model = CtrModel::new(config.model_config())?;
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut out = TrainLog::default();
    let (mut window_loss, mut window_steps) = (0.0, 0);
    for epoch in 0..config.epochs {
        let buffer = ShuffleBuffer::new(
            config.buffer_capacity(),
            config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64),
        )?;
        let mut stats = EpochStats {
            epoch: epoch + 1,
            ..EpochStats::default()
        };
        let mut epoch_loss = 0.0;
        for batch in stream_batches(data.iter().cloned(), buffer, config.batch_size)? {
            if batch.len() < 2 {
                stats.skipped_batches += 1;
                continue;
            }
            let loss = model.train_step(&mut adam, &batch.examples)?;
            stats.batches += 1;
            epoch_loss += loss;
            window_loss += loss;
            window_steps += 1;
            if window_steps == config.log_every {
                let step = adam.step_count();
                let mean = window_loss / window_steps as f64;
                writeln!(log, "{step}\t{mean:.10e}")?;
                out.losses.push((step, mean));
                (window_loss, window_steps) = (0.0, 0);
            }
        }
        stats.mean_loss = if stats.batches > 0 {
            epoch_loss / stats.batches as f64
        } else {
            f64::NAN
        };
        out.epochs.push(stats);
    }
    log.flush()?;
    Ok((model, out))
}

pub fn predictions(model: &CtrModel, data: &[Example]) -> Result<Vec<Prediction>> {
    let yhat = model.predict_examples(data)?;
    Ok(data
        .iter()
        .zip(yhat)
        .map(|(ex, yhat)| Prediction {
            user: ex.user,
            domain: ex.domain,
            yhat,
            clicked: ex.clicked,
        })
        .collect())
}

pub fn evaluate(model: &CtrModel, data: &[Example]) -> Result<MetricReport> {
    MetricReport::compute(&predictions(model, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: ModelKind,
    pub norm: NormKind,
    pub aux: bool,
    pub overall_auc: f64,
    pub weighted_auc: f64,
    pub pcoc_std: f64,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let name = match self.model {
            ModelKind::Star => "STAR",
            ModelKind::Base => "Base",
            ModelKind::SharedBottom => "SharedBottom",
        };
        format!("{name}({})", self.norm.name().to_uppercase())
    }
}

/// The model and normalizer pairs of the ablation table.
pub const ABLATION_VARIANTS: [(ModelKind, NormKind); 5] = [
    (ModelKind::Base, NormKind::Batch),
    (ModelKind::Base, NormKind::Partitioned),
    (ModelKind::Star, NormKind::Batch),
    (ModelKind::Star, NormKind::Layer),
    (ModelKind::Star, NormKind::Partitioned),
];

/// Trains and evaluates one configuration variant.
pub fn run_variant(
    base: &ExperimentConfig,
    model: ModelKind,
    norm: NormKind,
    aux: bool,
    train_data: &[Example],
    test_data: &[Example],
) -> Result<AblationRow> {
    let config = ExperimentConfig {
        model,
        norm,
        aux,
        ..base.clone()
    };
    let (trained, _) = train(&config, train_data, std::io::sink())?;
    let report = evaluate(&trained, test_data)?;
    Ok(AblationRow {
        model,
        norm,
        aux,
        overall_auc: report.overall_auc,
        weighted_auc: report.weighted_auc.value,
        pcoc_std: report.pcoc_std,
    })
}

/// Every ablation variant with the auxiliary network on and off.
pub fn ablation(config: &ExperimentConfig, train_data: &[Example], test_data: &[Example]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(2 * ABLATION_VARIANTS.len());
    for (model, norm) in ABLATION_VARIANTS {
        for aux in [true, false] {
            rows.push(run_variant(config, model, norm, aux, train_data, test_data)?);
        }
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\taux\toverall_auc\tweighted_auc\tpcoc_std\n");
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            r.label(),
            if r.aux { "on" } else { "off" },
            r.overall_auc,
            r.weighted_auc,
            r.pcoc_std
        )
        .unwrap();
    }
    s
}

/// Manifest written next to every command's outputs.
pub fn manifest(command: &str, config: &ExperimentConfig, extra: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    writeln!(s, "command={command}").unwrap();
    writeln!(s, "config_hash={}", config.hash()).unwrap();
    writeln!(s, "seed={}", config.seed).unwrap();
    writeln!(s, "crate_version={}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, "checkpoint_version={}", crate::model::checkpoint::VERSION).unwrap();
    writeln!(s, "folded_version={}", crate::serve::FOLDED_VERSION).unwrap();
    for (k, v) in extra {
        writeln!(s, "{k}={v}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.apply(&[
            ("num_users".into(), "30".into()),
            ("num_items".into(), "60".into()),
            ("num_contexts".into(), "4".into()),
            ("calibration_samples".into(), "2000".into()),
            ("train_examples".into(), "3000".into()),
            ("test_examples".into(), "1500".into()),
            ("batch_size".into(), "32".into()),
            ("epochs".into(), "1".into()),
            ("layers".into(), "8,1".into()),
            ("log_every".into(), "10".into()),
        ])
        .unwrap();
        c
    }

    #[test]
    fn key_values_round_trip() {
        let c = tiny();
        let mut back = ExperimentConfig::default();
        back.apply(&parse_key_values(&c.to_key_values()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_listed() {
        let mut c = ExperimentConfig::default();
        let err = c
            .apply(&parse_key_values("colour=red\nlr=0.1\nshape=round # note\n").unwrap())
            .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("colour") && msg.contains("shape"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_key_values("novalue"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(c.set("model", "mmoe"), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let c = tiny();
        let split = generate_split(&c).unwrap();
        let mut log_a = Vec::new();
        let (a, stats) = train(&c, &split.train, &mut log_a).unwrap();
        let mut log_b = Vec::new();
        let (b, _) = train(&c, &split.train, &mut log_b).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(
            crate::model::checkpoint::to_bytes(&a),
            crate::model::checkpoint::to_bytes(&b)
        );
        let text = String::from_utf8(log_a).unwrap();
        let first = text.lines().next().unwrap();
        let (step, loss) = first.split_once('\t').unwrap();
        assert_eq!(step, "10");
        assert!(loss.parse::<f64>().unwrap() > 0.0);
        assert_eq!(stats.epochs.len(), 1);
        let report = evaluate(&a, &split.test).unwrap();
        assert_eq!(report, evaluate(&b, &split.test).unwrap());
    }
}
