//! Versioned little-endian binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header
//!   magic            4 bytes  "STAR"
//!   version          u32
//!   num_domains      u32
//!   kind             u8       0 star, 1 base, 2 shared_bottom
//!   norm             u8       0 bn, 1 ln, 2 pn
//!   aux              u8       1 if an auxiliary network is present
//!   aux_enabled      u8
//!   embed_dim        u32
//!   vocab            4 x u64  behavior, profile, item, context
//!   num_layers       u32
//!   layer widths     num_layers x u32
//!   aux_embed_dim    u32
//!   aux_hidden       u32
//!   seed             u64
//!   num_sections     u32
//! sections, each
//!   name length      u32, then the UTF-8 name
//!   payload length   u64, then the payload
//! ```
//!
//! Sections appear in this order:
//!
//! 1. `fcn.shared.{l}.weight`, `fcn.shared.{l}.bias` for every shared layer
//!    (star and base),
//! 2. `fcn.domain.{p}.{l}.weight`, `fcn.domain.{p}.{l}.bias` in domain order
//!    (star factors, or the per-domain stacks of shared bottom),
//! 3. `norm.gamma`, `norm.beta`, `norm.config` (momentum, epsilon), then for
//!    PN `norm.domain.{p}.gamma`, `norm.domain.{p}.beta`,
//!    `norm.domain.{p}.moments`; for BN a single `norm.moments`,
//! 4. `embedding.{field}` for behavior, profile, item and context,
//! 5. `aux.domain_embedding`, `aux.hidden.weight`, `aux.hidden.bias`,
//!    `aux.output.weight`, `aux.output.bias`.
//!
//! A tensor payload is `rows u64, cols u64, rows*cols f64`. A moments payload
//! is a flag byte (0 = never populated) followed, when set, by the mean and
//! variance tensors. Domain indices in names are 1-based.

use std::fs;
use std::path::Path;

use super::{CtrModel, ModelConfig, ModelKind, NormKind, Normalizer, Tower};
use crate::error::{Error, Result};
use crate::layers::{DomainStats, FIELD_NAMES};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"STAR";
pub const VERSION: u32 = 1;

/// One named block of a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub payload: Vec<u8>,
}

fn put_tensor(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn tensor(name: String, m: &Matrix) -> Section {
    let mut payload = Vec::with_capacity(16 + 8 * m.len());
    put_tensor(&mut payload, m);
    Section { name, payload }
}

fn moments(name: String, stats: Option<&DomainStats>) -> Section {
    let mut payload = Vec::new();
    match stats {
        None => payload.push(0),
        Some(s) => {
            payload.push(1);
            put_tensor(&mut payload, &Matrix::row_vector(&s.mean));
            put_tensor(&mut payload, &Matrix::row_vector(&s.var));
        }
    }
    Section { name, payload }
}

fn scalars(name: String, values: &[f64]) -> Section {
    let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    Section { name, payload }
}

/// Every section of `model`, in file order.
pub fn sections(model: &CtrModel) -> Vec<Section> {
    let mut out = Vec::new();
    match &model.tower {
        Tower::Star(s) => {
            for (l, layer) in s.shared.iter().enumerate() {
                out.push(tensor(format!("fcn.shared.{l}.weight"), &layer.weight.value));
                out.push(tensor(format!("fcn.shared.{l}.bias"), &layer.bias.value));
            }
            for (p, stack) in s.domains.iter().enumerate() {
                for (l, d) in stack.iter().enumerate() {
                    out.push(tensor(format!("fcn.domain.{}.{l}.weight", p + 1), &d.weight.value));
                    out.push(tensor(format!("fcn.domain.{}.{l}.bias", p + 1), &d.bias.value));
                }
            }
        }
        Tower::Shared(stack) => {
            for (l, layer) in stack.layers.iter().enumerate() {
                out.push(tensor(format!("fcn.shared.{l}.weight"), &layer.weight.value));
                out.push(tensor(format!("fcn.shared.{l}.bias"), &layer.bias.value));
            }
        }
        Tower::PerDomain(stacks) => {
            for (p, stack) in stacks.iter().enumerate() {
                for (l, layer) in stack.layers.iter().enumerate() {
                    out.push(tensor(format!("fcn.domain.{}.{l}.weight", p + 1), &layer.weight.value));
                    out.push(tensor(format!("fcn.domain.{}.{l}.bias", p + 1), &layer.bias.value));
                }
            }
        }
    }
    match &model.norm {
        Normalizer::Batch(bn) => {
            out.push(tensor("norm.gamma".into(), &bn.gamma.value));
            out.push(tensor("norm.beta".into(), &bn.beta.value));
            out.push(scalars("norm.config".into(), &[bn.momentum, bn.epsilon]));
            out.push(moments("norm.moments".into(), bn.stats.as_ref()));
        }
        Normalizer::Layer(ln) => {
            out.push(tensor("norm.gamma".into(), &ln.gamma.value));
            out.push(tensor("norm.beta".into(), &ln.beta.value));
            out.push(scalars("norm.config".into(), &[0.0, ln.epsilon]));
        }
        Normalizer::Partitioned(pn) => {
            out.push(tensor("norm.gamma".into(), &pn.gamma.value));
            out.push(tensor("norm.beta".into(), &pn.beta.value));
            out.push(scalars("norm.config".into(), &[pn.momentum, pn.epsilon]));
            for p in 0..pn.num_domains() {
                out.push(tensor(format!("norm.domain.{}.gamma", p + 1), &pn.domain_gamma[p].value));
                out.push(tensor(format!("norm.domain.{}.beta", p + 1), &pn.domain_beta[p].value));
                out.push(moments(format!("norm.domain.{}.moments", p + 1), pn.stats[p].as_ref()));
            }
        }
    }
    for (name, table) in FIELD_NAMES.iter().zip(&model.tables.tables) {
        out.push(tensor(format!("embedding.{name}"), &table.weights));
    }
    if let Some(aux) = &model.aux {
        out.push(tensor("aux.domain_embedding".into(), &aux.domain_embedding.weights));
        out.push(tensor("aux.hidden.weight".into(), &aux.hidden.weight.value));
        out.push(tensor("aux.hidden.bias".into(), &aux.hidden.bias.value));
        out.push(tensor("aux.output.weight".into(), &aux.output.weight.value));
        out.push(tensor("aux.output.bias".into(), &aux.output.bias.value));
    }
    out
}

/// Names of sections whose bytes differ between two models of one
/// architecture.
pub fn changed_sections(before: &CtrModel, after: &CtrModel) -> Vec<String> {
    sections(before)
        .into_iter()
        .zip(sections(after))
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.name)
        .collect()
}

fn kind_code(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Star => 0,
        ModelKind::Base => 1,
        ModelKind::SharedBottom => 2,
    }
}

fn norm_code(norm: NormKind) -> u8 {
    match norm {
        NormKind::Batch => 0,
        NormKind::Layer => 1,
        NormKind::Partitioned => 2,
    }
}

/// Serializes `model` to bytes.
pub fn to_bytes(model: &CtrModel) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.num_domains as u32).to_le_bytes());
    out.push(kind_code(c.kind));
    out.push(norm_code(c.norm));
    out.push(c.aux as u8);
    out.push(model.aux_enabled as u8);
    out.extend_from_slice(&(c.embed_dim as u32).to_le_bytes());
    for v in c.vocab {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(c.layers.len() as u32).to_le_bytes());
    for &w in &c.layers {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c.aux_embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.aux_hidden as u32).to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    let secs = sections(model);
    out.extend_from_slice(&(secs.len() as u32).to_le_bytes());
    for s in secs {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
    }
    out
}

pub fn save(model: &CtrModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CtrModel> {
    from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Data(format!("implausible tensor shape {rows}x{cols}")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }

    fn done(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "{} trailing bytes in checkpoint",
                self.bytes.len() - self.pos
            )))
        }
    }
}

fn set_tensor(slot: &mut Matrix, payload: &[u8], name: &str) -> Result<()> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let m = r.tensor()?;
    r.done()?;
    if m.shape() != slot.shape() {
        return Err(Error::Data(format!(
            "section {name}: shape {:?} does not match the header's {:?}",
            m.shape(),
            slot.shape()
        )));
    }
    *slot = m;
    Ok(())
}

fn read_moments(payload: &[u8]) -> Result<Option<DomainStats>> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let stats = match r.u8()? {
        0 => None,
        1 => Some(DomainStats {
            mean: r.tensor()?.into_vec(),
            var: r.tensor()?.into_vec(),
        }),
        f => return Err(Error::Data(format!("bad moments flag {f}"))),
    };
    r.done()?;
    Ok(stats)
}

fn read_scalars(payload: &[u8]) -> Result<(f64, f64)> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let v = (r.f64()?, r.f64()?);
    r.done()?;
    Ok(v)
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<CtrModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let num_domains = r.u32()? as usize;
    let kind = match r.u8()? {
        0 => ModelKind::Star,
        1 => ModelKind::Base,
        2 => ModelKind::SharedBottom,
        k => return Err(Error::Data(format!("unknown model kind code {k}"))),
    };
    let norm = match r.u8()? {
        0 => NormKind::Batch,
        1 => NormKind::Layer,
        2 => NormKind::Partitioned,
        k => return Err(Error::Data(format!("unknown normalizer code {k}"))),
    };
    let aux = r.u8()? != 0;
    let aux_enabled = r.u8()? != 0;
    let embed_dim = r.u32()? as usize;
    let mut vocab = [0usize; 4];
    for v in &mut vocab {
        *v = r.u64()? as usize;
    }
    let num_layers = r.u32()? as usize;
    let layers = (0..num_layers)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        kind,
        norm,
        num_domains,
        vocab,
        embed_dim,
        layers,
        aux,
        aux_embed_dim: r.u32()? as usize,
        aux_hidden: r.u32()? as usize,
        seed: r.u64()?,
    };
    let mut model = CtrModel::new(config)?;
    model.aux_enabled = aux_enabled;

    let expected: Vec<String> = sections(&model).into_iter().map(|s| s.name).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Data(format!(
            "checkpoint has {count} sections, header implies {}",
            expected.len()
        )));
    }
    for want in &expected {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("section name is not UTF-8".into()))?;
        if name != want {
            return Err(Error::Data(format!("expected section {want}, found {name}")));
        }
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        apply_section(&mut model, name, payload)?;
    }
    r.done()?;
    Ok(model)
}

fn apply_section(model: &mut CtrModel, name: &str, payload: &[u8]) -> Result<()> {
    let parts: Vec<&str> = name.split('.').collect();
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Data(format!("bad index in section name {name}")))
    };
    match parts.as_slice() {
        ["fcn", "shared", l, which] => {
            let l = num(l)?;
            let layer = match &mut model.tower {
                Tower::Star(s) => &mut s.shared[l],
                Tower::Shared(stack) => &mut stack.layers[l],
                Tower::PerDomain(_) => unreachable!("section list comes from this model"),
            };
            let slot = if *which == "weight" { &mut layer.weight } else { &mut layer.bias };
            set_tensor(&mut slot.value, payload, name)
        }
        ["fcn", "domain", p, l, which] => {
            let (p, l) = (num(p)? - 1, num(l)?);
            let slot = match &mut model.tower {
                Tower::Star(s) => {
                    let d = &mut s.domains[p][l];
                    if *which == "weight" { &mut d.weight } else { &mut d.bias }
                }
                Tower::PerDomain(stacks) => {
                    let layer = &mut stacks[p].layers[l];
                    if *which == "weight" { &mut layer.weight } else { &mut layer.bias }
                }
                Tower::Shared(_) => unreachable!("section list comes from this model"),
            };
            set_tensor(&mut slot.value, payload, name)
        }
        ["norm", which] => {
            let (gamma, beta) = match &mut model.norm {
                Normalizer::Batch(s) => (&mut s.gamma, &mut s.beta),
                Normalizer::Layer(s) => (&mut s.gamma, &mut s.beta),
                Normalizer::Partitioned(s) => (&mut s.gamma, &mut s.beta),
            };
            match *which {
                "gamma" => set_tensor(&mut gamma.value, payload, name),
                "beta" => set_tensor(&mut beta.value, payload, name),
                "config" => {
                    let (momentum, epsilon) = read_scalars(payload)?;
                    match &mut model.norm {
                        Normalizer::Batch(s) => (s.momentum, s.epsilon) = (momentum, epsilon),
                        Normalizer::Layer(s) => s.epsilon = epsilon,
                        Normalizer::Partitioned(s) => (s.momentum, s.epsilon) = (momentum, epsilon),
                    }
                    Ok(())
                }
                _ => {
                    let Normalizer::Batch(bn) = &mut model.norm else {
                        unreachable!("section list comes from this model")
                    };
                    bn.stats = read_moments(payload)?;
                    check_moments(bn.stats.as_ref(), bn.width(), name)
                }
            }
        }
        ["norm", "domain", p, which] => {
            let p = num(p)? - 1;
            let Normalizer::Partitioned(pn) = &mut model.norm else {
                unreachable!("section list comes from this model")
            };
            match *which {
                "gamma" => set_tensor(&mut pn.domain_gamma[p].value, payload, name),
                "beta" => set_tensor(&mut pn.domain_beta[p].value, payload, name),
                _ => {
                    pn.stats[p] = read_moments(payload)?;
                    let width = pn.width();
                    check_moments(pn.stats[p].as_ref(), width, name)
                }
            }
        }
        ["embedding", field] => {
            let i = FIELD_NAMES.iter().position(|f| f == field).expect("known field");
            set_tensor(&mut model.tables.tables[i].weights, payload, name)
        }
        ["aux", rest @ ..] => {
            let aux = model.aux.as_mut().expect("aux sections imply an aux net");
            let slot = match rest {
                ["domain_embedding"] => &mut aux.domain_embedding.weights,
                ["hidden", "weight"] => &mut aux.hidden.weight.value,
                ["hidden", "bias"] => &mut aux.hidden.bias.value,
                ["output", "weight"] => &mut aux.output.weight.value,
                _ => &mut aux.output.bias.value,
            };
            set_tensor(slot, payload, name)
        }
        _ => Err(Error::Data(format!("unknown section {name}"))),
    }
}

fn check_moments(stats: Option<&DomainStats>, width: usize, name: &str) -> Result<()> {
    match stats {
        Some(s) if s.mean.len() != width || s.var.len() != width => Err(Error::Data(format!(
            "section {name}: moments have width {}, expected {width}",
            s.mean.len()
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::optim::{AdamConfig, AdamState};
    use crate::tensor::Rng;

    fn trained(kind: ModelKind, norm: NormKind) -> CtrModel {
        let cfg = ModelConfig {
            kind,
            norm,
            num_domains: 3,
            vocab: [10, 6, 10, 4],
            embed_dim: 2,
            layers: vec![5, 1],
            aux: true,
            aux_embed_dim: 2,
            aux_hidden: 3,
            seed: 3,
        };
        let mut model = CtrModel::new(cfg).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        let mut rng = Rng::new(4);
        for step in 0..6 {
            let domain = 1 + step % 2;
            let batch: Vec<Example> = (0..8)
                .map(|_| Example {
                    domain,
                    clicked: rng.bernoulli(0.3),
                    behavior: vec![rng.below(10)],
                    user: rng.below(6),
                    item: rng.below(10),
                    context: rng.below(4),
                })
                .collect();
            model.train_step(&mut adam, &batch).unwrap();
        }
        model
    }

    #[test]
    fn round_trip_is_bitwise() {
        for kind in [ModelKind::Star, ModelKind::Base, ModelKind::SharedBottom] {
            for norm in [NormKind::Batch, NormKind::Layer, NormKind::Partitioned] {
                let model = trained(kind, norm);
                let bytes = to_bytes(&model);
                let back = from_bytes(&bytes).unwrap();
                assert_eq!(to_bytes(&back), bytes, "{kind} {norm}");
                assert_eq!(back.flat_params().len(), model.flat_params().len());
                for (a, b) in back.flat_params().iter().zip(model.flat_params()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn unpopulated_moments_survive() {
        let model = trained(ModelKind::Star, NormKind::Partitioned);
        let back = from_bytes(&to_bytes(&model)).unwrap();
        let Normalizer::Partitioned(pn) = &back.norm else { unreachable!() };
        assert!(pn.stats[0].is_some() && pn.stats[1].is_some() && pn.stats[2].is_none());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = to_bytes(&trained(ModelKind::Base, NormKind::Batch));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: VERSION })
        ));
    }

    #[test]
    fn truncation_and_garbage_are_data_errors() {
        let bytes = to_bytes(&trained(ModelKind::Star, NormKind::Batch));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Data(_))));
        assert!(matches!(from_bytes(b"NOPE"), Err(Error::Data(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Data(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = trained(ModelKind::Star, NormKind::Partitioned);
        save(&model, &path).unwrap();
        assert_eq!(to_bytes(&load(&path).unwrap()), to_bytes(&model));
    }
}
