//! Synthetic multi-domain click data with a known logistic ground truth.
//!
//! Users, items and contexts carry latent factors `a_u`, `b_i`, `c_c` drawn
//! from a standard normal. For an impression the feature map is
//! `φ = [a_u ⊙ b_i, b_i, c_c]` and the click logit in domain `p` is
//!
//! ```text
//! logit = w_shared · φ + α_p · w_p · φ + bias_p
//! ```
//!
//! Domain `p` sees users, items and contexts drawn with probability
//! proportional to `exp(factor · shift_p)`, which moves the mean of the
//! latent factors it observes to roughly `shift_p`. `bias_p` is found by
//! bisection so the expected CTR of the domain equals its target.

use super::Example;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Traffic share and CTR of the 19 production domains, in domain order.
pub const PRODUCTION_PROFILE: [(f64, f64); 19] = [
    (0.0099, 0.0214),
    (0.0161, 0.0269),
    (0.0340, 0.0297),
    (0.0385, 0.0363),
    (0.0279, 0.0277),
    (0.0056, 0.0345),
    (0.0427, 0.0359),
    (0.1676, 0.0324),
    (0.1000, 0.0323),
    (0.1216, 0.0208),
    (0.0076, 0.1205),
    (0.0131, 0.0352),
    (0.0334, 0.0127),
    (0.2876, 0.0375),
    (0.0117, 0.1203),
    (0.0046, 0.0402),
    (0.0105, 0.0163),
    (0.0091, 0.0464),
    (0.0585, 0.0142),
];

const CALIBRATION_STREAM: u64 = 0xca11_b7a7e;
const WORLD_STREAM: u64 = 0x0077_0c1d;
const SAMPLE_STREAM: u64 = 0x5a3b_1e55;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainProfile {
    pub traffic_share: f64,
    pub base_ctr: f64,
    /// Mean shift of the latent factors seen by this domain.
    pub feature_shift: Vec<f64>,
    /// Weight `α` of the domain-specific part of the ground truth.
    pub specificity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub profiles: Vec<DomainProfile>,
    pub num_users: usize,
    pub num_items: usize,
    pub num_contexts: usize,
    pub latent_dim: usize,
    /// Behavior sequences have a uniformly drawn length in `0..=max_behavior`.
    pub max_behavior: usize,
    /// Size of each user's pool of interesting items.
    pub interest_pool: usize,
    /// Standard deviation of the ground-truth logit contributions.
    pub signal_scale: f64,
    pub calibration_samples: usize,
    pub num_examples: usize,
    pub seed: u64,
}

/// Default shift for domain `p` (1-based): a distinct signed axis.
pub fn default_shift(p: usize, latent_dim: usize, magnitude: f64) -> Vec<f64> {
    let mut s = vec![0.0; latent_dim];
    let axis = (p - 1) % latent_dim;
    let sign = if ((p - 1) / latent_dim).is_multiple_of(2) { 1.0 } else { -1.0 };
    s[axis] = sign * magnitude;
    s
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let shares = [0.35, 0.25, 0.20, 0.12, 0.08];
        let ctrs = [0.0375, 0.0324, 0.0208, 0.0127, 0.1203];
        let latent_dim = 8;
        let profiles = shares
            .iter()
            .zip(ctrs)
            .enumerate()
            .map(|(i, (&traffic_share, base_ctr))| DomainProfile {
                traffic_share,
                base_ctr,
                feature_shift: default_shift(i + 1, latent_dim, 0.7),
                specificity: 0.6,
            })
            .collect();
        Self {
            profiles,
            num_users: 400,
            num_items: 2000,
            num_contexts: 16,
            latent_dim,
            max_behavior: 5,
            interest_pool: 20,
            signal_scale: 1.2,
            calibration_samples: 20_000,
            num_examples: 250_000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Profiles taken from the 19-domain production table.
    pub fn production() -> Self {
        let base = Self::default();
        let profiles = PRODUCTION_PROFILE
            .iter()
            .enumerate()
            .map(|(i, &(traffic_share, base_ctr))| DomainProfile {
                traffic_share,
                base_ctr,
                feature_shift: default_shift(i + 1, base.latent_dim, 0.7),
                specificity: 0.6,
            })
            .collect();
        Self { profiles, ..base }
    }

    pub fn num_domains(&self) -> usize {
        self.profiles.len()
    }

    /// Vocabulary sizes in field order: behavior, profile, item, context.
    pub fn vocab(&self) -> [usize; 4] {
        [self.num_items, self.num_users, self.num_items, self.num_contexts]
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        if self.num_users == 0 || self.num_items == 0 || self.num_contexts == 0 || self.latent_dim == 0 {
            return Err(Error::Config("vocabulary sizes and latent_dim must be positive".into()));
        }
        if self.interest_pool == 0 || self.calibration_samples == 0 {
            return Err(Error::Config("interest_pool and calibration_samples must be positive".into()));
        }
        let total: f64 = self.profiles.iter().map(|p| p.traffic_share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("traffic shares sum to {total}, not 1")));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            let d = i + 1;
            if !(p.traffic_share >= 0.0) {
                return Err(Error::Config(format!("domain {d}: negative traffic share")));
            }
            if !(p.base_ctr > 0.0 && p.base_ctr < 1.0) {
                return Err(Error::Calibration { domain: d, target: p.base_ctr });
            }
            if p.feature_shift.len() != self.latent_dim {
                return Err(Error::Config(format!(
                    "domain {d}: shift has {} entries, latent_dim is {}",
                    p.feature_shift.len(),
                    self.latent_dim
                )));
            }
            if !(0.0..=1.0).contains(&p.specificity) {
                return Err(Error::Config(format!("domain {d}: specificity must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Domain keys look like
    /// `domain.3.ctr`; `num_domains` resizes the profile list first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let float = || value.parse::<f64>().map_err(|_| bad());
        let int = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "num_users" => self.num_users = int()?,
            "num_items" => self.num_items = int()?,
            "num_contexts" => self.num_contexts = int()?,
            "latent_dim" => {
                self.latent_dim = int()?;
                for (i, p) in self.profiles.iter_mut().enumerate() {
                    p.feature_shift.resize(self.latent_dim, 0.0);
                    if p.feature_shift.iter().all(|&x| x == 0.0) {
                        p.feature_shift = default_shift(i + 1, self.latent_dim, 0.7);
                    }
                }
            }
            "max_behavior" => self.max_behavior = int()?,
            "interest_pool" => self.interest_pool = int()?,
            "signal_scale" => self.signal_scale = float()?,
            "calibration_samples" => self.calibration_samples = int()?,
            "num_examples" => self.num_examples = int()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "num_domains" => {
                let m = int()?;
                if m == 0 {
                    return Err(bad());
                }
                while self.profiles.len() < m {
                    let p = self.profiles.len() + 1;
                    self.profiles.push(DomainProfile {
                        traffic_share: 0.0,
                        base_ctr: 0.03,
                        feature_shift: default_shift(p, self.latent_dim, 0.7),
                        specificity: 0.6,
                    });
                }
                self.profiles.truncate(m);
            }
            "shift_magnitude" => {
                let mag = float()?;
                let k = self.latent_dim;
                for (i, p) in self.profiles.iter_mut().enumerate() {
                    p.feature_shift = default_shift(i + 1, k, mag);
                }
            }
            "alpha" => {
                let a = float()?;
                self.profiles.iter_mut().for_each(|p| p.specificity = a);
            }
            _ => {
                let parts: Vec<&str> = key.split('.').collect();
                let ["domain", n, field] = parts.as_slice() else {
                    return Err(Error::Config(format!("unknown generator key `{key}`")));
                };
                let m = self.profiles.len();
                let p = n
                    .parse::<usize>()
                    .ok()
                    .filter(|p| (1..=m).contains(p))
                    .ok_or_else(|| Error::Config(format!("`{key}`: domain must be in 1..={m}")))?;
                let profile = &mut self.profiles[p - 1];
                match *field {
                    "share" => profile.traffic_share = float()?,
                    "ctr" => profile.base_ctr = float()?,
                    "alpha" => profile.specificity = float()?,
                    "shift" => {
                        let mut v = value
                            .split(',')
                            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                            .collect::<Result<Vec<_>>>()?;
                        if v.len() > self.latent_dim {
                            return Err(bad());
                        }
                        v.resize(self.latent_dim, 0.0);
                        profile.feature_shift = v;
                    }
                    _ => return Err(Error::Config(format!("unknown generator key `{key}`"))),
                }
            }
        }
        Ok(())
    }
}

/// Sampling weights `∝ exp(factor · shift)` as a cumulative table.
fn tilted_cumulative(factors: &Matrix, shift: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..factors.rows())
        .map(|r| factors.row(r).iter().zip(shift).map(|(a, s)| a * s).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    logits
        .iter()
        .map(|l| {
            acc += (l - max).exp();
            acc
        })
        .collect()
}

fn cumulative(weights: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The latent world behind a generated dataset.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub users: Matrix,
    pub items: Matrix,
    pub contexts: Matrix,
    pub w_shared: Vec<f64>,
    pub w_domain: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub bias: Vec<f64>,
    user_cdf: Vec<Vec<f64>>,
    item_cdf: Vec<Vec<f64>>,
    context_cdf: Vec<Vec<f64>>,
    interests: Vec<Vec<usize>>,
}

impl GroundTruth {
    fn build(config: &GeneratorConfig, rng: &mut Rng) -> Self {
        let k = config.latent_dim;
        let users = Matrix::normal(config.num_users, k, 1.0, rng);
        let items = Matrix::normal(config.num_items, k, 1.0, rng);
        let contexts = Matrix::normal(config.num_contexts, k, 1.0, rng);
        let width = 3 * k;
        let sd = config.signal_scale / (width as f64).sqrt();
        let w_shared = (0..width).map(|_| sd * rng.normal()).collect();
        let w_domain = config
            .profiles
            .iter()
            .map(|_| (0..width).map(|_| sd * rng.normal()).collect())
            .collect();
        let interests = (0..config.num_users)
            .map(|u| {
                let taste = cumulative(
                    (0..config.num_items).map(|i| dot(users.row(u), items.row(i)).exp()),
                );
                (0..config.interest_pool)
                    .map(|_| rng.categorical(&taste))
                    .collect()
            })
            .collect();
        let shifts = config.profiles.iter().map(|p| &p.feature_shift);
        Self {
            user_cdf: shifts.clone().map(|s| tilted_cumulative(&users, s)).collect(),
            item_cdf: shifts.clone().map(|s| tilted_cumulative(&items, s)).collect(),
            context_cdf: shifts.map(|s| tilted_cumulative(&contexts, s)).collect(),
            alpha: config.profiles.iter().map(|p| p.specificity).collect(),
            bias: vec![0.0; config.profiles.len()],
            users,
            items,
            contexts,
            w_shared,
            w_domain,
            interests,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.bias.len()
    }

    fn features(&self, user: usize, item: usize, context: usize) -> Vec<f64> {
        let (a, b) = (self.users.row(user), self.items.row(item));
        let mut phi: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        phi.extend_from_slice(b);
        phi.extend_from_slice(self.contexts.row(context));
        phi
    }

    /// Logit without the domain bias.
    fn raw_logit(&self, domain: usize, user: usize, item: usize, context: usize) -> f64 {
        let phi = self.features(user, item, context);
        dot(&self.w_shared, &phi) + self.alpha[domain - 1] * dot(&self.w_domain[domain - 1], &phi)
    }

    /// True click logit of an impression.
    pub fn logit(&self, ex: &Example) -> f64 {
        self.raw_logit(ex.domain, ex.user, ex.item, ex.context) + self.bias[ex.domain - 1]
    }

    /// True click probability of an impression.
    pub fn probability(&self, ex: &Example) -> f64 {
        crate::optim::sigmoid(self.logit(ex))
    }

    fn draw_ids(&self, domain: usize, rng: &mut Rng) -> (usize, usize, usize) {
        let p = domain - 1;
        (
            rng.categorical(&self.user_cdf[p]),
            rng.categorical(&self.item_cdf[p]),
            rng.categorical(&self.context_cdf[p]),
        )
    }

    /// Sets `bias_p` so the mean click probability over a domain sample
    /// equals `target`.
    fn calibrate(&mut self, domain: usize, target: f64, samples: usize, seed: u64) -> Result<()> {
        let err = Error::Calibration { domain, target };
        if !(target > 0.0 && target < 1.0) {
            return Err(err);
        }
        // Every domain starts from the same stream so that domains with
        // identical sampling weights calibrate on identical samples.
        let mut rng = Rng::derived(seed, CALIBRATION_STREAM);
        let raw: Vec<f64> = (0..samples)
            .map(|_| {
                let (u, i, c) = self.draw_ids(domain, &mut rng);
                self.raw_logit(domain, u, i, c)
            })
            .collect();
        let mean_ctr = |b: f64| {
            raw.iter().map(|r| crate::optim::sigmoid(r + b)).sum::<f64>() / raw.len() as f64
        };
        let (mut lo, mut hi) = (-40.0, 40.0);
        if !(mean_ctr(lo) < target && mean_ctr(hi) > target) {
            return Err(err);
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mean_ctr(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.bias[domain - 1] = 0.5 * (lo + hi);
        Ok(())
    }
}

/// Generates `config.num_examples` impressions in arrival order together
/// with the ground truth that produced them.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<Example>, GroundTruth)> {
    config.validate()?;
    let mut world_rng = Rng::derived(config.seed, WORLD_STREAM);
    let mut truth = GroundTruth::build(config, &mut world_rng);
    for (i, p) in config.profiles.iter().enumerate() {
        truth.calibrate(i + 1, p.base_ctr, config.calibration_samples, config.seed)?;
    }
    let domain_cdf = cumulative(config.profiles.iter().map(|p| p.traffic_share));
    let mut rng = Rng::derived(config.seed, SAMPLE_STREAM);
    let examples = (0..config.num_examples)
        .map(|_| {
            let domain = rng.categorical(&domain_cdf) + 1;
            let (user, item, context) = truth.draw_ids(domain, &mut rng);
            let pool = &truth.interests[user];
            let len = rng.below(config.max_behavior + 1);
            let behavior = (0..len).map(|_| pool[rng.below(pool.len())]).collect();
            let mut ex = Example {
                domain,
                clicked: false,
                behavior,
                user,
                item,
                context,
            };
            ex.clicked = rng.bernoulli(truth.probability(&ex));
            ex
        })
        .collect();
    Ok((examples, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_examples: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_users: 60,
            num_items: 120,
            num_contexts: 4,
            calibration_samples: 5000,
            num_examples,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn table_shares_sum_to_one() {
        let total: f64 = PRODUCTION_PROFILE.iter().map(|p| p.0).sum();
        assert!((total - 1.0).abs() < 1e-9);
        GeneratorConfig::production().validate().unwrap();
    }

    #[test]
    fn ids_stay_in_vocabulary() {
        let cfg = small(5000);
        let (data, _) = generate(&cfg).unwrap();
        for ex in &data {
            assert!((1..=5).contains(&ex.domain));
            assert!(ex.user < cfg.num_users && ex.item < cfg.num_items && ex.context < cfg.num_contexts);
            assert!(ex.behavior.len() <= cfg.max_behavior);
            assert!(ex.behavior.iter().all(|&b| b < cfg.num_items));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = small(2000);
        assert_eq!(generate(&cfg).unwrap().0, generate(&cfg).unwrap().0);
        let other = GeneratorConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn infeasible_ctr_is_a_calibration_error() {
        let mut cfg = small(10);
        cfg.profiles[2].base_ctr = 1.0;
        assert!(matches!(
            generate(&cfg),
            Err(Error::Calibration { domain: 3, .. })
        ));
    }

    #[test]
    fn shares_must_sum_to_one() {
        let mut cfg = small(10);
        cfg.profiles[0].traffic_share += 0.01;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shared_truth_without_specificity_or_shift() {
        let mut cfg = small(10);
        for p in &mut cfg.profiles {
            p.specificity = 0.0;
            p.feature_shift = vec![0.0; cfg.latent_dim];
            p.base_ctr = 0.05;
        }
        let (_, truth) = generate(&cfg).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let mut ex = Example {
                domain: 1,
                clicked: false,
                behavior: vec![],
                user: rng.below(cfg.num_users),
                item: rng.below(cfg.num_items),
                context: rng.below(cfg.num_contexts),
            };
            let first = truth.probability(&ex);
            for p in 2..=5 {
                ex.domain = p;
                assert_eq!(truth.probability(&ex), first);
            }
        }
    }

    #[test]
    fn shift_moves_the_observed_factor_mean() {
        let cfg = small(40_000);
        let (data, truth) = generate(&cfg).unwrap();
        for p in 1..=2 {
            let rows: Vec<&Example> = data.iter().filter(|e| e.domain == p).collect();
            let axis = p - 1;
            let mean: f64 = rows.iter().map(|e| truth.items.get(e.item, axis)).sum::<f64>()
                / rows.len() as f64;
            assert!(mean > 0.4, "domain {p} axis mean {mean}");
        }
    }

    #[test]
    fn key_value_settings() {
        let mut cfg = GeneratorConfig::default();
        cfg.set("num_domains", "2").unwrap();
        cfg.set("domain.1.share", "0.5").unwrap();
        cfg.set("domain.2.share", "0.5").unwrap();
        cfg.set("domain.2.shift", "1,2").unwrap();
        assert_eq!(cfg.profiles[1].feature_shift[..3], [1.0, 2.0, 0.0]);
        cfg.validate().unwrap();
        assert!(matches!(cfg.set("domain.3.ctr", "0.1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("colour", "red"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("num_users", "many"), Err(Error::Config(_))));
    }
}
