//! Ranking and calibration metrics.
//!
//! AUC uses midranks so tied scores count one half, which matches a
//! pairwise comparison over every positive/negative pair. Weighted AUC
//! averages per-user AUC weighted by impression count, skipping users whose
//! impressions are all of one class. PCOC is mean prediction over mean label.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub user: usize,
    pub domain: usize,
    pub yhat: f64,
    pub clicked: bool,
}

/// Mann-Whitney AUC of `scores` against `labels`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "auc",
            left: (scores.len(), 1),
            right: (labels.len(), 1),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie run over ranks i+1..=j gets (i+1+j)/2.
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let run_positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        positive_rank_sum += midrank * run_positives as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Impression-weighted mean of per-group AUCs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedAuc {
    pub value: f64,
    pub groups_used: usize,
    pub groups_excluded: usize,
}

/// Weighted AUC over groups keyed by `key`, in ascending key order.
pub fn weighted_auc_by<K: Ord>(predictions: &[Prediction], key: impl Fn(&Prediction) -> K) -> Result<WeightedAuc> {
    let mut groups: BTreeMap<K, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for p in predictions {
        let g = groups.entry(key(p)).or_default();
        g.0.push(p.yhat);
        g.1.push(p.clicked);
    }
    let (mut num, mut den) = (0.0, 0.0);
    let (mut used, mut excluded) = (0, 0);
    for (scores, labels) in groups.values() {
        match auc(scores, labels) {
            Ok(a) => {
                let w = scores.len() as f64;
                num += w * a;
                den += w;
                used += 1;
            }
            Err(Error::Metric(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Metric("no group has a defined AUC".into()));
    }
    Ok(WeightedAuc {
        value: num / den,
        groups_used: used,
        groups_excluded: excluded,
    })
}

/// Per-user weighted AUC.
pub fn weighted_auc(predictions: &[Prediction]) -> Result<WeightedAuc> {
    weighted_auc_by(predictions, |p| p.user)
}

/// Mean computed with a correction pass, so that `n` copies of `c` average
/// to exactly `c`.
fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let first = values.clone().sum::<f64>() / n;
    first + values.map(|v| v - first).sum::<f64>() / n
}

/// Mean predicted CTR over observed CTR.
pub fn pcoc(predictions: &[Prediction]) -> Result<f64> {
    let clicks = predictions.iter().filter(|p| p.clicked).count();
    if clicks == 0 {
        return Err(Error::Metric("PCOC undefined without clicks".into()));
    }
    let observed = clicks as f64 / predictions.len() as f64;
    Ok(mean(predictions.iter().map(|p| p.yhat)) / observed)
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values.iter().copied());
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub impressions: usize,
    pub clicks: usize,
    pub auc: Option<f64>,
    /// Weighted AUC over (user, domain) groups.
    pub weighted_auc: Option<f64>,
    pub pcoc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub impressions: usize,
    pub overall_auc: f64,
    pub weighted_auc: WeightedAuc,
    pub domains: BTreeMap<usize, DomainMetrics>,
    /// Standard deviation of the defined per-domain PCOCs.
    pub pcoc_std: f64,
}

impl MetricReport {
    pub fn compute(predictions: &[Prediction]) -> Result<Self> {
        let scores: Vec<f64> = predictions.iter().map(|p| p.yhat).collect();
        let labels: Vec<bool> = predictions.iter().map(|p| p.clicked).collect();
        let overall_auc = auc(&scores, &labels)?;
        let weighted = weighted_auc(predictions)?;
        let mut by_domain: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
        for p in predictions {
            by_domain.entry(p.domain).or_default().push(*p);
        }
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Metric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let mut domains = BTreeMap::new();
        for (d, preds) in &by_domain {
            let s: Vec<f64> = preds.iter().map(|p| p.yhat).collect();
            let l: Vec<bool> = preds.iter().map(|p| p.clicked).collect();
            domains.insert(
                *d,
                DomainMetrics {
                    impressions: preds.len(),
                    clicks: l.iter().filter(|&&c| c).count(),
                    auc: defined(auc(&s, &l))?,
                    weighted_auc: defined(weighted_auc(preds).map(|w| w.value))?,
                    pcoc: defined(pcoc(preds))?,
                },
            );
        }
        let pcocs: Vec<f64> = domains.values().filter_map(|m: &DomainMetrics| m.pcoc).collect();
        Ok(Self {
            impressions: predictions.len(),
            overall_auc,
            weighted_auc: weighted,
            pcoc_std: std_dev(&pcocs),
            domains,
        })
    }

    pub fn pcoc_map(&self) -> BTreeMap<usize, f64> {
        self.domains
            .iter()
            .filter_map(|(&d, m)| m.pcoc.map(|v| (d, v)))
            .collect()
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.17e}"));
        let mut out = String::new();
        writeln!(out, "impressions={}", self.impressions).unwrap();
        writeln!(out, "overall_auc={:.17e}", self.overall_auc).unwrap();
        writeln!(out, "weighted_auc={:.17e}", self.weighted_auc.value).unwrap();
        writeln!(out, "weighted_auc.users_used={}", self.weighted_auc.groups_used).unwrap();
        writeln!(out, "weighted_auc.users_excluded={}", self.weighted_auc.groups_excluded).unwrap();
        writeln!(out, "pcoc_std={:.17e}", self.pcoc_std).unwrap();
        for (d, m) in &self.domains {
            writeln!(out, "domain.{d}.impressions={}", m.impressions).unwrap();
            writeln!(out, "domain.{d}.clicks={}", m.clicks).unwrap();
            writeln!(out, "domain.{d}.auc={}", opt(m.auc)).unwrap();
            writeln!(out, "domain.{d}.weighted_auc={}", opt(m.weighted_auc)).unwrap();
            writeln!(out, "domain.{d}.pcoc={}", opt(m.pcoc)).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad report JSON: {e}")))
    }
}

/// Per-domain PCOC scatter: one marker per domain and series, with a
/// reference line at 1.0.
pub fn pcoc_svg(series: &[(&str, BTreeMap<usize, f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let domains: Vec<usize> = {
        let mut d: Vec<usize> = series.iter().flat_map(|(_, m)| m.keys().copied()).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    let values = series.iter().flat_map(|(_, m)| m.values().copied());
    let lo = values.clone().fold(1.0f64, f64::min).min(0.5);
    let hi = values.fold(1.0f64, f64::max).max(1.5);
    let x = |d: usize| {
        let i = domains.iter().position(|&k| k == d).unwrap_or(0) as f64;
        PAD + (i + 0.5) * (W - 2.0 * PAD) / domains.len().max(1) as f64
    };
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<line x1="{PAD}" y1="{y1:.2}" x2="{x2}" y2="{y1:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        y1 = y(1.0),
        x2 = W - PAD
    )
    .unwrap();
    writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#, b = H - PAD).unwrap();
    writeln!(s, r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#, b = H - PAD, r = W - PAD).unwrap();
    for v in [lo, 1.0, hi] {
        writeln!(s, r#"<text x="{tx}" y="{ty:.2}" font-size="11" text-anchor="end">{v:.2}</text>"#, tx = PAD - 4.0, ty = y(v) + 4.0).unwrap();
    }
    for &d in &domains {
        writeln!(s, r#"<text x="{tx:.2}" y="{ty}" font-size="11" text-anchor="middle">#{d}</text>"#, tx = x(d), ty = H - PAD + 16.0).unwrap();
    }
    writeln!(s, r#"<text x="{cx}" y="{ty}" font-size="12" text-anchor="middle">domain</text>"#, cx = W / 2.0, ty = H - 8.0).unwrap();
    writeln!(s, r#"<text x="14" y="{cy}" font-size="12" transform="rotate(-90 14 {cy})" text-anchor="middle">PCOC</text>"#, cy = H / 2.0).unwrap();
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (&d, &v) in values {
            writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{color}"><title>{name} #{d}: {v:.4}</title></circle>"#, cx = x(d), cy = y(v)).unwrap();
        }
        writeln!(s, r#"<circle cx="{lx}" cy="{ly}" r="4" fill="{color}"/><text x="{tx}" y="{ty}" font-size="11">{name}</text>"#,
            lx = W - PAD - 100.0, ly = PAD + 14.0 * k as f64, tx = W - PAD - 92.0, ty = PAD + 14.0 * k as f64 + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn pred(user: usize, yhat: f64, clicked: bool) -> Prediction {
        Prediction { user, domain: 1, yhat, clicked }
    }

    #[test]
    fn separable_and_all_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
    }

    #[test]
    fn matches_pairwise_oracle_on_tie_heavy_groups() {
        let mut rng = Rng::new(8);
        for round in 0..200 {
            let levels = if round % 2 == 0 { 4 } else { 1000 };
            let mut labels: Vec<bool> = (0..50).map(|_| rng.bernoulli(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..50).map(|_| rng.below(levels) as f64 / levels as f64).collect();
            assert_eq!(auc(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }
    }

    #[test]
    fn weighted_auc_hand_arithmetic() {
        // User 1: perfectly ordered, 10 impressions. User 2: all tied, 30.
        let mut preds = Vec::new();
        for i in 0..10 {
            preds.push(pred(1, i as f64, i >= 5));
        }
        for i in 0..30 {
            preds.push(pred(2, 0.5, i % 3 == 0));
        }
        preds.push(pred(3, 0.9, true));
        let w = weighted_auc(&preds).unwrap();
        assert_eq!(w.value, 0.625);
        assert_eq!((w.groups_used, w.groups_excluded), (2, 1));
    }

    #[test]
    fn single_user_equals_plain_auc() {
        let preds: Vec<Prediction> = (0..20).map(|i| pred(4, (i * 7 % 11) as f64, i % 3 == 0)).collect();
        let s: Vec<f64> = preds.iter().map(|p| p.yhat).collect();
        let l: Vec<bool> = preds.iter().map(|p| p.clicked).collect();
        assert_eq!(weighted_auc(&preds).unwrap().value, auc(&s, &l).unwrap());
        assert!(matches!(weighted_auc(&[pred(1, 0.2, true)]), Err(Error::Metric(_))));
    }

    #[test]
    fn pcoc_cases() {
        let preds = [pred(1, 0.2, false), pred(1, 0.4, true)];
        assert!((pcoc(&preds).unwrap() - 0.6).abs() < 1e-15);
        let doubled: Vec<Prediction> = preds.iter().map(|p| Prediction { yhat: 2.0 * p.yhat, ..*p }).collect();
        assert_eq!(pcoc(&doubled).unwrap(), 2.0 * pcoc(&preds).unwrap());
        assert!(matches!(pcoc(&[pred(1, 0.3, false)]), Err(Error::Metric(_))));
    }

    #[test]
    fn constant_empirical_ctr_predictor_has_unit_pcoc() {
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let n = 1 + rng.below(5000);
            let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.04)).collect();
            let clicks = labels.iter().filter(|&&c| c).count();
            if clicks == 0 {
                continue;
            }
            let c = clicks as f64 / n as f64;
            let preds: Vec<Prediction> = labels.iter().map(|&l| pred(0, c, l)).collect();
            assert_eq!(pcoc(&preds).unwrap(), 1.0);
        }
    }

    #[test]
    fn report_formats() {
        let mut rng = Rng::new(5);
        let preds: Vec<Prediction> = (0..400)
            .map(|i| Prediction {
                user: i % 7,
                domain: 1 + i % 3,
                yhat: rng.uniform(),
                clicked: rng.bernoulli(0.3),
            })
            .collect();
        let report = MetricReport::compute(&preds).unwrap();
        assert_eq!(MetricReport::from_json(&report.to_json()).unwrap(), report);
        let kv = report.to_key_values();
        assert!(kv.contains("overall_auc=") && kv.contains("domain.3.pcoc="));
        let svg = pcoc_svg(&[("model", report.pcoc_map())]);
        assert!(svg.starts_with("<svg") && svg.matches("<circle").count() == 4);
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_transform(
            raw in proptest::collection::vec((-2.0f64..2.0, any::<bool>()), 2..80)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| (r.0 * 8.0).round() / 8.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let warped: Vec<f64> = scores.iter().map(|x| x * x * x + x).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
            prop_assert_eq!(auc(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }

        #[test]
        fn weighted_auc_is_between_user_extremes(
            raw in proptest::collection::vec((0usize..5, 0.0f64..1.0, any::<bool>()), 4..120)
        ) {
            let preds: Vec<Prediction> = raw.iter().map(|&(u, y, c)| pred(u, y, c)).collect();
            let per_user: Vec<f64> = (0..5).filter_map(|u| {
                let g: Vec<&Prediction> = preds.iter().filter(|p| p.user == u).collect();
                let s: Vec<f64> = g.iter().map(|p| p.yhat).collect();
                let l: Vec<bool> = g.iter().map(|p| p.clicked).collect();
                auc(&s, &l).ok()
            }).collect();
            prop_assume!(!per_user.is_empty());
            let w = weighted_auc(&preds).unwrap().value;
            let lo = per_user.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = per_user.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }
    }
}
