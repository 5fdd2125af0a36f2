//! Normalizer and auxiliary-network ablation averaged over several seeds.
//!
//!     cargo run --release --example ablation -- seeds=0,1,2 train_examples=100000

use std::collections::BTreeMap;

use star_ctr::experiment::{ablation, format_ablation, generate_split, AblationRow, ExperimentConfig};

fn main() -> star_ctr::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (seeds, overrides): (Vec<_>, Vec<_>) = args.into_iter().partition(|a| a.starts_with("seeds="));
    let seeds: Vec<u64> = match seeds.first() {
        Some(s) => s["seeds=".len()..]
            .split(',')
            .map(|v| v.parse().expect("seeds must be integers"))
            .collect(),
        None => vec![0],
    };

    let mut sums: BTreeMap<(String, bool), AblationRow> = BTreeMap::new();
    let mut order = Vec::new();
    for &seed in &seeds {
        let mut pairs = overrides.clone();
        pairs.push(format!("seed={seed}"));
        let config = ExperimentConfig::from_overrides(&pairs)?;
        let split = generate_split(&config)?;
        let rows = ablation(&config, &split.train, &split.test)?;
        println!("seed {seed}\n{}", format_ablation(&rows));
        for r in rows {
            let key = (r.label(), r.aux);
            let n = seeds.len() as f64;
            let acc = sums.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                AblationRow {
                    overall_auc: 0.0,
                    weighted_auc: 0.0,
                    pcoc_std: 0.0,
                    ..r.clone()
                }
            });
            acc.overall_auc += r.overall_auc / n;
            acc.weighted_auc += r.weighted_auc / n;
            acc.pcoc_std += r.pcoc_std / n;
        }
    }
    let means: Vec<AblationRow> = order.iter().map(|k| sums[k].clone()).collect();
    println!("mean over {} seed(s)\n{}", seeds.len(), format_ablation(&means));
    Ok(())
}
