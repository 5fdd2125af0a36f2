//! Generates a synthetic multi-domain dataset and compares each domain's
//! realized traffic share and click rate with its profile.
//!
//!     cargo run --release --example generate_data -- num_examples=100000 seed=3

use star_ctr::data::{generate, write_dataset};
use star_ctr::experiment::ExperimentConfig;

fn main() -> star_ctr::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (out, overrides): (Vec<_>, Vec<_>) = args.into_iter().partition(|a| a.starts_with("out="));
    let config = ExperimentConfig::from_overrides(overrides)?.generator_config();
    let (examples, truth) = generate(&config)?;

    println!("domain\tshare\ttarget\tctr\ttarget\tbias");
    for (p, profile) in config.profiles.iter().enumerate() {
        let rows: Vec<_> = examples.iter().filter(|e| e.domain == p + 1).collect();
        let clicks = rows.iter().filter(|e| e.clicked).count();
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:+.3}",
            p + 1,
            rows.len() as f64 / examples.len() as f64,
            profile.traffic_share,
            clicks as f64 / rows.len().max(1) as f64,
            profile.base_ctr,
            truth.bias[p],
        );
    }
    if let Some(path) = out.first().and_then(|a| a.strip_prefix("out=")) {
        write_dataset(path, &examples)?;
        println!("wrote {} examples to {path}", examples.len());
    }
    Ok(())
}
