//! Folds a trained model into per-domain weights, checks that it scores
//! exactly like the original and compares the throughput of the two.
//!
//!     cargo run --release --example fold_and_score -- train_examples=50000

use std::time::Instant;

use star_ctr::experiment::{generate_split, train, ExperimentConfig};
use star_ctr::serve::{fold, score_reader, FoldedModel};

fn main() -> star_ctr::Result<()> {
    let config = ExperimentConfig::from_overrides(std::env::args().skip(1))?;
    let split = generate_split(&config)?;
    let (model, _) = train(&config, &split.train, std::io::sink())?;
    let folded = FoldedModel::from_json(&fold(&model)?.to_json())?;

    let start = Instant::now();
    let unfolded = model.predict_examples(&split.test)?;
    let t_unfolded = start.elapsed();
    let start = Instant::now();
    let fast = folded.predict_examples(&split.test)?;
    let t_folded = start.elapsed();

    let max_diff = unfolded
        .iter()
        .zip(&fast)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let n = split.test.len() as f64;
    println!("max |folded - unfolded| = {max_diff:.3e} over {} examples", split.test.len());
    println!("unfolded: {:>10.0} examples/s", n / t_unfolded.as_secs_f64());
    println!("folded:   {:>10.0} examples/s", n / t_folded.as_secs_f64());

    let mut text = Vec::new();
    star_ctr::data::write_dataset_to(&mut text, &split.test[..5])?;
    let mut out = Vec::new();
    let summary = score_reader(&folded, text.as_slice(), &mut out)?;
    println!("\nuser\tp\tyhat\ty  ({} scored)", summary.scored);
    print!("{}", String::from_utf8_lossy(&out));
    Ok(())
}
