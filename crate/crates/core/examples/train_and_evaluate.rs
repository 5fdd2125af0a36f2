//! Trains one model on a generated split and prints its test metrics.
//!
//!     cargo run --release --example train_and_evaluate -- model=base norm=bn

use std::time::Instant;

use star_ctr::experiment::{evaluate, generate_split, train, ExperimentConfig};

fn main() -> star_ctr::Result<()> {
    let config = ExperimentConfig::from_overrides(std::env::args().skip(1))?;
    let split = generate_split(&config)?;
    println!(
        "{} {} aux={}: {} train / {} test examples",
        config.model,
        config.norm,
        config.aux,
        split.train.len(),
        split.test.len()
    );

    let start = Instant::now();
    let (model, log) = train(&config, &split.train, std::io::sink())?;
    for e in &log.epochs {
        println!(
            "epoch {}: {} batches ({} skipped), mean loss {:.5}",
            e.epoch, e.batches, e.skipped_batches, e.mean_loss
        );
    }
    println!("trained in {:.1?}, {} parameters", start.elapsed(), model.param_count().total());

    let report = evaluate(&model, &split.test)?;
    println!("overall AUC   {:.5}", report.overall_auc);
    println!("weighted AUC  {:.5}", report.weighted_auc.value);
    println!("PCOC std      {:.5}", report.pcoc_std);
    println!("domain\timpressions\tclicks\tauc\tpcoc");
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for (p, d) in &report.domains {
        println!("{p}\t{}\t{}\t{}\t{}", d.impressions, d.clicks, show(d.auc), show(d.pcoc));
    }
    Ok(())
}
