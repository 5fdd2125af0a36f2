//! Streams a domain-sorted arrival order through the shuffle buffer and
//! measures how far the rolling batch mix strays from the global mix.
//!
//!     cargo run --release --example shuffle_buffer

use star_ctr::data::{chronological_batches, rolling_mix_distance, stream_batches, Batch, ShuffleBuffer};
use star_ctr::experiment::ExperimentConfig;

fn main() -> star_ctr::Result<()> {
    let config = ExperimentConfig::from_overrides(std::env::args().skip(1))?;
    let mut generated = star_ctr::data::generate(&config.generator_config())?.0;
    let m = config.generator.num_domains();
    generated.sort_by_key(|e| e.domain);
    let batch = config.batch_size;

    let chrono = chronological_batches(&generated, batch);
    println!("{} examples sorted by domain, batch {batch}", generated.len());
    println!("capacity\tbatches\twindow\tmean TV");
    for window in [50, 200, 1000] {
        println!(
            "none    \t{}\t{window}\t{:.4}",
            chrono.len(),
            rolling_mix_distance(&chrono, m, window)
        );
    }
    for factor in [10, 50, 200] {
        let capacity = factor * batch;
        let buffer = ShuffleBuffer::new(capacity, config.seed)?;
        let batches: Vec<Batch> = stream_batches(generated.iter().cloned(), buffer, batch)?.collect();
        for window in [50, 200, 1000] {
            println!(
                "{capacity:<8}\t{}\t{window}\t{:.4}",
                batches.len(),
                rolling_mix_distance(&batches, m, window)
            );
        }
    }
    Ok(())
}
