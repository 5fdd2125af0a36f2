//! Takes one optimizer step on a single-domain batch and lists which
//! checkpoint sections changed.
//!
//!     cargo run --release --example domain_isolation -- norm=pn

use star_ctr::data::generate;
use star_ctr::experiment::ExperimentConfig;
use star_ctr::model::{checkpoint, CtrModel};
use star_ctr::optim::{AdamConfig, AdamState};

fn main() -> star_ctr::Result<()> {
    let mut config = ExperimentConfig::from_overrides(std::env::args().skip(1))?;
    config.generator.num_examples = 5_000;
    let (examples, _) = generate(&config.generator)?;
    let mut model = CtrModel::new(config.model_config())?;
    let mut adam = AdamState::new(AdamConfig::default());

    // Populate statistics for every domain first so that nothing is
    // created by the step under test.
    for p in 1..=model.num_domains() {
        let batch: Vec<_> = examples.iter().filter(|e| e.domain == p).take(64).cloned().collect();
        model.train_step(&mut adam, &batch)?;
    }
    let before = model.clone();
    let batch: Vec<_> = examples.iter().filter(|e| e.domain == 1).take(config.batch_size).cloned().collect();
    model.train_step(&mut adam, &batch)?;

    let changed = checkpoint::changed_sections(&before, &model);
    let total = checkpoint::sections(&model).len();
    println!("{} of {total} sections changed after a domain-1 step:", changed.len());
    for name in &changed {
        println!("  {name}");
    }
    let leaked: Vec<_> = changed.iter().filter(|n| n.contains(".domain.") && !n.contains(".domain.1.")).collect();
    println!("other-domain sections changed: {}", leaked.len());
    Ok(())
}
