//! Synthetic multi-domain data: the example type, the text dataset format,
//! the generator and the shuffle-buffer stream.

mod format;
mod generator;
mod stream;

pub use format::{format_line, parse_line, read_dataset, read_dataset_from, write_dataset, write_dataset_to};
pub use generator::{default_shift, generate, DomainProfile, GeneratorConfig, GroundTruth, PRODUCTION_PROFILE};
pub use stream::{
    chronological_batches, rolling_mix_distance, stream_batches, Batch, BatchStream, ShuffleBuffer,
};


/// One impression: sparse features, click label and 1-based domain.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Example {
    pub domain: usize,
    pub clicked: bool,
    pub behavior: Vec<usize>,
    pub user: usize,
    pub item: usize,
    pub context: usize,
}

impl Example {
    pub fn label(&self) -> f64 {
        if self.clicked {
            1.0
        } else {
            0.0
        }
    }

    /// Feature ids per field in the pooled order: behavior, user profile,
    /// target item, context.
    pub fn field_ids(&self) -> [&[usize]; 4] {
        [
            &self.behavior,
            std::slice::from_ref(&self.user),
            std::slice::from_ref(&self.item),
            std::slice::from_ref(&self.context),
        ]
    }
}
