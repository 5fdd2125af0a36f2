//! Single-domain mini-batches from an arrival-ordered stream.
//!
//! A [`ShuffleBuffer`] holds a sliding window of recent arrivals. Each batch
//! picks a domain with probability proportional to its share of the buffer
//! and draws up to `batch_size` of that domain's buffered examples uniformly
//! without replacement.

use std::collections::BTreeMap;

use super::Example;
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// A single-domain mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub domain: usize,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ShuffleBuffer {
    capacity: usize,
    by_domain: BTreeMap<usize, Vec<Example>>,
    len: usize,
    rng: Rng,
}

impl ShuffleBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            by_domain: BTreeMap::new(),
            len: 0,
            rng: Rng::derived(seed, 0xb0ff_e500),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.capacity
    }

    /// Buffered example count per domain.
    pub fn domain_counts(&self) -> BTreeMap<usize, usize> {
        self.by_domain.iter().map(|(&d, v)| (d, v.len())).collect()
    }

    /// Adds an arrival; fails when the buffer is full.
    pub fn push(&mut self, ex: Example) -> Result<()> {
        if self.is_full() {
            return Err(Error::Protocol(format!(
                "shuffle buffer full at capacity {}",
                self.capacity
            )));
        }
        self.by_domain.entry(ex.domain).or_default().push(ex);
        self.len += 1;
        Ok(())
    }

    /// Removes and returns one batch. Domains holding a single example are
    /// only eligible when `draining`, so batches have at least two examples
    /// until the stream ends.
    pub fn pop_batch(&mut self, batch_size: usize, draining: bool) -> Option<Batch> {
        let min = if draining { 1 } else { 2 };
        let eligible: Vec<(usize, usize)> = self
            .by_domain
            .iter()
            .filter(|(_, v)| v.len() >= min)
            .map(|(&d, v)| (d, v.len()))
            .collect();
        if eligible.is_empty() {
            return None;
        }
        let mut acc = 0.0;
        let cdf: Vec<f64> = eligible
            .iter()
            .map(|&(_, n)| {
                acc += n as f64;
                acc
            })
            .collect();
        let domain = eligible[self.rng.categorical(&cdf)].0;
        let pool = self.by_domain.get_mut(&domain).expect("eligible domain");
        let take = batch_size.min(pool.len());
        let mut examples = Vec::with_capacity(take);
        for _ in 0..take {
            let i = self.rng.below(pool.len());
            examples.push(pool.swap_remove(i));
        }
        if pool.is_empty() {
            self.by_domain.remove(&domain);
        }
        self.len -= take;
        Some(Batch { domain, examples })
    }
}

/// Iterator returned by [`stream_batches`].
pub struct BatchStream<I: Iterator<Item = Example>> {
    source: I,
    buffer: ShuffleBuffer,
    batch_size: usize,
    exhausted: bool,
}

impl<I: Iterator<Item = Example>> Iterator for BatchStream<I> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while !self.exhausted && !self.buffer.is_full() {
            match self.source.next() {
                Some(ex) => self.buffer.push(ex).expect("buffer has room"),
                None => self.exhausted = true,
            }
        }
        if let Some(batch) = self.buffer.pop_batch(self.batch_size, self.exhausted) {
            return Some(batch);
        }
        // A full buffer of singleton domains cannot form a batch of two;
        // release one example so the stream keeps moving.
        self.buffer.pop_batch(self.batch_size, true)
    }
}

/// Streams `source` through `buffer` as single-domain batches.
pub fn stream_batches<I>(source: I, buffer: ShuffleBuffer, batch_size: usize) -> Result<BatchStream<I::IntoIter>>
where
    I: IntoIterator<Item = Example>,
{
    if batch_size == 0 || batch_size > buffer.capacity() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={}",
            buffer.capacity()
        )));
    }
    Ok(BatchStream {
        source: source.into_iter(),
        buffer,
        batch_size,
        exhausted: false,
    })
}

/// No-buffer baseline: consecutive arrivals, cut whenever the batch is full
/// or the domain changes.
pub fn chronological_batches(examples: &[Example], batch_size: usize) -> Vec<Batch> {
    let mut out: Vec<Batch> = Vec::new();
    for ex in examples {
        match out.last_mut() {
            Some(b) if b.domain == ex.domain && b.len() < batch_size => b.examples.push(ex.clone()),
            _ => out.push(Batch {
                domain: ex.domain,
                examples: vec![ex.clone()],
            }),
        }
    }
    out
}

/// Mean total-variation distance between the domain mix of every run of
/// `window` consecutive batches and the overall mix of all batches.
pub fn rolling_mix_distance(batches: &[Batch], num_domains: usize, window: usize) -> f64 {
    let count = |bs: &[Batch]| {
        let mut c = vec![0.0; num_domains];
        for b in bs {
            c[b.domain - 1] += b.len() as f64;
        }
        c
    };
    let tv = |c: &[f64], g: &[f64]| {
        let (tc, tg): (f64, f64) = (c.iter().sum(), g.iter().sum());
        0.5 * c.iter().zip(g).map(|(a, b)| (a / tc - b / tg).abs()).sum::<f64>()
    };
    let global = count(batches);
    let window = window.clamp(1, batches.len().max(1));
    let mut current = count(&batches[..window.min(batches.len())]);
    let mut total = tv(&current, &global);
    let mut positions = 1;
    for i in window..batches.len() {
        current[batches[i].domain - 1] += batches[i].len() as f64;
        current[batches[i - window].domain - 1] -= batches[i - window].len() as f64;
        total += tv(&current, &global);
        positions += 1;
    }
    total / positions as f64
}
