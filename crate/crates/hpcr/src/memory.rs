//! Fixed-capacity replay buffer: reservoir updates give every streamed item
//! an equal retention probability M/n; retrieval is uniform without
//! replacement and leaves the buffer unchanged.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stream::LabeledSample;

/// A stored sample together with the logits and embedding captured by the
/// forward pass of the step that stored it.
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub sample: LabeledSample,
    /// `(class id, logit)` over the classes registered at storage time.
    pub stored_logits: Vec<(usize, f64)>,
    /// Unit-norm embedding at storage time.
    pub stored_embedding: Vec<f64>,
}

impl BufferEntry {
    pub fn new(
        sample: LabeledSample,
        stored_logits: Vec<(usize, f64)>,
        stored_embedding: Vec<f64>,
    ) -> Result<Self> {
        let norm = stored_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "stored embedding must be unit-norm, got {norm}"
            )));
        }
        Ok(BufferEntry {
            sample,
            stored_logits,
            stored_embedding,
        })
    }

    /// Number of classes registered when this entry was stored.
    pub fn stored_num_classes(&self) -> usize {
        self.stored_logits.len()
    }
}

/// Reservoir-sampled memory of at most `capacity` entries.
#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        MemoryBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Count of all items ever offered.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Classic reservoir sampling: the n-th offered item (1-based) replaces a
    /// uniformly drawn slot r in [0, n) iff r < capacity.
    pub fn reservoir_update(&mut self, batch: Vec<BufferEntry>) {
        for entry in batch {
            self.seen += 1;
            if self.capacity == 0 {
                continue;
            }
            if self.entries.len() < self.capacity {
                self.entries.push(entry);
            } else {
                let r = self.rng.gen_range(0..self.seen);
                if (r as usize) < self.capacity {
                    self.entries[r as usize] = entry;
                }
            }
        }
    }

    /// Uniform sample of min(m, len) distinct entries; the buffer itself is
    /// not modified, so callers own the retrieval RNG.
    pub fn random_retrieval<R: Rng>(&self, m: usize, rng: &mut R) -> Vec<BufferEntry> {
        let amount = m.min(self.entries.len());
        if amount == 0 {
            return Vec::new();
        }
        rand::seq::index::sample(rng, self.entries.len(), amount)
            .iter()
            .map(|i| self.entries[i].clone())
            .collect()
    }

    /// Debug snapshot: `index,label,stored_num_classes`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "index,label,stored_num_classes")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(out, "{i},{},{}", e.sample.label, e.stored_num_classes())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(label: usize, tag: f64) -> BufferEntry {
        BufferEntry::new(
            LabeledSample {
                features: vec![tag],
                label,
            },
            vec![(0, 0.0)],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn under_capacity_stores_everything() {
        let mut buf = MemoryBuffer::new(5, 0);
        buf.reservoir_update((0..3).map(|i| entry(i, i as f64)).collect());
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.seen_count(), 3);
        let labels: Vec<usize> = buf.entries().iter().map(|e| e.sample.label).collect();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn replacement_path_keeps_new_item() {
        // Pick a seed whose first draw in [0,2) is 0, forcing b to evict a.
        let seed = (0..100)
            .find(|&s| rand::Rng::gen_range(&mut ChaCha8Rng::seed_from_u64(s), 0..2u64) == 0)
            .expect("some seed draws 0");
        let mut buf = MemoryBuffer::new(1, seed);
        buf.reservoir_update(vec![entry(0, 0.0)]);
        buf.reservoir_update(vec![entry(1, 1.0)]);
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.entries()[0].sample.label, 1);
    }

    #[test]
    fn zero_capacity_never_stores() {
        let mut buf = MemoryBuffer::new(0, 0);
        buf.reservoir_update((0..10).map(|i| entry(i, 0.0)).collect());
        assert_eq!(buf.len(), 0);
        assert_eq!(buf.seen_count(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.random_retrieval(4, &mut rng).is_empty());
    }

    #[test]
    fn retrieval_of_full_buffer_is_a_permutation() {
        let mut buf = MemoryBuffer::new(10, 1);
        buf.reservoir_update((0..10).map(|i| entry(i, 0.0)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let got = buf.random_retrieval(10, &mut rng);
        let mut labels: Vec<usize> = got.iter().map(|e| e.sample.label).collect();
        labels.sort_unstable();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn retrieval_has_no_duplicates() {
        let mut buf = MemoryBuffer::new(20, 3);
        buf.reservoir_update((0..20).map(|i| entry(i, 0.0)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let got = buf.random_retrieval(7, &mut rng);
            let mut labels: Vec<usize> = got.iter().map(|e| e.sample.label).collect();
            labels.sort_unstable();
            labels.dedup();
            assert_eq!(labels.len(), 7);
        }
    }

    #[test]
    fn non_unit_embedding_is_rejected() {
        let bad = BufferEntry::new(
            LabeledSample {
                features: vec![0.0],
                label: 0,
            },
            vec![],
            vec![0.5, 0.5],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        // Desk-size Monte Carlo oracle: M=10 over n=50, expected p=0.2.
        let (m, n, trials) = (10usize, 50usize, 4000u64);
        let mut counts = vec![0u32; n];
        for t in 0..trials {
            let mut buf = MemoryBuffer::new(m, 9000 + t);
            buf.reservoir_update((0..n).map(|i| entry(i, 0.0)).collect());
            for e in buf.entries() {
                counts[e.sample.label] += 1;
            }
        }
        let p = m as f64 / n as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.5 * sigma,
                "item {i}: freq {freq} outside 3.5 sigma of {p}"
            );
        }
    }

    #[test]
    fn retrieval_frequency_is_uniform() {
        let mut buf = MemoryBuffer::new(50, 11);
        buf.reservoir_update((0..50).map(|i| entry(i, 0.0)).collect());
        let (m, trials) = (5usize, 5000u64);
        let mut counts = [0u32; 50];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..trials {
            for e in buf.random_retrieval(m, &mut rng) {
                counts[e.sample.label] += 1;
            }
        }
        let p = m as f64 / 50.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.5 * sigma,
                "entry {i}: freq {freq} outside 3.5 sigma of {p}"
            );
        }
    }

    proptest! {
        #[test]
        fn capacity_is_never_exceeded(m in 0usize..12, n in 0usize..60, seed in 0u64..100) {
            let mut buf = MemoryBuffer::new(m, seed);
            buf.reservoir_update((0..n).map(|i| entry(i, 0.0)).collect());
            prop_assert_eq!(buf.len(), n.min(m));
            prop_assert_eq!(buf.seen_count(), n as u64);
        }
    }
}
