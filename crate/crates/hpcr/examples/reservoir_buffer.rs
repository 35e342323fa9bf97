//! Watch the reservoir buffer keep every streamed item with probability
//! M/n, then sample replay batches from it.

use hpcr::memory::{BufferEntry, MemoryBuffer};
use hpcr::stream::LabeledSample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn entry(label: usize) -> BufferEntry {
    BufferEntry::new(
        LabeledSample {
            features: vec![label as f64],
            label,
        },
        vec![(0, 0.0)],
        vec![1.0],
    )
    .unwrap()
}

fn main() -> hpcr::Result<()> {
    // Fill phase: everything fits until capacity.
    let mut buf = MemoryBuffer::new(20, 1);
    buf.reservoir_update((0..20).map(entry).collect());
    println!(
        "after 20 offers: {} / {} slots used",
        buf.len(),
        buf.capacity()
    );

    // Streaming phase: 480 more items, size stays fixed.
    buf.reservoir_update((20..500).map(entry).collect());
    println!(
        "after 500 offers: {} entries, {} seen",
        buf.len(),
        buf.seen_count()
    );

    // Monte Carlo check of the retention probability M/n = 0.04.
    let (m, n, trials) = (20usize, 500usize, 2000u64);
    let mut counts = vec![0u32; n];
    for t in 0..trials {
        let mut b = MemoryBuffer::new(m, 1000 + t);
        b.reservoir_update((0..n).map(entry).collect());
        for e in b.entries() {
            counts[e.sample.label] += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let mean = freqs.iter().sum::<f64>() / n as f64;
    let spread = freqs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - freqs.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "inclusion frequency over {trials} trials: mean {:.4} (target {:.4}), spread {:.4}",
        mean,
        m as f64 / n as f64,
        spread
    );

    // Retrieval is uniform without replacement and leaves the buffer alone.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = buf.random_retrieval(10, &mut rng);
    let labels: Vec<usize> = batch.iter().map(|e| e.sample.label).collect();
    println!("replay batch of {}: labels {:?}", batch.len(), labels);
    println!("buffer still holds {} entries", buf.len());

    let snapshot = std::env::temp_dir().join("hpcr_buffer_snapshot.csv");
    buf.export_csv(&snapshot)?;
    println!("snapshot written to {}", snapshot.display());
    Ok(())
}
