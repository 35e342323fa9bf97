//! Build a synthetic disjoint-task stream, walk it batch by batch, and
//! export the full dataset as CSV.

use hpcr::config::StreamConfig;
use hpcr::stream::make_task_stream;

fn main() -> hpcr::Result<()> {
    let cfg = StreamConfig {
        num_tasks: 5,
        classes_per_task: 2,
        samples_per_class: 50,
        feature_dim: 8,
        mean_scale: 3.0,
        noise_sigma: 0.6,
        batch_size: 10,
        seed: 7,
    };
    let mut stream = make_task_stream(&cfg)?;

    println!("tasks and their class sets:");
    for (t, task) in stream.tasks().iter().enumerate() {
        println!(
            "  task {}: classes {:?} ({} train / {} test samples)",
            t + 1,
            task.classes,
            task.train.len(),
            task.test.len()
        );
    }

    let mut batches = 0;
    let mut samples = 0;
    let mut boundaries = 0;
    while let Some(batch) = stream.next_batch(cfg.batch_size) {
        batches += 1;
        samples += batch.samples.len();
        if batch.end_of_task {
            boundaries += 1;
            println!(
                "  batch {batches}: task {} finished after {samples} total samples",
                batch.task + 1
            );
        }
    }
    println!("served {samples} samples in {batches} batches, {boundaries} task boundaries");
    println!(
        "single pass: a second call yields {:?}",
        stream.next_batch(10).map(|_| ())
    );

    let out = std::env::temp_dir().join("hpcr_dataset.csv");
    stream.export_csv(&out)?;
    println!("dataset exported to {}", out.display());
    Ok(())
}
