//! Synthetic disjoint-task streams: Gaussian class clusters served as a
//! single-pass sequence of mini-batches with a held-out test split per class.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::StreamConfig;
use crate::error::{Error, Result};
use crate::seedmix::mix;

const TAG_MEANS: u64 = 0x01;
const TAG_CLASS_ORDER: u64 = 0x02;
const TAG_CLASS_SAMPLES: u64 = 0x1000;
const TAG_TASK_ORDER: u64 = 0x2000;

/// One stream element: a feature vector plus its integer class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// All data belonging to one task: its class set and both splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    /// Global class ids owned by this task; disjoint across tasks.
    pub classes: Vec<usize>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// A batch of current samples, with the task boundary signaled alongside.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    /// 0-based task index this batch belongs to.
    pub task: usize,
    pub samples: Vec<LabeledSample>,
    /// True when this batch exhausts its task (batches never straddle tasks).
    pub end_of_task: bool,
}

/// An ordered sequence of disjoint tasks consumed in a single pass.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
    feature_dim: usize,
    cursor: (usize, usize),
    classes_seen: Vec<usize>,
    seed: u64,
}

/// Generates a stream from the config. Class-cluster means are drawn
/// uniformly from a cube, classes are shuffled before division into tasks,
/// and each class contributes a fixed 20% held-out test split drawn before
/// the training split.
pub fn make_task_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let total_classes = cfg.total_classes();
    let d = cfg.feature_dim;

    let mut means_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_MEANS));
    let mean_dist = Uniform::new_inclusive(-cfg.mean_scale, cfg.mean_scale);
    let means: Vec<Vec<f64>> = (0..total_classes)
        .map(|_| (0..d).map(|_| mean_dist.sample(&mut means_rng)).collect())
        .collect();

    let mut order: Vec<usize> = (0..total_classes).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_CLASS_ORDER));
    order.shuffle(&mut order_rng);

    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("stream.noise_sigma: {e}")))?;
    let n_test = cfg.samples_per_class / 5;

    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let classes: Vec<usize> =
            order[t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task].to_vec();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_CLASS_SAMPLES + c as u64));
            for i in 0..cfg.samples_per_class {
                let features: Vec<f64> = (0..d)
                    .map(|j| means[c][j] + noise.sample(&mut rng))
                    .collect();
                let sample = LabeledSample { features, label: c };
                if i < n_test {
                    test.push(sample);
                } else {
                    train.push(sample);
                }
            }
        }
        let mut task_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_TASK_ORDER + t as u64));
        train.shuffle(&mut task_rng);
        tasks.push(TaskData {
            classes,
            train,
            test,
        });
    }

    Ok(TaskStream {
        tasks,
        feature_dim: d,
        cursor: (0, 0),
        classes_seen: Vec::new(),
        seed: cfg.seed,
    })
}

impl TaskStream {
    /// Serves up to `size` samples in stream order, never re-serving a sample
    /// and never crossing a task boundary. Returns `None` once exhausted.
    pub fn next_batch(&mut self, size: usize) -> Option<MiniBatch> {
        let size = size.max(1);
        loop {
            let (t, offset) = self.cursor;
            if t >= self.tasks.len() {
                return None;
            }
            let task = &self.tasks[t];
            if offset >= task.train.len() {
                // Degenerate empty task: skip forward.
                self.cursor = (t + 1, 0);
                continue;
            }
            if offset == 0 {
                for &c in &task.classes {
                    if !self.classes_seen.contains(&c) {
                        self.classes_seen.push(c);
                    }
                }
            }
            let end = (offset + size).min(task.train.len());
            let samples = task.train[offset..end].to_vec();
            let end_of_task = end == task.train.len();
            self.cursor = if end_of_task { (t + 1, 0) } else { (t, end) };
            return Some(MiniBatch {
                task: t,
                samples,
                end_of_task,
            });
        }
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Ordered union of class ids over the tasks served so far.
    pub fn classes_seen(&self) -> &[usize] {
        &self.classes_seen
    }

    /// Writes the full generated dataset as `f0,...,f{d-1},label,task,split`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.feature_dim).map(|j| format!("f{j}")).collect();
        writeln!(out, "{},label,task,split", header.join(","))?;
        for (t, task) in self.tasks.iter().enumerate() {
            for (samples, split) in [(&task.train, "train"), (&task.test, "test")] {
                for s in samples.iter() {
                    let feats: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
                    writeln!(out, "{},{},{},{}", feats.join(","), s.label, t + 1, split)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> StreamConfig {
        StreamConfig {
            num_tasks: 5,
            classes_per_task: 2,
            samples_per_class: 10,
            feature_dim: 4,
            mean_scale: 3.0,
            noise_sigma: 0.6,
            batch_size: 4,
            seed: 42,
        }
    }

    #[test]
    fn tasks_cover_all_classes_disjointly() {
        let stream = make_task_stream(&small_cfg()).unwrap();
        let mut seen = [false; 10];
        for task in stream.tasks() {
            for &c in &task.classes {
                assert!(!seen[c], "class {c} appears in two tasks");
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let a = make_task_stream(&small_cfg()).unwrap();
        let b = make_task_stream(&small_cfg()).unwrap();
        for (ta, tb) in a.tasks().iter().zip(b.tasks()) {
            assert_eq!(ta.classes, tb.classes);
            assert_eq!(ta.train, tb.train);
            assert_eq!(ta.test, tb.test);
        }
    }

    #[test]
    fn tiny_stream_has_no_test_split() {
        let cfg = StreamConfig {
            num_tasks: 1,
            classes_per_task: 1,
            samples_per_class: 3,
            ..small_cfg()
        };
        let stream = make_task_stream(&cfg).unwrap();
        assert_eq!(stream.tasks().len(), 1);
        assert_eq!(stream.tasks()[0].train.len(), 3);
        assert!(stream.tasks()[0].test.is_empty());
        let label = stream.tasks()[0].train[0].label;
        assert!(stream.tasks()[0].train.iter().all(|s| s.label == label));
    }

    #[test]
    fn zero_config_is_rejected() {
        let cfg = StreamConfig {
            num_tasks: 0,
            ..small_cfg()
        };
        assert!(make_task_stream(&cfg).is_err());
    }

    #[test]
    fn batches_are_single_pass_and_task_bounded() {
        // 10 samples/class, 2 classes/task => 16 train per task (2 test each).
        let mut stream = make_task_stream(&small_cfg()).unwrap();
        let expected: Vec<LabeledSample> = stream
            .tasks()
            .iter()
            .flat_map(|t| t.train.clone())
            .collect();
        let mut served = Vec::new();
        let mut boundaries = 0;
        while let Some(batch) = stream.next_batch(5) {
            assert!(batch.samples.len() <= 5);
            if batch.end_of_task {
                boundaries += 1;
            }
            served.extend(batch.samples);
        }
        assert_eq!(boundaries, 5);
        assert_eq!(served, expected);
        assert!(stream.next_batch(5).is_none());
    }

    #[test]
    fn short_final_batch_signals_boundary() {
        let mut stream = make_task_stream(&small_cfg()).unwrap();
        // Task train size is 16; batches of 10 give 10 then 6 + boundary.
        let b1 = stream.next_batch(10).unwrap();
        assert_eq!(b1.samples.len(), 10);
        assert!(!b1.end_of_task);
        let b2 = stream.next_batch(10).unwrap();
        assert_eq!(b2.samples.len(), 6);
        assert!(b2.end_of_task);
    }

    #[test]
    fn classes_seen_grows_in_task_order() {
        let mut stream = make_task_stream(&small_cfg()).unwrap();
        assert!(stream.classes_seen().is_empty());
        stream.next_batch(100);
        assert_eq!(stream.classes_seen().len(), 2);
        while stream.next_batch(100).is_some() {}
        assert_eq!(stream.classes_seen().len(), 10);
    }

    proptest! {
        #[test]
        fn served_multiset_equals_training_set(
            batch in 1usize..9,
            seed in 0u64..1000,
            spc in 5usize..20,
        ) {
            let cfg = StreamConfig { seed, samples_per_class: spc, ..small_cfg() };
            let mut stream = make_task_stream(&cfg).unwrap();
            let expected: Vec<LabeledSample> =
                stream.tasks().iter().flat_map(|t| t.train.clone()).collect();
            let mut served = Vec::new();
            while let Some(b) = stream.next_batch(batch) {
                served.extend(b.samples);
            }
            prop_assert_eq!(served, expected);
        }

        #[test]
        fn all_features_finite(seed in 0u64..50) {
            let cfg = StreamConfig { seed, ..small_cfg() };
            let stream = make_task_stream(&cfg).unwrap();
            for task in stream.tasks() {
                for s in task.train.iter().chain(task.test.iter()) {
                    prop_assert_eq!(s.features.len(), 4);
                    prop_assert!(s.features.iter().all(|v| v.is_finite()));
                }
            }
        }
    }
}
