//! The online training loop: one optimizer step per incoming batch, replay
//! retrieval and reservoir updates around it, boundary evaluation into the
//! accuracy matrix, and CSV emission of every result artifact.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HyperParams, ModelConfig};
use crate::error::{Error, Result};
use crate::gradients::{GradAudit, ProxyGradientReport};
use crate::losses::{self, BatchView, ReplayView, TemperatureSchedule};
use crate::memory::{BufferEntry, MemoryBuffer};
use crate::metrics::{self, AccuracyMatrix};
use crate::model::{self, ForwardRecord, ModelParams};
use crate::seedmix::mix;
use crate::stream::{TaskData, TaskStream};

const TAG_MODEL: u64 = 0x3000;
const TAG_BUFFER: u64 = 0x3001;
const TAG_RETRIEVAL: u64 = 0x3002;

/// The training objective driving each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Er,
    Scr,
    CoupleSum,
    CoupleMixed,
    Pcr,
    PcrC,
    PcrCt,
    Hpcr,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Finetune,
        Method::Er,
        Method::Scr,
        Method::CoupleSum,
        Method::CoupleMixed,
        Method::Pcr,
        Method::PcrC,
        Method::PcrCt,
        Method::Hpcr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::Scr => "scr",
            Method::CoupleSum => "couple_sum",
            Method::CoupleMixed => "couple_mixed",
            Method::Pcr => "pcr",
            Method::PcrC => "pcr_c",
            Method::PcrCt => "pcr_ct",
            Method::Hpcr => "hpcr",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown method `{name}`")))
    }

    /// SCR pairs with the NCM classifier; every other method predicts with
    /// the softmax over proxies.
    pub fn default_classifier(self) -> Classifier {
        match self {
            Method::Scr => Classifier::Ncm,
            _ => Classifier::Softmax,
        }
    }

    /// Fine-tune ignores the buffer entirely.
    pub fn uses_replay(self) -> bool {
        !matches!(self, Method::Finetune)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Softmax,
    Ncm,
}

/// A fully resolved method configuration.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub method: Method,
    pub classifier: Classifier,
    pub hyper: HyperParams,
    pub schedule: TemperatureSchedule,
}

impl MethodSpec {
    /// Pairs the method with its default classifier.
    pub fn new(method: Method, hyper: HyperParams, schedule: TemperatureSchedule) -> Self {
        MethodSpec {
            method,
            classifier: method.default_classifier(),
            hyper,
            schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let expected = self.method.default_classifier();
        if self.classifier != expected {
            return Err(Error::Config(format!(
                "method {} pairs with the {:?} classifier",
                self.method.name(),
                expected
            )));
        }
        if self.method == Method::Scr && self.hyper.buffer_capacity == 0 {
            return Err(Error::Config(
                "scr needs a non-empty buffer for NCM inference".into(),
            ));
        }
        Ok(())
    }
}

/// One loss-log line per optimizer step.
#[derive(Debug, Clone)]
pub struct LossLogRow {
    pub step: u64,
    /// 1-based task index.
    pub task: usize,
    pub loss: f64,
    /// Scheduled temperature at this step (static tau for unscheduled methods).
    pub tau_s: f64,
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub matrix: AccuracyMatrix,
    /// A_T.
    pub final_accuracy: f64,
    /// AAA.
    pub anytime_accuracy: f64,
    /// F_T; undefined for single-task runs.
    pub forgetting: Option<f64>,
    pub loss_log: Vec<LossLogRow>,
    pub wall_time: Duration,
    pub seed: u64,
    pub audit: Option<ProxyGradientReport>,
    /// (step, 1-based task, mean accuracy over seen tasks); filled when
    /// per-step evaluation is enabled.
    pub learning_curve: Vec<(u64, usize, f64)>,
}

/// Run artifacts that outlive the result: the trained model, the buffer,
/// and the raw audit rows.
pub struct RunOutput {
    pub result: RunResult,
    pub params: ModelParams,
    pub buffer: MemoryBuffer,
    pub audit_rows: Option<GradAudit>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub grad_audit: bool,
    pub eval_per_step: bool,
}

/// Runs one full pass over the stream with the given method, evaluating on
/// every seen task at each task boundary.
pub fn run(
    stream: &mut TaskStream,
    model_cfg: &ModelConfig,
    spec: &MethodSpec,
    seed: u64,
    options: RunOptions,
) -> Result<RunOutput> {
    spec.validate()?;
    model_cfg.validate()?;
    if stream.feature_dim() != model_cfg.input_dim {
        return Err(Error::Config(format!(
            "stream features ({}) do not match model.input_dim ({})",
            stream.feature_dim(),
            model_cfg.input_dim
        )));
    }
    if stream.tasks().iter().any(|t| t.test.is_empty()) {
        return Err(Error::Config(
            "every task needs held-out test samples (stream.samples_per_class >= 5)".into(),
        ));
    }

    let start = Instant::now();
    let mut params = ModelParams::init(model_cfg, mix(seed, TAG_MODEL))?;
    let mut buffer = MemoryBuffer::new(spec.hyper.buffer_capacity, mix(seed, TAG_BUFFER));
    let mut retrieval_rng = ChaCha8Rng::seed_from_u64(mix(seed, TAG_RETRIEVAL));
    let mut audit = options.grad_audit.then(GradAudit::new);

    let mut matrix = AccuracyMatrix::new();
    let mut loss_log = Vec::new();
    let mut learning_curve = Vec::new();
    let mut step: u64 = 0;

    while let Some(batch) = stream.next_batch(spec.hyper.current_batch) {
        let task = batch.task;
        let labels: Vec<usize> = batch.samples.iter().map(|s| s.label).collect();
        params.ensure_registered(labels.iter().copied());

        let current_records: Vec<ForwardRecord> = batch
            .samples
            .iter()
            .map(|s| params.forward(&s.features))
            .collect::<Result<_>>()?;

        // Entries carry the pre-update logits and embedding of this step.
        let entries: Vec<BufferEntry> = batch
            .samples
            .iter()
            .zip(&current_records)
            .map(|(s, rec)| {
                let stored: Vec<(usize, f64)> = rec
                    .logits
                    .iter()
                    .enumerate()
                    .map(|(c, &o)| (params.class_of(c), o))
                    .collect();
                BufferEntry::new(s.clone(), stored, rec.z.clone())
            })
            .collect::<Result<_>>()?;

        let replay_entries = if spec.method.uses_replay() {
            buffer.random_retrieval(spec.hyper.replay_batch, &mut retrieval_rng)
        } else {
            Vec::new()
        };
        let replay_records: Vec<ForwardRecord> = replay_entries
            .iter()
            .map(|e| params.forward(&e.sample.features))
            .collect::<Result<_>>()?;

        let mut joint_records = current_records;
        let offset = joint_records.len();
        joint_records.extend(replay_records);
        let mut joint_labels = labels.clone();
        joint_labels.extend(replay_entries.iter().map(|e| e.sample.label));

        let joint = BatchView::new(&joint_records, &joint_labels);
        let replay = ReplayView::new(&joint_records[offset..], &replay_entries, offset);

        let loss = compute_loss(spec, &joint, &replay, &params, step)?;
        if let Some(audit) = audit.as_mut() {
            let per_class: Vec<(usize, f64)> = (0..params.num_classes())
                .map(|c| {
                    let g: f64 = loss.d_logits.iter().map(|row| row[c]).sum::<f64>() / params.tau;
                    (params.class_of(c), g)
                })
                .collect();
            audit.record_step(step, task, &per_class, &stream.tasks()[task].classes);
        }
        let grads = params.backward(&joint_records, &loss);
        params.sgd_step(&grads, spec.hyper.learning_rate)?;
        if spec.method.uses_replay() {
            buffer.reservoir_update(entries);
        }

        let tau_s = match spec.method {
            Method::PcrCt | Method::Hpcr => spec.schedule.tau_at(step),
            _ => params.tau,
        };
        loss_log.push(LossLogRow {
            step,
            task: task + 1,
            loss: loss.value,
            tau_s,
        });

        if options.eval_per_step && !(spec.classifier == Classifier::Ncm && buffer.is_empty()) {
            let row = evaluate(&params, spec.classifier, stream.tasks(), task, &buffer)?;
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            learning_curve.push((step, task + 1, mean));
        }
        step += 1;

        if batch.end_of_task {
            let row = evaluate(&params, spec.classifier, stream.tasks(), task, &buffer)?;
            matrix.push_row(row)?;
        }
    }

    if matrix.stages() == 0 {
        return Err(Error::Config(
            "the stream produced no completed tasks".into(),
        ));
    }
    let stages = matrix.stages();
    let final_accuracy = metrics::average_accuracy(&matrix, stages)?;
    let anytime_accuracy = metrics::averaged_anytime_accuracy(&matrix)?;
    let forgetting = if stages >= 2 {
        Some(metrics::forgetting(&matrix, stages)?)
    } else {
        None
    };

    let result = RunResult {
        matrix,
        final_accuracy,
        anytime_accuracy,
        forgetting,
        loss_log,
        wall_time: start.elapsed(),
        seed,
        audit: audit.as_ref().map(|a| a.report()),
        learning_curve,
    };
    Ok(RunOutput {
        result,
        params,
        buffer,
        audit_rows: audit,
    })
}

fn compute_loss(
    spec: &MethodSpec,
    joint: &BatchView,
    replay: &ReplayView,
    params: &ModelParams,
    step: u64,
) -> Result<crate::model::LossGrads> {
    match spec.method {
        Method::Finetune => losses::loss_finetune(joint, params),
        Method::Er => losses::loss_er(joint, params),
        Method::Scr => {
            if joint.len() < 2 {
                // A lone first sample has no pairs; fall back to its
                // proxy-free zero objective by skipping the step's loss.
                return Ok(crate::model::LossGrads::zeros(
                    joint.len(),
                    params.num_classes(),
                ));
            }
            losses::loss_scr(joint, params)
        }
        Method::CoupleSum => losses::loss_couple_sum(joint, params),
        Method::CoupleMixed => losses::loss_couple_mixed(joint, params),
        Method::Pcr => losses::loss_pcr(joint, params),
        Method::PcrC => losses::loss_pcr_c(joint, params, spec.hyper.n_min),
        Method::PcrCt => losses::loss_pcr_ct(joint, params, &spec.schedule, step, spec.hyper.n_min),
        Method::Hpcr => losses::loss_hpcr(joint, replay, params, &spec.schedule, step, &spec.hyper),
    }
}

/// Accuracy on each task's held-out split through `upto` (0-based), using
/// the method's classifier. NCM refits class means from the buffer under
/// the current parameters before predicting.
pub fn evaluate(
    params: &ModelParams,
    classifier: Classifier,
    tasks: &[TaskData],
    upto: usize,
    buffer: &MemoryBuffer,
) -> Result<Vec<f64>> {
    let ncm_state = match classifier {
        Classifier::Ncm => Some(model::ncm_fit(buffer, params)?),
        Classifier::Softmax => None,
    };
    let mut row = Vec::with_capacity(upto + 1);
    for task in &tasks[..=upto] {
        if task.test.is_empty() {
            return Err(Error::Domain(
                "cannot evaluate a task with no test samples".into(),
            ));
        }
        let mut correct = 0usize;
        for sample in &task.test {
            let rec = params.forward(&sample.features)?;
            let pred = match &ncm_state {
                Some(state) => model::ncm_predict(state, &rec.z)?,
                None => params.predict(&rec)?,
            };
            if pred == sample.label {
                correct += 1;
            }
        }
        row.push(correct as f64 / task.test.len() as f64);
    }
    Ok(row)
}

impl RunResult {
    /// Writes accuracy_matrix.csv, metrics.csv, loss_log.csv, and (when
    /// filled) learning_curve.csv into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.matrix.write_csv(&dir.join("accuracy_matrix.csv"))?;

        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
        writeln!(out, "A_T,AAA,F_T")?;
        writeln!(
            out,
            "{},{},{}",
            self.final_accuracy,
            self.anytime_accuracy,
            self.forgetting
                .map_or_else(|| "nan".to_string(), |f| f.to_string())
        )?;
        drop(out);

        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("loss_log.csv"))?);
        writeln!(out, "step,task,loss,tau_s")?;
        for row in &self.loss_log {
            writeln!(out, "{},{},{},{}", row.step, row.task, row.loss, row.tau_s)?;
        }
        drop(out);

        if !self.learning_curve.is_empty() {
            let mut out =
                std::io::BufWriter::new(std::fs::File::create(dir.join("learning_curve.csv"))?);
            writeln!(out, "step,task,mean_accuracy")?;
            for (step, task, acc) in &self.learning_curve {
                writeln!(out, "{step},{task},{acc}")?;
            }
        }
        Ok(())
    }
}

/// Embeddings of every held-out sample under the given parameters, for
/// offline visualization.
pub fn write_embeddings_csv(params: &ModelParams, tasks: &[TaskData], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dims: Vec<String> = (0..params.embedding_dim())
        .map(|k| format!("z{k}"))
        .collect();
    writeln!(out, "task,label,{}", dims.join(","))?;
    for (t, task) in tasks.iter().enumerate() {
        for sample in &task.test {
            let rec = params.forward(&sample.features)?;
            let zs: Vec<String> = rec.z.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{}", t + 1, sample.label, zs.join(","))?;
        }
    }
    Ok(())
}
