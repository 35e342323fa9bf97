//! Closed-form classifier gradients, a central finite-difference oracle, the
//! gradient-check suite that audits every loss against it, and the training
//! diagnostics (sum_y, relative penalty, cumulative proxy-gradient audit,
//! loss-landscape flatness probe).

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    class_counts, loss_couple_mixed, loss_couple_sum, loss_er, loss_finetune, loss_hpcr, loss_pcd,
    loss_pcr, loss_pcr_c, loss_pcr_ct, loss_scd, loss_scr, BatchClassCounts, BatchView,
    HyperParams, ReplayView, TemperatureSchedule,
};
use crate::memory::BufferEntry;
use crate::model::{ForwardRecord, LossGrads, ModelParams};
use crate::stream::LabeledSample;

/// Gradient of the plain cross-entropy w.r.t. the similarities <z, w_c>:
/// (p_y - 1)/tau at the label, p_c/tau elsewhere.
pub fn grad_softmax_closed_form(p: &[f64], y: usize, tau: f64) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(c, &pc)| if c == y { (pc - 1.0) / tau } else { pc / tau })
        .collect()
}

/// Count-weighted negative mass sum_y = sum_{c != y} k_c exp(o_c).
pub fn sum_y(logits: &[f64], counts: &BatchClassCounts, y: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(c, &o)| counts.k(c) as f64 * o.exp())
        .sum()
}

/// Closed-form PCR gradient w.r.t. the similarities <z, w_c>:
/// (k_y p*_y - 1)/tau at the label, (k_c p*_c)/tau for other present
/// classes, exactly 0 for absent ones. Factored through sum_y so a
/// single-class batch yields the zero vector exactly.
pub fn grad_pcr_closed_form(
    logits: &[f64],
    counts: &BatchClassCounts,
    y: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    if y >= logits.len() || counts.k(y) == 0 {
        return Err(Error::Domain(format!(
            "label column {y} absent from counts"
        )));
    }
    let mut m = f64::NEG_INFINITY;
    for (c, &o) in logits.iter().enumerate() {
        if counts.k(c) > 0 {
            m = m.max(o);
        }
    }
    let mut negatives = 0.0;
    for (c, &o) in logits.iter().enumerate() {
        if c != y && counts.k(c) > 0 {
            negatives += counts.k(c) as f64 * (o - m).exp();
        }
    }
    let total = negatives + counts.k(y) as f64 * (logits[y] - m).exp();
    let mut grad = vec![0.0; logits.len()];
    for (c, &o) in logits.iter().enumerate() {
        if counts.k(c) == 0 {
            continue;
        }
        grad[c] = if c == y {
            -(negatives / total) / tau
        } else {
            (counts.k(c) as f64 * (o - m).exp() / total) / tau
        };
    }
    Ok(grad)
}

/// Temperature-decoupled form: identical to the PCR gradient except the
/// leading divisor is the scheduled tau(s); p* itself is already fixed by
/// the logits, which carry the static temperature.
pub fn grad_pcr_ct_closed_form(
    logits: &[f64],
    counts: &BatchClassCounts,
    y: usize,
    tau_s: f64,
) -> Result<Vec<f64>> {
    grad_pcr_closed_form(logits, counts, y, tau_s)
}

/// Relative penalty on a negative proxy: the ratio of its gradient
/// magnitude to the anchor class's, r = k_c exp(o_c) / sum_{j != y} k_j exp(o_j).
/// Takes raw similarities so the tau dependence is explicit.
pub fn relative_penalty(
    sims: &[f64],
    counts: &BatchClassCounts,
    c: usize,
    y: usize,
    tau: f64,
) -> Result<f64> {
    if c == y {
        return Err(Error::Domain(
            "relative penalty is defined for negative classes only".into(),
        ));
    }
    if c >= sims.len() || y >= sims.len() {
        return Err(Error::Domain("class column out of range".into()));
    }
    let mut m = f64::NEG_INFINITY;
    for (j, &s) in sims.iter().enumerate() {
        if j != y && counts.k(j) > 0 {
            m = m.max(s / tau);
        }
    }
    if m == f64::NEG_INFINITY {
        return Err(Error::Domain(
            "no negative class present in the batch".into(),
        ));
    }
    let mut denom = 0.0;
    for (j, &s) in sims.iter().enumerate() {
        if j != y && counts.k(j) > 0 {
            denom += counts.k(j) as f64 * (s / tau - m).exp();
        }
    }
    Ok(counts.k(c) as f64 * (sims[c] / tau - m).exp() / denom)
}

/// Central finite differences, one coordinate at a time.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let fp = f(&x);
        x[i] = point[i] - h;
        let fm = f(&x);
        x[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Gradient-check error metric: the largest componentwise deviation scaled
/// by the gradient magnitude, max_i |a_i - n_i| / max(|a|_inf, |n|_inf, 1e-3).
///
/// Componentwise denominators would sit below the finite-difference noise
/// floor (~1e-10 for h = 1e-6 at double precision) on near-cancelled
/// entries, and a tighter scale floor would score that noise as error on
/// instances whose true gradient is identically zero (single present class,
/// or all embeddings coincident so the radial gradient projects away).
/// The 1e-3 floor therefore demands absolute agreement within 1e-8 when a
/// whole gradient is numerically zero.
pub fn max_scaled_deviation(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-3);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Default finite-difference step at double precision.
pub const FD_STEP: f64 = 1e-6;
/// Pass threshold on the scaled deviation.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub max_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub instances: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_error <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&GradCheckRow> {
        self.rows
            .iter()
            .filter(|r| r.max_error > self.tolerance)
            .collect()
    }
}

const LOSS_NAMES: [&str; 11] = [
    "finetune",
    "er",
    "scr",
    "couple_sum",
    "couple_mixed",
    "pcr",
    "pcr_c",
    "pcr_ct",
    "pcd",
    "scd",
    "hpcr",
];

/// One randomly drawn verification problem: a tiny extractor, a labeled
/// batch whose tail doubles as the replay slice, and stored logits and
/// embeddings for the distillation terms.
struct Instance {
    params: ModelParams,
    xs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    stored: Vec<BufferEntry>,
    replay_offset: usize,
    n_min: usize,
    schedule: TemperatureSchedule,
    step: u64,
    hp: HyperParams,
}

impl Instance {
    fn draw(rng: &mut ChaCha8Rng) -> Result<Instance> {
        loop {
            let input_dim = rng.gen_range(3..=5);
            let hidden = vec![rng.gen_range(4..=6), rng.gen_range(3..=5)];
            let embedding_dim = rng.gen_range(3..=4);
            // Moderate temperatures keep every softmax ratio well above the
            // finite-difference noise floor.
            let tau = rng.gen_range(0.4..1.2);
            let cfg = crate::config::ModelConfig {
                input_dim,
                hidden,
                embedding_dim,
                tau,
                proxy_init_sigma: 0.01,
            };
            let mut params = ModelParams::init(&cfg, rng.gen())?;
            let classes = rng.gen_range(2..=4);
            for c in 0..classes {
                let proxy = loop {
                    let p: Vec<f64> = (0..embedding_dim)
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect();
                    if p.iter().map(|v| v * v).sum::<f64>() >= 1e-2 {
                        break p;
                    }
                };
                params.register_class_with(c, proxy);
            }
            let n = rng.gen_range(4..=7);
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let labels: Vec<usize> = (0..n)
                .map(|_| rng.gen_range(0..params.num_classes()))
                .collect();

            // Stay clear of ReLU kinks and vanishing embeddings so central
            // differences see a smooth function.
            let records: Result<Vec<ForwardRecord>> =
                xs.iter().map(|x| params.forward(x)).collect();
            let Ok(records) = records else { continue };
            if records
                .iter()
                .any(|r| r.min_abs_hidden_preact() < 1e-3 || r.embedding_norm() < 5e-2)
            {
                continue;
            }

            let replay_offset = n - rng.gen_range(2..=3);
            let stored: Vec<BufferEntry> = labels[replay_offset..]
                .iter()
                .map(|&y| {
                    let stored_cols = rng.gen_range(1..=params.num_classes());
                    let logits: Vec<(usize, f64)> = (0..stored_cols)
                        .map(|c| (params.class_of(c), rng.gen_range(-2.0..2.0)))
                        .collect();
                    let raw: Vec<f64> = (0..params.embedding_dim())
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect();
                    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                    BufferEntry::new(
                        LabeledSample {
                            features: vec![0.0; input_dim],
                            label: y,
                        },
                        logits,
                        raw.iter().map(|v| v / norm).collect(),
                    )
                })
                .collect::<Result<_>>()?;

            let schedule = TemperatureSchedule::new(tau * 1.8, tau * 0.6, 500, tau)?;
            let hp = HyperParams {
                alpha: rng.gen_range(0.3..1.5),
                beta: rng.gen_range(0.3..1.5),
                n_min: if rng.gen_bool(0.5) { 1 } else { n + 1 },
                ..HyperParams::default()
            };
            return Ok(Instance {
                params,
                xs,
                labels,
                stored,
                replay_offset,
                n_min: hp.n_min,
                schedule,
                step: rng.gen_range(0..1000),
                hp,
            });
        }
    }

    fn loss(&self, name: &str, params: &ModelParams) -> Result<LossGrads> {
        let records: Result<Vec<ForwardRecord>> =
            self.xs.iter().map(|x| params.forward(x)).collect();
        let records = records?;
        let batch = BatchView::new(&records, &self.labels);
        let replay = ReplayView::new(
            &records[self.replay_offset..],
            &self.stored,
            self.replay_offset,
        );
        match name {
            "finetune" => loss_finetune(&batch, params),
            "er" => loss_er(&batch, params),
            "scr" => loss_scr(&batch, params),
            "couple_sum" => loss_couple_sum(&batch, params),
            "couple_mixed" => loss_couple_mixed(&batch, params),
            "pcr" => loss_pcr(&batch, params),
            "pcr_c" => loss_pcr_c(&batch, params, self.n_min),
            "pcr_ct" => loss_pcr_ct(&batch, params, &self.schedule, self.step, self.n_min),
            "pcd" => {
                let counts = class_counts(&batch, params)?;
                loss_pcd(&replay, &counts, batch.len(), params)
            }
            "scd" => loss_scd(&replay, batch.len(), params),
            "hpcr" => loss_hpcr(&batch, &replay, params, &self.schedule, self.step, &self.hp),
            other => Err(Error::Domain(format!("unknown loss {other}"))),
        }
    }
}

/// Checks one loss on one instance: analytic parameter gradient against
/// central finite differences over the full flattened parameter vector.
fn check_instance(inst: &Instance, name: &str) -> Result<f64> {
    let records: Result<Vec<ForwardRecord>> =
        inst.xs.iter().map(|x| inst.params.forward(x)).collect();
    let records = records?;
    let lg = inst.loss(name, &inst.params)?;
    let analytic = inst.params.backward(&records, &lg).flatten();

    let point = inst.params.flatten();
    let mut scratch = inst.params.clone();
    let numeric = finite_difference(
        |flat| {
            scratch.set_from_flat(flat).expect("matching layout");
            inst.loss(name, &scratch)
                .map(|l| l.value)
                .unwrap_or(f64::NAN)
        },
        &point,
        FD_STEP,
    )?;
    Ok(max_scaled_deviation(&analytic, &numeric))
}

/// Runs the whole closed-form and loss-family verification suite.
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rows = Vec::new();

    // Network losses: analytic backward vs finite differences in parameter space.
    for name in LOSS_NAMES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let mut max_err = 0.0f64;
        for _ in 0..instances {
            let inst = Instance::draw(&mut rng)?;
            max_err = max_err.max(check_instance(&inst, name)?);
        }
        rows.push(GradCheckRow {
            name: name.into(),
            max_error: max_err,
        });
    }

    // Closed forms: analytic formulas vs finite differences in similarity space.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    let mut err_softmax = 0.0f64;
    let mut err_pcr = 0.0f64;
    let mut err_pcr_ct = 0.0f64;
    for _ in 0..instances {
        let classes = rng.gen_range(2..=6);
        let tau = rng.gen_range(0.4..1.5);
        let tau_s = rng.gen_range(0.4..1.5);
        let sims: Vec<f64> = (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut counts_raw: Vec<usize> = (0..classes).map(|_| rng.gen_range(0..4)).collect();
        let y = rng.gen_range(0..classes);
        counts_raw[y] = counts_raw[y].max(1);
        let counts = BatchClassCounts::from_raw(counts_raw.clone());

        let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
        let p = crate::model::softmax_prob(&logits)?;
        let analytic = grad_softmax_closed_form(&p, y, tau);
        let numeric = finite_difference(
            |v| {
                let o: Vec<f64> = v.iter().map(|s| s / tau).collect();
                let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = o.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
                lse - o[y]
            },
            &sims,
            FD_STEP,
        )?;
        err_softmax = err_softmax.max(max_scaled_deviation(&analytic, &numeric));

        let analytic = grad_pcr_closed_form(&logits, &counts, y, tau)?;
        let pcr_value = |v: &[f64]| {
            let o: Vec<f64> = v.iter().map(|s| s / tau).collect();
            let mut m = f64::NEG_INFINITY;
            for (c, &oc) in o.iter().enumerate() {
                if counts_raw[c] > 0 {
                    m = m.max(oc);
                }
            }
            let denom: f64 = o
                .iter()
                .enumerate()
                .filter(|&(c, _)| counts_raw[c] > 0)
                .map(|(c, &oc)| counts_raw[c] as f64 * (oc - m).exp())
                .sum();
            denom.ln() + m - o[y]
        };
        let numeric = finite_difference(pcr_value, &sims, FD_STEP)?;
        err_pcr = err_pcr.max(max_scaled_deviation(&analytic, &numeric));

        let analytic = grad_pcr_ct_closed_form(&logits, &counts, y, tau_s)?;
        let scale = tau / tau_s;
        let numeric = finite_difference(|v| scale * pcr_value(v), &sims, FD_STEP)?;
        err_pcr_ct = err_pcr_ct.max(max_scaled_deviation(&analytic, &numeric));
    }
    rows.push(GradCheckRow {
        name: "softmax_closed_form".into(),
        max_error: err_softmax,
    });
    rows.push(GradCheckRow {
        name: "pcr_closed_form".into(),
        max_error: err_pcr,
    });
    rows.push(GradCheckRow {
        name: "pcr_ct_closed_form".into(),
        max_error: err_pcr_ct,
    });

    Ok(GradCheckReport {
        rows,
        instances,
        tolerance: FD_TOLERANCE,
    })
}

/// Mean absolute loss change under uniform parameter noise: a probe for
/// landscape flatness around a trained model.
pub fn flatness_probe<F>(
    params: &ModelParams,
    loss: F,
    noise: f64,
    repeats: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let base = loss(params)?;
    let point = params.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = params.clone();
    let mut total = 0.0;
    for _ in 0..repeats {
        let jittered: Vec<f64> = point
            .iter()
            .map(|v| v + rng.gen_range(-noise..=noise))
            .collect();
        scratch.set_from_flat(&jittered)?;
        total += (loss(&scratch)? - base).abs();
    }
    Ok(total / repeats.max(1) as f64)
}

/// Per-task cumulative proxy-gradient totals, positive and negative parts
/// split between the task's own (new) classes and earlier (old) ones.
#[derive(Debug, Clone, Default)]
pub struct TaskGradientTotals {
    pub task: usize,
    pub positive_old: f64,
    pub negative_old: f64,
    pub positive_new: f64,
    pub negative_new: f64,
}

/// Rollup of a full training run's proxy-gradient traffic.
#[derive(Debug, Clone, Default)]
pub struct ProxyGradientReport {
    pub per_task: Vec<TaskGradientTotals>,
    pub total_positive: f64,
    pub total_negative: f64,
}

#[derive(Debug, Clone)]
struct AuditRow {
    step: u64,
    task: usize,
    class: usize,
    grad: f64,
    is_new: bool,
}

/// Streaming accumulator fed by the trainer once per optimizer step.
#[derive(Debug, Clone, Default)]
pub struct GradAudit {
    rows: Vec<AuditRow>,
}

impl GradAudit {
    pub fn new() -> Self {
        GradAudit::default()
    }

    /// Records one step's summed per-class gradients w.r.t. <z, w_c>.
    /// `new_classes` are the classes introduced by the current task.
    pub fn record_step(
        &mut self,
        step: u64,
        task: usize,
        per_class: &[(usize, f64)],
        new_classes: &[usize],
    ) {
        for &(class, grad) in per_class {
            if grad == 0.0 {
                continue;
            }
            self.rows.push(AuditRow {
                step,
                task,
                class,
                grad,
                is_new: new_classes.contains(&class),
            });
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn report(&self) -> ProxyGradientReport {
        let mut report = ProxyGradientReport::default();
        for row in &self.rows {
            while report.per_task.len() <= row.task {
                report.per_task.push(TaskGradientTotals {
                    task: report.per_task.len(),
                    ..TaskGradientTotals::default()
                });
            }
            let totals = &mut report.per_task[row.task];
            let slot = match (row.is_new, row.grad > 0.0) {
                (true, true) => &mut totals.positive_new,
                (true, false) => &mut totals.negative_new,
                (false, true) => &mut totals.positive_old,
                (false, false) => &mut totals.negative_old,
            };
            *slot += row.grad.abs();
            if row.grad > 0.0 {
                report.total_positive += row.grad;
            } else {
                report.total_negative += row.grad.abs();
            }
        }
        report
    }

    /// CSV rows `step,task,class,grad,sign` for offline analysis.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,task,class,grad,sign")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.task + 1,
                r.class,
                r.grad,
                if r.grad > 0.0 { "pos" } else { "neg" }
            )?;
        }
        Ok(())
    }
}
