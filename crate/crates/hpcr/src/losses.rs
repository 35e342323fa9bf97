//! The full objective family: cross-entropy replay, supervised-contrastive
//! replay, the two coupled baselines, proxy-based contrastive replay and its
//! gated/temperature variants, both distillation terms, and their combination.
//!
//! Every loss returns its scalar value together with per-logit and per-pair
//! gradients (`LossGrads`); `ModelParams::backward` chains those into
//! parameter space. All log-sum-exp computations subtract the running max.

use crate::error::{Error, Result};
use crate::memory::BufferEntry;
use crate::model::{ForwardRecord, LossGrads, ModelParams};

/// A forwarded batch: records plus class-id labels, index-aligned.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub records: &'a [ForwardRecord],
    pub labels: &'a [usize],
}

impl<'a> BatchView<'a> {
    pub fn new(records: &'a [ForwardRecord], labels: &'a [usize]) -> Self {
        BatchView { records, labels }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn validate(&self, params: &ModelParams) -> Result<Vec<usize>> {
        if self.records.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} records but {} labels",
                self.records.len(),
                self.labels.len()
            )));
        }
        if self.is_empty() {
            return Err(Error::Domain("loss over an empty batch".into()));
        }
        self.labels
            .iter()
            .map(|&y| {
                params
                    .column_of(y)
                    .ok_or_else(|| Error::Domain(format!("label {y} is not registered")))
            })
            .collect()
    }
}

/// The replayed slice of a joint batch: current-pass records side by side
/// with the buffer entries they came from. `offset` locates the replay rows
/// inside the joint batch so gradients land on the right records.
#[derive(Debug, Clone, Copy)]
pub struct ReplayView<'a> {
    pub records: &'a [ForwardRecord],
    pub stored: &'a [BufferEntry],
    pub offset: usize,
}

impl<'a> ReplayView<'a> {
    pub fn new(records: &'a [ForwardRecord], stored: &'a [BufferEntry], offset: usize) -> Self {
        ReplayView {
            records,
            stored,
            offset,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Per-class sample counts of a combined batch; the anchor counts itself,
/// so the anchor's class always has k >= 1.
#[derive(Debug, Clone)]
pub struct BatchClassCounts {
    /// Count per model column; absent classes hold 0.
    counts: Vec<usize>,
    /// Total sample count N of the combined batch.
    total: usize,
}

impl BatchClassCounts {
    /// Builds counts directly from a per-column vector; used by oracles and
    /// diagnostics that construct batches abstractly.
    pub fn from_raw(counts: Vec<usize>) -> Self {
        let total = counts.iter().sum();
        BatchClassCounts { counts, total }
    }

    pub fn k(&self, column: usize) -> usize {
        self.counts.get(column).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn columns(&self) -> usize {
        self.counts.len()
    }
}

/// Exact multiset counts of the batch labels over the model's columns.
pub fn class_counts(batch: &BatchView, params: &ModelParams) -> Result<BatchClassCounts> {
    let cols = batch.validate(params)?;
    let mut counts = vec![0usize; params.num_classes()];
    for &c in &cols {
        counts[c] += 1;
    }
    Ok(BatchClassCounts {
        counts,
        total: cols.len(),
    })
}

/// Positive and full index sets for one anchor within a batch.
#[derive(Debug, Clone)]
pub struct PairSets {
    /// Same-class indices, anchor excluded.
    pub positives: Vec<usize>,
    /// All other indices, anchor excluded.
    pub others: Vec<usize>,
}

pub fn pair_sets(labels: &[usize], anchor: usize) -> PairSets {
    let mut positives = Vec::new();
    let mut others = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        others.push(j);
        if l == labels[anchor] {
            positives.push(j);
        }
    }
    PairSets { positives, others }
}

/// Cyclic cosine temperature: tau_max at step 0 down to tau_min at S/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub tau_max: f64,
    pub tau_min: f64,
    /// Cycle length S in optimizer steps.
    pub cycle: u64,
    /// Static temperature used inside every exponential.
    pub static_tau: f64,
}

impl TemperatureSchedule {
    pub fn new(tau_max: f64, tau_min: f64, cycle: u64, static_tau: f64) -> Result<Self> {
        if cycle == 0 {
            return Err(Error::Config("schedule.cycle must be positive".into()));
        }
        if !(tau_min.is_finite() && tau_max.is_finite() && tau_min > 0.0 && tau_max > tau_min) {
            return Err(Error::Config(
                "schedule requires tau_max > tau_min > 0".into(),
            ));
        }
        if !(static_tau.is_finite() && static_tau > 0.0) {
            return Err(Error::Config("static tau must be positive".into()));
        }
        Ok(TemperatureSchedule {
            tau_max,
            tau_min,
            cycle,
            static_tau,
        })
    }

    /// tau(s); the phase is reduced modulo S in integer arithmetic, so
    /// tau(s + S) == tau(s) holds exactly.
    pub fn tau_at(&self, step: u64) -> f64 {
        let phase = step % self.cycle;
        let angle = 2.0 * std::f64::consts::PI * phase as f64 / self.cycle as f64;
        (self.tau_max - self.tau_min) * (1.0 + angle.cos()) / 2.0 + self.tau_min
    }
}

/// Evaluates the schedule; kept as a free function mirroring the other ops.
pub fn temperature(schedule: &TemperatureSchedule, step: u64) -> f64 {
    schedule.tau_at(step)
}

/// Self-defined step gate: 0 below `n_min` combined samples, 1 otherwise.
pub fn step_gate(n: usize, n_min: usize) -> f64 {
    if n < n_min {
        0.0
    } else {
        1.0
    }
}

/// Mean cross-entropy of the softmax over all registered classes; the
/// fine-tune objective when applied to the current batch only.
pub fn loss_finetune(batch: &BatchView, params: &ModelParams) -> Result<LossGrads> {
    cross_entropy(batch, params)
}

/// Identical cross-entropy applied to the joint batch B u B_M.
pub fn loss_er(batch_joint: &BatchView, params: &ModelParams) -> Result<LossGrads> {
    cross_entropy(batch_joint, params)
}

fn cross_entropy(batch: &BatchView, params: &ModelParams) -> Result<LossGrads> {
    let cols = batch.validate(params)?;
    let n = batch.len();
    let num_cols = params.num_classes();
    let inv_n = 1.0 / n as f64;
    let mut out = LossGrads::zeros(n, num_cols);
    for (i, rec) in batch.records.iter().enumerate() {
        let y = cols[i];
        let m = rec.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = rec.logits.iter().map(|&o| (o - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        out.value += (m - rec.logits[y]) + denom.ln();
        for c in 0..num_cols {
            let p = exps[c] / denom;
            out.d_logits[i][c] = (p - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    out.value *= inv_n;
    Ok(out)
}

/// Pairwise similarity matrix s_ij = <z_i, z_j>/tau for i != j.
fn sim_matrix(records: &[ForwardRecord], tau: f64) -> Vec<Vec<f64>> {
    let n = records.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = records[i]
                .z
                .iter()
                .zip(&records[j].z)
                .map(|(a, b)| a * b)
                .sum();
            s[i][j] = dot / tau;
            s[j][i] = s[i][j];
        }
    }
    s
}

/// Supervised-contrastive loss over anchor-to-sample pairs; anchors without
/// positives contribute 0.
pub fn loss_scr(batch_joint: &BatchView, params: &ModelParams) -> Result<LossGrads> {
    batch_joint.validate(params)?;
    let n = batch_joint.len();
    if n < 2 {
        return Err(Error::Domain(
            "contrastive loss needs a batch of at least 2".into(),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let sims = sim_matrix(batch_joint.records, params.tau);
    let mut out = LossGrads::zeros(n, params.num_classes());
    for i in 0..n {
        let sets = pair_sets(batch_joint.labels, i);
        if sets.positives.is_empty() {
            continue;
        }
        let m = sets
            .others
            .iter()
            .map(|&j| sims[i][j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &j in &sets.others {
            denom += (sims[i][j] - m).exp();
        }
        let inv_p = 1.0 / sets.positives.len() as f64;
        let mut mean_pos = 0.0;
        for &p in &sets.positives {
            mean_pos += sims[i][p];
        }
        mean_pos *= inv_p;
        out.value += (m + denom.ln()) - mean_pos;
        for &j in &sets.others {
            let q = (sims[i][j] - m).exp() / denom;
            let pos = if batch_joint.labels[j] == batch_joint.labels[i] {
                inv_p
            } else {
                0.0
            };
            out.d_sim.push((i, j, (q - pos) * inv_n));
        }
    }
    out.value *= inv_n;
    Ok(out)
}

/// First coupled baseline: the plain sum of the replayed cross-entropy and
/// the contrastive loss.
pub fn loss_couple_sum(batch_joint: &BatchView, params: &ModelParams) -> Result<LossGrads> {
    let mut out = loss_er(batch_joint, params)?;
    let scr = loss_scr(batch_joint, params)?;
    out.add_scaled(&scr, 1.0);
    Ok(out)
}

/// Second coupled baseline: cross-entropy whose denominator also sums the
/// anchor-to-sample exponentials, exactly as printed.
pub fn loss_couple_mixed(batch_joint: &BatchView, params: &ModelParams) -> Result<LossGrads> {
    let cols = batch_joint.validate(params)?;
    let n = batch_joint.len();
    let num_cols = params.num_classes();
    let inv_n = 1.0 / n as f64;
    let sims = sim_matrix(batch_joint.records, params.tau);
    let mut out = LossGrads::zeros(n, num_cols);
    for (i, rec) in batch_joint.records.iter().enumerate() {
        let y = cols[i];
        let sets = pair_sets(batch_joint.labels, i);
        let mut m = rec.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &j in &sets.others {
            m = m.max(sims[i][j]);
        }
        let mut denom = 0.0;
        for &o in &rec.logits {
            denom += (o - m).exp();
        }
        for &j in &sets.others {
            denom += (sims[i][j] - m).exp();
        }
        out.value += (m + denom.ln()) - rec.logits[y];
        for c in 0..num_cols {
            let p = (rec.logits[c] - m).exp() / denom;
            out.d_logits[i][c] = (p - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
        for &j in &sets.others {
            out.d_sim
                .push((i, j, (sims[i][j] - m).exp() / denom * inv_n));
        }
    }
    out.value *= inv_n;
    Ok(out)
}

/// Count-weighted categorical probability p*_y = exp(o_y) / sum_c k_c exp(o_c).
pub fn pcr_prob(logits: &[f64], counts: &BatchClassCounts, y: usize) -> Result<f64> {
    if y >= logits.len() || counts.k(y) == 0 {
        return Err(Error::Domain(format!(
            "class column {y} absent from the batch counts"
        )));
    }
    let m = present_max(logits, counts);
    let mut denom = 0.0;
    for (c, &o) in logits.iter().enumerate() {
        let k = counts.k(c);
        if k > 0 {
            denom += k as f64 * (o - m).exp();
        }
    }
    Ok((logits[y] - m).exp() / denom)
}

fn present_max(logits: &[f64], counts: &BatchClassCounts) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (c, &o) in logits.iter().enumerate() {
        if counts.k(c) > 0 {
            m = m.max(o);
        }
    }
    m
}

/// One anchor's proxy-only term: value and d/do over present classes.
/// Shared by `loss_pcr`, the gated-off branch of `loss_pcr_c`, and its
/// no-positive fallback, so the gate identity holds to the last bit.
fn pcr_anchor_term(
    logits: &[f64],
    counts: &BatchClassCounts,
    y: usize,
    row: &mut [f64],
    inv_n: f64,
) -> f64 {
    let m = present_max(logits, counts);
    let mut denom = 0.0;
    for (c, &o) in logits.iter().enumerate() {
        let k = counts.k(c);
        if k > 0 {
            denom += k as f64 * (o - m).exp();
        }
    }
    for (c, &o) in logits.iter().enumerate() {
        let k = counts.k(c);
        if k > 0 {
            let ratio = k as f64 * (o - m).exp() / denom;
            row[c] += (ratio - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    denom.ln() + (m - logits[y])
}

/// Proxy-based contrastive replay: contrastive selection of anchor-to-proxy
/// pairs with count-weighted denominators. Absent classes receive exactly
/// zero gradient.
pub fn loss_pcr(batch_joint: &BatchView, params: &ModelParams) -> Result<LossGrads> {
    let cols = batch_joint.validate(params)?;
    let counts = class_counts(batch_joint, params)?;
    let n = batch_joint.len();
    let inv_n = 1.0 / n as f64;
    let mut out = LossGrads::zeros(n, params.num_classes());
    for (i, rec) in batch_joint.records.iter().enumerate() {
        out.value += pcr_anchor_term(&rec.logits, &counts, cols[i], &mut out.d_logits[i], inv_n);
    }
    out.value *= inv_n;
    Ok(out)
}

/// PCR with anchor-to-sample pairs gated in once the combined batch reaches
/// `n_min` samples. Below the gate it reproduces `loss_pcr` exactly; anchors
/// without positives fall back to the pure proxy term.
pub fn loss_pcr_c(
    batch_joint: &BatchView,
    params: &ModelParams,
    n_min: usize,
) -> Result<LossGrads> {
    let cols = batch_joint.validate(params)?;
    let counts = class_counts(batch_joint, params)?;
    let n = batch_joint.len();
    let inv_n = 1.0 / n as f64;
    let gate = step_gate(counts.total(), n_min);
    let mut out = LossGrads::zeros(n, params.num_classes());

    if gate == 0.0 {
        for (i, rec) in batch_joint.records.iter().enumerate() {
            out.value +=
                pcr_anchor_term(&rec.logits, &counts, cols[i], &mut out.d_logits[i], inv_n);
        }
        out.value *= inv_n;
        return Ok(out);
    }

    let sims = sim_matrix(batch_joint.records, params.tau);
    for (i, rec) in batch_joint.records.iter().enumerate() {
        let y = cols[i];
        let sets = pair_sets(batch_joint.labels, i);
        if sets.positives.is_empty() {
            out.value += pcr_anchor_term(&rec.logits, &counts, y, &mut out.d_logits[i], inv_n);
            continue;
        }
        let mut m = present_max(&rec.logits, &counts);
        for &j in &sets.others {
            m = m.max(sims[i][j]);
        }
        let mut denom = 0.0;
        for (c, &o) in rec.logits.iter().enumerate() {
            let k = counts.k(c);
            if k > 0 {
                denom += k as f64 * (o - m).exp();
            }
        }
        for &j in &sets.others {
            denom += (sims[i][j] - m).exp();
        }

        let inv_p = 1.0 / sets.positives.len() as f64;
        let ey = (rec.logits[y] - m).exp();
        let mut d_oy_numer = 0.0;
        for &p in &sets.positives {
            let numer = ey + (sims[i][p] - m).exp();
            out.value += (denom.ln() - numer.ln()) * inv_p;
            d_oy_numer -= ey / numer * inv_p;
            out.d_sim.push((
                i,
                p,
                ((sims[i][p] - m).exp() / denom - (sims[i][p] - m).exp() / numer * inv_p) * inv_n,
            ));
        }
        for &j in &sets.others {
            if batch_joint.labels[j] != batch_joint.labels[i] {
                out.d_sim
                    .push((i, j, (sims[i][j] - m).exp() / denom * inv_n));
            }
        }
        for (c, &o) in rec.logits.iter().enumerate() {
            let k = counts.k(c);
            if k > 0 {
                out.d_logits[i][c] += k as f64 * (o - m).exp() / denom * inv_n;
            }
        }
        out.d_logits[i][y] += d_oy_numer * inv_n;
    }
    out.value *= inv_n;
    Ok(out)
}

/// Temperature-decoupled PCR_C: the static tau stays inside every
/// exponential while the scheduled tau(s) rescales the whole objective, so
/// the classifier gradient becomes (k_y p*_y - 1)/tau(s).
pub fn loss_pcr_ct(
    batch_joint: &BatchView,
    params: &ModelParams,
    schedule: &TemperatureSchedule,
    step: u64,
    n_min: usize,
) -> Result<LossGrads> {
    let mut out = loss_pcr_c(batch_joint, params, n_min)?;
    let scale = params.tau / schedule.tau_at(step);
    out.value *= scale;
    for row in &mut out.d_logits {
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    for entry in &mut out.d_sim {
        entry.2 *= scale;
    }
    Ok(out)
}

/// Proxy-based contrastive distillation: count-weighted squared distance
/// between current and stored logits of replayed samples, restricted to
/// classes present in both the stored vector and the batch counts.
/// Minimized as a positive distance.
pub fn loss_pcd(
    replay: &ReplayView,
    counts: &BatchClassCounts,
    joint_size: usize,
    params: &ModelParams,
) -> Result<LossGrads> {
    let mut out = LossGrads::zeros(joint_size, params.num_classes());
    if replay.is_empty() {
        return Ok(out);
    }
    if replay.records.len() != replay.stored.len() {
        return Err(Error::Shape(
            "replay records and stored entries differ in length".into(),
        ));
    }
    let inv_m = 1.0 / replay.len() as f64;
    for (r, (rec, entry)) in replay.records.iter().zip(replay.stored).enumerate() {
        if entry.stored_logits.is_empty() && params.num_classes() > 0 {
            return Err(Error::Domain(
                "replay entry carries no stored logits".into(),
            ));
        }
        let row = replay.offset + r;
        for &(class, stored) in &entry.stored_logits {
            let c = params
                .column_of(class)
                .ok_or_else(|| Error::Domain(format!("stored class {class} is not registered")))?;
            let k = counts.k(c);
            if k == 0 {
                continue;
            }
            let diff = rec.logits[c] - stored;
            out.value += k as f64 * diff * diff * inv_m;
            out.d_logits[row][c] += 2.0 * k as f64 * diff * inv_m;
        }
    }
    Ok(out)
}

/// Sample-based contrastive distillation: cross-entropy from the stored
/// pairwise-similarity distribution (a gradient constant) to the current
/// one, within the replay batch. A single replayed sample contributes 0.
pub fn loss_scd(replay: &ReplayView, joint_size: usize, params: &ModelParams) -> Result<LossGrads> {
    let mut out = LossGrads::zeros(joint_size, params.num_classes());
    let m_size = replay.len();
    if m_size < 2 {
        return Ok(out);
    }
    if replay.records.len() != replay.stored.len() {
        return Err(Error::Shape(
            "replay records and stored entries differ in length".into(),
        ));
    }
    let tau = params.tau;
    let inv_m = 1.0 / m_size as f64;
    let new_sims = sim_matrix(replay.records, tau);
    for a in 0..m_size {
        let others: Vec<usize> = (0..m_size).filter(|&j| j != a).collect();

        let mut old = Vec::with_capacity(others.len());
        for &j in &others {
            let dot: f64 = replay.stored[a]
                .stored_embedding
                .iter()
                .zip(&replay.stored[j].stored_embedding)
                .map(|(x, y)| x * y)
                .sum();
            old.push(dot / tau);
        }
        let old_max = old.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let old_lse = old.iter().map(|&s| (s - old_max).exp()).sum::<f64>().ln() + old_max;
        let log_q_old: Vec<f64> = old.iter().map(|&s| s - old_lse).collect();

        let new_max = others
            .iter()
            .map(|&j| new_sims[a][j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &j in &others {
            denom += (new_sims[a][j] - new_max).exp();
        }
        let q_new: Vec<f64> = others
            .iter()
            .map(|&j| (new_sims[a][j] - new_max).exp() / denom)
            .collect();

        let mean_log_old: f64 = q_new.iter().zip(&log_q_old).map(|(q, l)| q * l).sum();
        out.value -= mean_log_old * inv_m;
        for (idx, &j) in others.iter().enumerate() {
            let g = q_new[idx] * (mean_log_old - log_q_old[idx]) * inv_m;
            out.d_sim.push((replay.offset + a, replay.offset + j, g));
        }
    }
    Ok(out)
}

/// Hyperparameter bundle re-exported from the config.
pub use crate::config::HyperParams;

/// The combined objective: PCR_CT plus scaled distillation terms.
pub fn loss_hpcr(
    batch_joint: &BatchView,
    replay: &ReplayView,
    params: &ModelParams,
    schedule: &TemperatureSchedule,
    step: u64,
    hp: &HyperParams,
) -> Result<LossGrads> {
    let mut out = loss_pcr_ct(batch_joint, params, schedule, step, hp.n_min)?;
    let counts = class_counts(batch_joint, params)?;
    let pcd = loss_pcd(replay, &counts, batch_joint.len(), params)?;
    out.add_scaled(&pcd, hp.alpha);
    let scd = loss_scd(replay, batch_joint.len(), params)?;
    out.add_scaled(&scd, hp.beta);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenseLayer;
    use proptest::prelude::*;

    /// Identity extractor in 2 dimensions with fully controllable proxies.
    fn toy_model(tau: f64, proxies: &[(usize, [f64; 2])]) -> ModelParams {
        let mut l = DenseLayer::zeros(2, 2);
        l.weights[0] = 1.0;
        l.weights[3] = 1.0;
        let mut params = ModelParams::from_layers(vec![l], tau).unwrap();
        for (class, p) in proxies {
            params.register_class_with(*class, p.to_vec());
        }
        params
    }

    fn forward_all(params: &ModelParams, xs: &[[f64; 2]]) -> Vec<ForwardRecord> {
        xs.iter().map(|x| params.forward(x).unwrap()).collect()
    }

    #[test]
    fn class_counts_match_multisets() {
        let params = toy_model(1.0, &[(0, [1.0, 0.0]), (1, [0.0, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let labels = [0, 0, 1];
        let counts = class_counts(&BatchView::new(&recs, &labels), &params).unwrap();
        assert_eq!(counts.k(0), 2);
        assert_eq!(counts.k(1), 1);
        assert_eq!(counts.total(), 3);

        let all = class_counts(&BatchView::new(&recs[..2], &labels[..2]), &params).unwrap();
        assert_eq!(all.k(0), 2);
        assert_eq!(all.k(1), 0);
    }

    #[test]
    fn unregistered_label_is_a_domain_error() {
        let params = toy_model(1.0, &[(0, [1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]]);
        let labels = [7];
        assert!(loss_finetune(&BatchView::new(&recs, &labels), &params).is_err());
    }

    #[test]
    fn finetune_equal_logits_gives_ln2() {
        // Both proxies orthogonal to z: o = [0, 0].
        let params = toy_model(1.0, &[(0, [0.0, 1.0]), (1, [0.0, -1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]]);
        let labels = [0];
        let lg = loss_finetune(&BatchView::new(&recs, &labels), &params).unwrap();
        assert!((lg.value - 2f64.ln()).abs() < 1e-12);
        // Gradient: (p - 1, p) = (-0.5, 0.5).
        assert!((lg.d_logits[0][0] + 0.5).abs() < 1e-12);
        assert!((lg.d_logits[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn finetune_confident_prediction_has_tiny_loss() {
        let params = toy_model(0.01, &[(0, [1.0, 0.0]), (1, [-1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]]);
        let labels = [0];
        let lg = loss_finetune(&BatchView::new(&recs, &labels), &params).unwrap();
        // p_y = 1/(1 + exp(-200)) -> loss indistinguishable from 0.
        assert!(lg.value.abs() < 1e-12);
    }

    #[test]
    fn scr_rejects_singleton_batches() {
        let params = toy_model(1.0, &[(0, [1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]]);
        let labels = [0];
        assert!(loss_scr(&BatchView::new(&recs, &labels), &params).is_err());
    }

    #[test]
    fn scr_uniform_similarities_give_ln_k() {
        // Four identical samples of one class: all pairwise sims equal,
        // |J| = 3, so each per-positive term is ln 3.
        let params = toy_model(0.2, &[(0, [1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]; 4]);
        let labels = [0; 4];
        let lg = loss_scr(&BatchView::new(&recs, &labels), &params).unwrap();
        assert!((lg.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scr_anchor_without_positive_contributes_zero() {
        let params = toy_model(1.0, &[(0, [1.0, 0.0]), (1, [0.0, 1.0])]);
        // One lone sample of class 1; two of class 0.
        let recs = forward_all(&params, &[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]);
        let labels = [0, 0, 1];
        let lg = loss_scr(&BatchView::new(&recs, &labels), &params).unwrap();
        // Drop the lone anchor and the value shrinks by exactly its share:
        // anchors 0 and 1 contribute, anchor 2 contributes 0.
        assert!(lg.d_sim.iter().all(|&(i, _, _)| i != 2));
        assert!(lg.value.is_finite());
    }

    #[test]
    fn couple_sum_is_er_plus_scr() {
        let params = toy_model(0.7, &[(0, [1.0, 0.2]), (1, [-0.3, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.1], [0.8, 0.3], [-0.2, 1.0], [0.1, 0.9]]);
        let labels = [0, 0, 1, 1];
        let batch = BatchView::new(&recs, &labels);
        let sum = loss_couple_sum(&batch, &params).unwrap();
        let er = loss_er(&batch, &params).unwrap();
        let scr = loss_scr(&batch, &params).unwrap();
        assert!((sum.value - (er.value + scr.value)).abs() < 1e-12);
    }

    #[test]
    fn couple_mixed_on_singleton_equals_er() {
        let params = toy_model(0.7, &[(0, [1.0, 0.2]), (1, [-0.3, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.1]]);
        let labels = [0];
        let batch = BatchView::new(&recs, &labels);
        let mixed = loss_couple_mixed(&batch, &params).unwrap();
        let er = loss_er(&batch, &params).unwrap();
        assert!((mixed.value - er.value).abs() < 1e-12);
    }

    #[test]
    fn pcr_prob_examples() {
        let params = toy_model(1.0, &[(0, [0.0, 1.0]), (1, [0.0, -1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);

        // Single present class: p* = 1 / k_y; exactly 1 when k_y = 1.
        let labels = [0, 0, 0];
        let counts = class_counts(&BatchView::new(&recs, &labels), &params).unwrap();
        let p = pcr_prob(&recs[0].logits, &counts, 0).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
        assert!(pcr_prob(&recs[0].logits, &counts, 1).is_err());
        let lone = BatchClassCounts::from_raw(vec![1, 0]);
        assert_eq!(pcr_prob(&recs[0].logits, &lone, 0).unwrap(), 1.0);

        // o all zero, k = {0: 2, 1: 1}: p*_0 = 1/3.
        let labels = [0, 0, 1];
        let counts = class_counts(&BatchView::new(&recs, &labels), &params).unwrap();
        let p0 = pcr_prob(&recs[0].logits, &counts, 0).unwrap();
        assert!((p0 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pcr_all_zero_logits_gives_ln3() {
        let params = toy_model(1.0, &[(0, [0.0, 1.0]), (1, [0.0, -1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let labels = [0, 0, 1];
        let lg = loss_pcr(&BatchView::new(&recs, &labels), &params).unwrap();
        // Every anchor term is -ln(1/3).
        assert!((lg.value - 3f64.ln()).abs() < 1e-12);
        // Anchor of class 0: d_o = (k p* - 1, k p*) = (2/3 - 1, 1/3), / n.
        assert!((lg.d_logits[0][0] - (2.0 / 3.0 - 1.0) / 3.0).abs() < 1e-12);
        assert!((lg.d_logits[0][1] - (1.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pcr_single_class_batch_is_exact() {
        let params = toy_model(0.3, &[(0, [0.4, 0.8]), (1, [0.0, -1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.2], [0.9, 0.3], [1.1, 0.1]]);
        let labels = [0, 0, 0];
        let lg = loss_pcr(&BatchView::new(&recs, &labels), &params).unwrap();
        // Every anchor term is exactly ln 3; the mean rounds within an ulp.
        assert!((lg.value - 3f64.ln()).abs() < 1e-15);
        // Present-class gradient is exactly zero; absent class exactly zero.
        for row in &lg.d_logits {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[1], 0.0);
        }

        let single = forward_all(&params, &[[1.0, 0.2]]);
        let labels = [0];
        let lg = loss_pcr(&BatchView::new(&single, &labels), &params).unwrap();
        assert_eq!(lg.value, 0.0);
    }

    #[test]
    fn gate_identity_below_n_min() {
        let params = toy_model(0.4, &[(0, [1.0, 0.1]), (1, [-0.2, 1.0])]);
        let recs = forward_all(
            &params,
            &[[1.0, 0.0], [0.8, 0.4], [0.1, 1.0], [-0.3, 0.9], [0.9, 0.2]],
        );
        let labels = [0, 0, 1, 1, 0];
        let batch = BatchView::new(&recs, &labels);
        let pcr = loss_pcr(&batch, &params).unwrap();
        let gated = loss_pcr_c(&batch, &params, 60).unwrap();
        assert_eq!(pcr.value, gated.value);
        assert_eq!(pcr.d_logits, gated.d_logits);
        assert!(gated.d_sim.is_empty());
    }

    #[test]
    fn pcr_c_identical_single_class_batch_closed_form() {
        // Identical samples of one class with the gate on: every sim equals
        // 1/tau and o_y = cos(z, w)/tau; closed form per anchor:
        // ln((k + |J|) e_s... all terms equal so value = ln(D/A) with
        // D = k*e_o + |J|*e_s and A = e_o + e_s.
        let tau = 0.5;
        let params = toy_model(tau, &[(0, [1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]; 4]);
        let labels = [0; 4];
        let lg = loss_pcr_c(&BatchView::new(&recs, &labels), &params, 1).unwrap();
        let e_o = (1.0f64 / tau).exp();
        let e_s = (1.0f64 / tau).exp();
        let expected = ((4.0 * e_o + 3.0 * e_s) / (e_o + e_s)).ln();
        assert!(
            (lg.value - expected).abs() < 1e-12,
            "{} vs {expected}",
            lg.value
        );
    }

    #[test]
    fn step_gate_threshold() {
        assert_eq!(step_gate(1, 60), 0.0);
        assert_eq!(step_gate(59, 60), 0.0);
        assert_eq!(step_gate(60, 60), 1.0);
        assert_eq!(step_gate(1000, 60), 1.0);
    }

    #[test]
    fn schedule_endpoints_and_periodicity() {
        let sched = TemperatureSchedule::new(0.16, 0.05, 500, 0.09).unwrap();
        assert!((sched.tau_at(0) - 0.16).abs() < 1e-15);
        assert!((sched.tau_at(250) - 0.05).abs() < 1e-15);
        assert!((sched.tau_at(125) - 0.105).abs() < 1e-12);
        for s in [0u64, 1, 17, 249, 250, 499, 1234] {
            assert_eq!(sched.tau_at(s + 500), sched.tau_at(s));
            let t = sched.tau_at(s);
            assert!((0.05..=0.16).contains(&t));
        }
        assert!(TemperatureSchedule::new(0.16, 0.05, 0, 0.09).is_err());
        assert!(TemperatureSchedule::new(0.05, 0.16, 500, 0.09).is_err());
    }

    #[test]
    fn pcr_ct_reduces_to_pcr_c_at_static_tau() {
        let params = toy_model(0.09, &[(0, [1.0, 0.1]), (1, [-0.2, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [0.8, 0.4], [0.1, 1.0]]);
        let labels = [0, 0, 1];
        let batch = BatchView::new(&recs, &labels);
        // tau(s) == static tau when tau_min < 0.09 < tau_max at the right phase:
        // easier to pin a schedule whose tau_max equals the static value at s=0.
        let sched = TemperatureSchedule::new(0.09, 0.05, 500, 0.09).unwrap();
        let ct = loss_pcr_ct(&batch, &params, &sched, 0, 60).unwrap();
        let c = loss_pcr_c(&batch, &params, 60).unwrap();
        assert_eq!(ct.value, c.value);
        assert_eq!(ct.d_logits, c.d_logits);
    }

    #[test]
    fn pcr_ct_scales_gradients_linearly() {
        let params = toy_model(0.1, &[(0, [1.0, 0.1]), (1, [-0.2, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [0.8, 0.4], [0.1, 1.0]]);
        let labels = [0, 0, 1];
        let batch = BatchView::new(&recs, &labels);
        // tau(0) = tau_max: choose two schedules whose tau_max halves.
        let a = TemperatureSchedule::new(0.2, 0.05, 500, 0.1).unwrap();
        let b = TemperatureSchedule::new(0.1, 0.05, 500, 0.1).unwrap();
        let ga = loss_pcr_ct(&batch, &params, &a, 0, 60).unwrap();
        let gb = loss_pcr_ct(&batch, &params, &b, 0, 60).unwrap();
        for (ra, rb) in ga.d_logits.iter().zip(&gb.d_logits) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((2.0 * x - y).abs() < 1e-15);
            }
        }
    }

    fn unit2(x: f64, y: f64) -> Vec<f64> {
        let n = (x * x + y * y).sqrt();
        vec![x / n, y / n]
    }

    fn entry(label: usize, logits: Vec<(usize, f64)>, emb: Vec<f64>) -> BufferEntry {
        BufferEntry::new(
            crate::stream::LabeledSample {
                features: vec![0.0, 0.0],
                label,
            },
            logits,
            emb,
        )
        .unwrap()
    }

    #[test]
    fn pcd_zero_when_logits_match() {
        let params = toy_model(0.5, &[(0, [1.0, 0.0]), (1, [0.0, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [0.0, 1.0]]);
        let labels = [0, 1];
        let batch = BatchView::new(&recs, &labels);
        let counts = class_counts(&batch, &params).unwrap();
        let stored = vec![
            entry(
                0,
                vec![(0, recs[0].logits[0]), (1, recs[0].logits[1])],
                unit2(1.0, 0.0),
            ),
            entry(
                1,
                vec![(0, recs[1].logits[0]), (1, recs[1].logits[1])],
                unit2(0.0, 1.0),
            ),
        ];
        let replay = ReplayView::new(&recs, &stored, 0);
        let lg = loss_pcd(&replay, &counts, 2, &params).unwrap();
        assert_eq!(lg.value, 0.0);
        assert!(lg.d_logits.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn pcd_single_shared_class_arithmetic() {
        // One replayed sample, one shared class with k=2, o - o* = 0.5:
        // value = 2 * 0.25 = 0.5.
        let params = toy_model(1.0, &[(0, [1.0, 0.0]), (1, [0.0, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [1.0, 0.0]]);
        let labels = [0, 0];
        let batch = BatchView::new(&recs, &labels);
        let counts = class_counts(&batch, &params).unwrap();
        // Stored logit for class 0 offset by 0.5; class 1 absent from counts.
        let stored = vec![entry(
            0,
            vec![(0, recs[1].logits[0] - 0.5), (1, 123.0)],
            unit2(1.0, 0.0),
        )];
        let replay = ReplayView::new(&recs[1..], &stored, 1);
        let lg = loss_pcd(&replay, &counts, 2, &params).unwrap();
        assert!((lg.value - 0.5).abs() < 1e-12);
        // Gradient lands on the replay row only.
        assert_eq!(lg.d_logits[0][0], 0.0);
        assert!((lg.d_logits[1][0] - 2.0 * 2.0 * 0.5).abs() < 1e-12);
        assert_eq!(lg.d_logits[1][1], 0.0);
    }

    #[test]
    fn pcd_requires_stored_logits() {
        let params = toy_model(1.0, &[(0, [1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]]);
        let batch = BatchView::new(&recs, &[0]);
        let counts = class_counts(&batch, &params).unwrap();
        let stored = vec![entry(0, vec![], unit2(1.0, 0.0))];
        let replay = ReplayView::new(&recs, &stored, 0);
        assert!(loss_pcd(&replay, &counts, 1, &params).is_err());
    }

    #[test]
    fn scd_uniform_stored_similarities_give_ln_k() {
        let params = toy_model(0.3, &[(0, [1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [0.6, 0.8], [0.8, 0.6], [0.0, 1.0]]);
        // Stored embeddings all equal: stored similarities are uniform.
        let e = unit2(0.6, 0.8);
        let stored = vec![
            entry(0, vec![(0, 0.0)], e.clone()),
            entry(0, vec![(0, 0.0)], e.clone()),
            entry(0, vec![(0, 0.0)], e.clone()),
            entry(0, vec![(0, 0.0)], e),
        ];
        let replay = ReplayView::new(&recs, &stored, 0);
        let lg = loss_scd(&replay, 4, &params).unwrap();
        assert!((lg.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scd_vanishes_in_the_one_hot_limit() {
        // Two tight pairs at a small temperature: every anchor's stored and
        // current distributions are near one-hot on its partner, and the
        // distillation term collapses toward zero.
        let params = toy_model(0.05, &[(0, [1.0, 0.0])]);
        let xs = [[1.0, 0.0], [0.999, 0.045], [0.0, 1.0], [0.045, 0.999]];
        let recs = forward_all(&params, &xs);
        let stored: Vec<BufferEntry> = recs
            .iter()
            .map(|r| entry(0, vec![(0, 0.0)], r.z.clone()))
            .collect();
        let replay = ReplayView::new(&recs, &stored, 0);
        let lg = loss_scd(&replay, 4, &params).unwrap();
        assert!(lg.value >= 0.0);
        assert!(
            lg.value < 0.01,
            "one-hot limit should vanish, got {}",
            lg.value
        );
    }

    #[test]
    fn scd_singleton_contributes_zero() {
        let params = toy_model(0.3, &[(0, [1.0, 0.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0]]);
        let stored = vec![entry(0, vec![(0, 0.0)], unit2(1.0, 0.0))];
        let replay = ReplayView::new(&recs, &stored, 0);
        let lg = loss_scd(&replay, 1, &params).unwrap();
        assert_eq!(lg.value, 0.0);
        assert!(lg.d_sim.is_empty());
    }

    #[test]
    fn hpcr_with_zero_scales_equals_pcr_ct() {
        let params = toy_model(0.09, &[(0, [1.0, 0.1]), (1, [-0.2, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [0.8, 0.4], [0.1, 1.0]]);
        let labels = [0, 0, 1];
        let batch = BatchView::new(&recs, &labels);
        let sched = TemperatureSchedule::new(0.16, 0.05, 500, 0.09).unwrap();
        let stored = vec![entry(1, vec![(0, 0.3), (1, 0.1)], unit2(0.1, 1.0))];
        let replay = ReplayView::new(&recs[2..], &stored, 2);
        let hp = HyperParams {
            alpha: 0.0,
            beta: 0.0,
            n_min: 60,
            ..HyperParams::default()
        };
        let hpcr = loss_hpcr(&batch, &replay, &params, &sched, 3, &hp).unwrap();
        let ct = loss_pcr_ct(&batch, &params, &sched, 3, 60).unwrap();
        assert_eq!(hpcr.value, ct.value);
    }

    #[test]
    fn hpcr_is_linear_in_alpha() {
        let params = toy_model(0.09, &[(0, [1.0, 0.1]), (1, [-0.2, 1.0])]);
        let recs = forward_all(&params, &[[1.0, 0.0], [0.8, 0.4], [0.1, 1.0], [-0.2, 0.9]]);
        let labels = [0, 0, 1, 1];
        let batch = BatchView::new(&recs, &labels);
        let sched = TemperatureSchedule::new(0.16, 0.05, 500, 0.09).unwrap();
        let stored = vec![
            entry(1, vec![(0, 0.3), (1, 0.1)], unit2(0.1, 1.0)),
            entry(1, vec![(0, -0.2), (1, 0.4)], unit2(-0.2, 0.9)),
        ];
        let replay = ReplayView::new(&recs[2..], &stored, 2);
        let counts = class_counts(&batch, &params).unwrap();
        let pcd = loss_pcd(&replay, &counts, 4, &params).unwrap();

        let hp0 = HyperParams {
            alpha: 0.7,
            beta: 0.5,
            n_min: 60,
            ..HyperParams::default()
        };
        let hp1 = HyperParams {
            alpha: 1.1,
            beta: 0.5,
            n_min: 60,
            ..HyperParams::default()
        };
        let a = loss_hpcr(&batch, &replay, &params, &sched, 3, &hp0).unwrap();
        let b = loss_hpcr(&batch, &replay, &params, &sched, 3, &hp1).unwrap();
        assert!((b.value - a.value - 0.4 * pcd.value).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pcr_prob_normalizes(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let params = toy_model(
                rng.gen_range(0.3..1.5),
                &[(0, [1.0, 0.1]), (1, [-0.2, 1.0]), (2, [0.5, -0.8])],
            );
            let n = rng.gen_range(2usize..8);
            let xs: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64).max(-0.99)])
                .collect();
            let recs = forward_all(&params, &xs);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0usize..3)).collect();
            let batch = BatchView::new(&recs, &labels);
            let counts = class_counts(&batch, &params).unwrap();
            let mut sum = 0.0;
            for c in 0..3 {
                if counts.k(c) > 0 {
                    sum += counts.k(c) as f64 * pcr_prob(&recs[0].logits, &counts, c).unwrap();
                }
            }
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn losses_are_finite_and_nonnegative(seed in 0u64..150) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let params = toy_model(
                rng.gen_range(0.2..1.2),
                &[(0, [1.0, 0.1]), (1, [-0.2, 1.0])],
            );
            let n = rng.gen_range(2usize..7);
            let xs: Vec<[f64; 2]> = (0..n)
                .map(|_| {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    [a.cos(), a.sin()]
                })
                .collect();
            let recs = forward_all(&params, &xs);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0usize..2)).collect();
            let batch = BatchView::new(&recs, &labels);
            let n_min = if seed % 2 == 0 { 1 } else { 100 };
            for lg in [
                loss_finetune(&batch, &params).unwrap(),
                loss_er(&batch, &params).unwrap(),
                loss_scr(&batch, &params).unwrap(),
                loss_couple_sum(&batch, &params).unwrap(),
                loss_couple_mixed(&batch, &params).unwrap(),
                loss_pcr(&batch, &params).unwrap(),
                loss_pcr_c(&batch, &params, n_min).unwrap(),
            ] {
                prop_assert!(lg.value.is_finite());
                prop_assert!(lg.value >= -1e-12);
            }
        }
    }
}
