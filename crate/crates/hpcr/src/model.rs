//! Feed-forward feature extractor with an L2-normalized embedding and a
//! cosine-similarity proxy classifier. The backward pass is derived by hand;
//! losses hand this module per-logit and per-pair gradients and it chains
//! them through the proxies, the normalization, and the MLP.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::seedmix::mix;

const TAG_LAYER: u64 = 0x100;
const TAG_PROXY: u64 = 0x200;

/// Dense layer with row-major `out_dim x in_dim` weights.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn kaiming(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        DenseLayer {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }
}

/// Extractor weights plus one trainable proxy per registered class.
///
/// Proxies are stored unnormalized and unit-normalized on use; classes are
/// registered lazily in encounter order (columns are append-only, so stored
/// logit vectors are always a prefix of the current column space).
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
    /// Proxy vectors by column (registration order).
    pub proxies: Vec<Vec<f64>>,
    /// Class id of each column.
    classes: Vec<usize>,
    /// Static temperature applied to every similarity.
    pub tau: f64,
    embedding_dim: usize,
    proxy_init_sigma: f64,
    proxy_rng: ChaCha8Rng,
}

/// Cached forward pass of one sample.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub input: Vec<f64>,
    /// Input seen by each layer (index 0 is the sample itself).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last one is the raw embedding u.
    preacts: Vec<Vec<f64>>,
    u_norm: f64,
    /// Unit-norm embedding z = u / ||u||.
    pub z: Vec<f64>,
    /// Raw cosine similarity to each registered proxy, by column.
    pub cosines: Vec<f64>,
    /// o_c = cos_c / tau, by column.
    pub logits: Vec<f64>,
}

impl ForwardRecord {
    /// Norm of the raw embedding before normalization.
    pub(crate) fn embedding_norm(&self) -> f64 {
        self.u_norm
    }

    /// Smallest |pre-activation| across the hidden layers; gradient-check
    /// instances near a ReLU kink are resampled.
    pub(crate) fn min_abs_hidden_preact(&self) -> f64 {
        let mut m = f64::INFINITY;
        for pre in &self.preacts[..self.preacts.len().saturating_sub(1)] {
            for &v in pre {
                m = m.min(v.abs());
            }
        }
        m
    }
}

/// Per-parameter gradients matching a `ModelParams` layout.
#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<DenseLayer>,
    pub proxies: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Grads {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim, l.out_dim))
                .collect(),
            proxies: params.proxies.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Flat gradient vector in the same order as `ModelParams::flatten`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        for p in &self.proxies {
            out.extend_from_slice(p);
        }
        out
    }

    /// Adds `other * scale` elementwise.
    pub fn accumulate(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        for (a, b) in self.proxies.iter_mut().zip(&other.proxies) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Per-logit and per-pair loss gradients, before chaining into parameters.
///
/// `d_logits[i][c]` is dL/do for batch item i and column c; `d_sim` holds
/// (i, j, dL/ds_ij) entries for anchor-to-sample similarities s_ij =
/// <z_i, z_j>/tau.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub value: f64,
    pub d_logits: Vec<Vec<f64>>,
    pub d_sim: Vec<(usize, usize, f64)>,
}

impl LossGrads {
    pub fn zeros(batch: usize, columns: usize) -> Self {
        LossGrads {
            value: 0.0,
            d_logits: vec![vec![0.0; columns]; batch],
            d_sim: Vec::new(),
        }
    }

    /// Sums another loss term scaled by `scale` into this one.
    pub fn add_scaled(&mut self, other: &LossGrads, scale: f64) {
        self.value += scale * other.value;
        for (row, orow) in self.d_logits.iter_mut().zip(&other.d_logits) {
            for (g, og) in row.iter_mut().zip(orow) {
                *g += scale * og;
            }
        }
        self.d_sim
            .extend(other.d_sim.iter().map(|&(i, j, g)| (i, j, scale * g)));
    }
}

impl ModelParams {
    /// Seeded Kaiming fan-in initialization; no classes registered yet.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![cfg.input_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.embedding_dim);
        let layers = (0..dims.len() - 1)
            .map(|l| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, TAG_LAYER + l as u64));
                DenseLayer::kaiming(dims[l], dims[l + 1], &mut rng)
            })
            .collect();
        Ok(ModelParams {
            layers,
            proxies: Vec::new(),
            classes: Vec::new(),
            tau: cfg.tau,
            embedding_dim: cfg.embedding_dim,
            proxy_init_sigma: cfg.proxy_init_sigma,
            proxy_rng: ChaCha8Rng::seed_from_u64(mix(seed, TAG_PROXY)),
        })
    }

    /// Builds a model from explicit layers (mainly for tests and toys).
    pub fn from_layers(layers: Vec<DenseLayer>, tau: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        let embedding_dim = layers.last().unwrap().out_dim;
        Ok(ModelParams {
            layers,
            proxies: Vec::new(),
            classes: Vec::new(),
            tau,
            embedding_dim,
            proxy_init_sigma: 0.01,
            proxy_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class id of a column.
    pub fn class_of(&self, column: usize) -> usize {
        self.classes[column]
    }

    /// Column of a class id, if registered.
    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn registered_classes(&self) -> &[usize] {
        &self.classes
    }

    /// Registers any unseen class ids, drawing fresh proxies from the seeded
    /// Gaussian. Returns the number of newly registered classes.
    pub fn ensure_registered(&mut self, labels: impl IntoIterator<Item = usize>) -> usize {
        let mut added = 0;
        for label in labels {
            if self.column_of(label).is_none() {
                let dist = Normal::new(0.0, self.proxy_init_sigma).expect("valid sigma");
                let proxy: Vec<f64> = (0..self.embedding_dim)
                    .map(|_| dist.sample(&mut self.proxy_rng))
                    .collect();
                self.register_class_with(label, proxy);
                added += 1;
            }
        }
        added
    }

    /// Registers a class with an explicit proxy vector.
    pub fn register_class_with(&mut self, class: usize, proxy: Vec<f64>) {
        assert_eq!(proxy.len(), self.embedding_dim, "proxy dimension mismatch");
        if self.column_of(class).is_none() {
            self.classes.push(class);
            self.proxies.push(proxy);
        }
    }

    /// Full forward pass: embedding plus logits over registered classes.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardRecord> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, extractor expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers);
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(h.clone());
            let pre = layer.apply(&h);
            if l + 1 < n_layers {
                h = pre.iter().map(|&v| v.max(0.0)).collect();
            } else {
                h = pre.clone();
            }
            preacts.push(pre);
        }
        let u = preacts.last().unwrap();
        let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if u_norm == 0.0 {
            return Err(Error::Domain(
                "embedding collapsed to the zero vector (all hidden units inactive)".into(),
            ));
        }
        let z: Vec<f64> = u.iter().map(|v| v / u_norm).collect();

        let mut cosines = Vec::with_capacity(self.proxies.len());
        for w in &self.proxies {
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            cosines.push(z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wn);
        }
        let logits = cosines.iter().map(|c| c / self.tau).collect();
        Ok(ForwardRecord {
            input: x.to_vec(),
            layer_inputs,
            preacts,
            u_norm,
            z,
            cosines,
            logits,
        })
    }

    /// Chains per-logit and per-pair loss gradients into parameter space.
    pub fn backward(&self, records: &[ForwardRecord], loss: &LossGrads) -> Grads {
        let mut grads = Grads::zeros_like(self);
        let cols = self.proxies.len();
        let proxy_norms: Vec<f64> = self
            .proxies
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();

        let mut d_z: Vec<Vec<f64>> = records.iter().map(|r| vec![0.0; r.z.len()]).collect();

        for (i, rec) in records.iter().enumerate() {
            let row = &loss.d_logits[i];
            debug_assert_eq!(row.len(), cols);
            for c in 0..cols {
                let g = row[c];
                if g == 0.0 {
                    continue;
                }
                let w = &self.proxies[c];
                let wn = proxy_norms[c];
                let cos = rec.cosines[c];
                // o_c = <z, w/||w||> / tau
                for k in 0..rec.z.len() {
                    let w_hat = w[k] / wn;
                    d_z[i][k] += g * w_hat / self.tau;
                    grads.proxies[c][k] += g * (rec.z[k] - cos * w_hat) / (self.tau * wn);
                }
            }
        }

        // s_ij = <z_i, z_j> / tau couples both embeddings.
        for &(i, j, g) in &loss.d_sim {
            if g == 0.0 {
                continue;
            }
            for k in 0..records[i].z.len() {
                d_z[i][k] += g * records[j].z[k] / self.tau;
                d_z[j][k] += g * records[i].z[k] / self.tau;
            }
        }

        for (rec, gz) in records.iter().zip(&d_z) {
            self.backward_extractor(rec, gz, &mut grads);
        }
        grads
    }

    fn backward_extractor(&self, rec: &ForwardRecord, d_z: &[f64], grads: &mut Grads) {
        // Through z = u/||u||: dL/du = (g - (g.z) z) / ||u||.
        let mut delta = normalize_backward(rec.u_norm, &rec.z, d_z);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &rec.layer_inputs[l];
            let lg = &mut grads.layers[l];
            for r in 0..layer.out_dim {
                lg.bias[r] += delta[r];
                let row = &mut lg.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += delta[r] * x;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for r in 0..layer.out_dim {
                    let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += delta[r] * w;
                    }
                }
                // ReLU between layers: gate by the previous pre-activation.
                for (p, &pre) in prev.iter_mut().zip(&rec.preacts[l - 1]) {
                    if pre <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// One plain SGD descent step over every parameter tensor.
    pub fn sgd_step(&mut self, grads: &Grads, eta: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() || grads.proxies.len() != self.proxies.len() {
            return Err(Error::Shape(
                "gradient layout does not match parameters".into(),
            ));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if layer.weights.len() != g.weights.len() || layer.bias.len() != g.bias.len() {
                return Err(Error::Shape("layer gradient shape mismatch".into()));
            }
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= eta * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= eta * gb;
            }
        }
        for (p, gp) in self.proxies.iter_mut().zip(&grads.proxies) {
            if p.len() != gp.len() {
                return Err(Error::Shape("proxy gradient shape mismatch".into()));
            }
            for (w, gw) in p.iter_mut().zip(gp) {
                *w -= eta * gw;
            }
        }
        Ok(())
    }

    /// Flat parameter vector: layer weights and biases in order, then proxies
    /// in column order. Mirrors `set_from_flat`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        for p in &self.proxies {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
            + self.proxies.iter().map(|p| p.len()).sum::<usize>()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, model has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut idx = 0;
        for l in &mut self.layers {
            let wn = l.weights.len();
            l.weights.copy_from_slice(&flat[idx..idx + wn]);
            idx += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&flat[idx..idx + bn]);
            idx += bn;
        }
        for p in &mut self.proxies {
            let pn = p.len();
            p.copy_from_slice(&flat[idx..idx + pn]);
            idx += pn;
        }
        Ok(())
    }

    /// Writes a layer-tagged CSV checkpoint (`tensor,index,value`).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "tensor,index,value")?;
        writeln!(out, "meta.tau,0,{}", self.tau)?;
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, w) in layer.weights.iter().enumerate() {
                writeln!(out, "layer{l}.w,{i},{w}")?;
            }
            for (i, b) in layer.bias.iter().enumerate() {
                writeln!(out, "layer{l}.b,{i},{b}")?;
            }
        }
        for (col, p) in self.proxies.iter().enumerate() {
            for (i, w) in p.iter().enumerate() {
                writeln!(out, "proxy{}.w,{i},{w}", self.classes[col])?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint into a freshly initialized model of the same
    /// architecture, registering proxies in file order.
    pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
        let mut params = ModelParams::init(cfg, 0)?;
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (tensor, index, value) = (
                parts.next().unwrap_or(""),
                parts.next().unwrap_or(""),
                parts.next().unwrap_or(""),
            );
            let idx: usize = index
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint line {lineno}: bad index")))?;
            let val: f64 = value
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint line {lineno}: bad value")))?;
            if tensor == "meta.tau" {
                params.tau = val;
            } else if let Some(rest) = tensor.strip_prefix("layer") {
                let (l, which) = rest.split_once('.').ok_or_else(|| {
                    Error::Config(format!("checkpoint line {lineno}: bad tensor"))
                })?;
                let l: usize = l
                    .parse()
                    .map_err(|_| Error::Config(format!("checkpoint line {lineno}: bad layer")))?;
                if l >= params.layers.len() {
                    return Err(Error::Config(format!(
                        "checkpoint line {lineno}: layer {l} out of range"
                    )));
                }
                let slot = match which {
                    "w" => params.layers[l].weights.get_mut(idx),
                    "b" => params.layers[l].bias.get_mut(idx),
                    _ => None,
                };
                *slot.ok_or_else(|| {
                    Error::Config(format!("checkpoint line {lineno}: index out of range"))
                })? = val;
            } else if let Some(rest) = tensor.strip_prefix("proxy") {
                let (class, _) = rest.split_once('.').ok_or_else(|| {
                    Error::Config(format!("checkpoint line {lineno}: bad tensor"))
                })?;
                let class: usize = class
                    .parse()
                    .map_err(|_| Error::Config(format!("checkpoint line {lineno}: bad class")))?;
                if params.column_of(class).is_none() {
                    params.register_class_with(class, vec![0.0; cfg.embedding_dim]);
                }
                let col = params.column_of(class).unwrap();
                *params.proxies[col].get_mut(idx).ok_or_else(|| {
                    Error::Config(format!(
                        "checkpoint line {lineno}: proxy index out of range"
                    ))
                })? = val;
            } else {
                return Err(Error::Config(format!(
                    "checkpoint line {lineno}: unknown tensor {tensor}"
                )));
            }
        }
        Ok(params)
    }

    /// Softmax prediction as a class id, ties to the lowest id.
    pub fn predict(&self, record: &ForwardRecord) -> Result<usize> {
        let p = softmax_prob(&record.logits)?;
        let mut best = 0usize;
        for c in 1..p.len() {
            let better =
                p[c] > p[best] || (p[c] == p[best] && self.classes[c] < self.classes[best]);
            if better {
                best = c;
            }
        }
        Ok(self.classes[best])
    }
}

/// dL/du for z = u/||u||; the result is orthogonal to z.
pub(crate) fn normalize_backward(u_norm: f64, z: &[f64], d_z: &[f64]) -> Vec<f64> {
    let dot: f64 = d_z.iter().zip(z).map(|(a, b)| a * b).sum();
    d_z.iter()
        .zip(z)
        .map(|(g, zi)| (g - dot * zi) / u_norm)
        .collect()
}

/// Numerically stable softmax with max-subtraction.
pub fn softmax_prob(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax over an empty class set".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&o| (o - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Argmax over a probability vector, ties to the lowest index.
pub fn predict_softmax(p: &[f64]) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::Domain("prediction over an empty class set".into()));
    }
    let mut best = 0;
    for (c, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Buffer-derived class means under the current extractor.
#[derive(Debug, Clone)]
pub struct NcmState {
    /// `(class id, mean embedding)` sorted by class id.
    pub means: Vec<(usize, Vec<f64>)>,
}

/// Recomputes every buffered sample's embedding and averages per class.
pub fn ncm_fit(buf: &MemoryBuffer, params: &ModelParams) -> Result<NcmState> {
    if buf.is_empty() {
        return Err(Error::Domain("NCM fit requires a non-empty buffer".into()));
    }
    let mut sums: Vec<(usize, Vec<f64>, usize)> = Vec::new();
    for e in buf.entries() {
        let rec = params.forward(&e.sample.features)?;
        match sums.iter_mut().find(|(c, _, _)| *c == e.sample.label) {
            Some((_, sum, n)) => {
                for (s, z) in sum.iter_mut().zip(&rec.z) {
                    *s += z;
                }
                *n += 1;
            }
            None => sums.push((e.sample.label, rec.z.clone(), 1)),
        }
    }
    sums.sort_by_key(|(c, _, _)| *c);
    let means = sums
        .into_iter()
        .map(|(c, sum, n)| (c, sum.iter().map(|s| s / n as f64).collect()))
        .collect();
    Ok(NcmState { means })
}

/// Nearest class mean in Euclidean distance, ties to the lowest class id.
pub fn ncm_predict(state: &NcmState, z: &[f64]) -> Result<usize> {
    if state.means.is_empty() {
        return Err(Error::Domain(
            "NCM prediction with no fitted classes".into(),
        ));
    }
    let mut best_class = state.means[0].0;
    let mut best_d = f64::INFINITY;
    for (c, mean) in &state.means {
        let d: f64 = mean.iter().zip(z).map(|(m, v)| (m - v) * (m - v)).sum();
        if d < best_d {
            best_d = d;
            best_class = *c;
        }
    }
    Ok(best_class)
}
