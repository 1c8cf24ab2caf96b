//! Two-layer perceptron head over fixed features.
//!
//! `input -> relu(hidden) -> softmax(classes)` with `hidden = input_dim / 2`.
//! Classes are added by appending output rows; rows that existed before an
//! expansion are frozen and never updated again. Exemplars handed to
//! [`PerceptronModel::expand_classes`] are replayed in every later
//! [`PerceptronModel::train`] call.
//!
//! Model files are little-endian: magic `OWLP`, `u32` version (1), `u32`
//! input dim, `u32` hidden, `u32` class count, the class ids (`u32` each),
//! `u32` frozen count and the frozen row indices (`u32` each), the float64
//! blocks `W1` (hidden x input, row-major), `b1`, `W2` (classes x hidden),
//! `b2`, and finally the rehearsal exemplars: `u32` class count, then per
//! class its `u32` id, `u32` count and `count x input` float32 values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::features::{ClassId, FeatureVector};
use crate::rng::{derive_seed, stream, SeededRng};
use crate::scores::ClassScores;

const MODEL_MAGIC: &[u8; 4] = b"OWLP";
const MODEL_VERSION: u32 = 1;

/// Exemplars kept per old class for rehearsal.
pub const EXEMPLARS_PER_CLASS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_phase0")]
    pub lr_phase0: f64,
    #[serde(default = "default_lr_later")]
    pub lr_later: f64,
    #[serde(default = "default_batch", rename = "batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Filled from the run seed; not read from config files.
    #[serde(skip)]
    pub rng_seed: u64,
}

fn default_epochs() -> usize {
    300
}
fn default_lr_phase0() -> f64 {
    1e-2
}
fn default_lr_later() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            lr_phase0: default_lr_phase0(),
            lr_later: default_lr_later(),
            batch_size: default_batch(),
            momentum: default_momentum(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr.is_finite() && lr > 0.0;
        if !lr_ok(self.lr_phase0) || !lr_ok(self.lr_later) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.momentum.is_finite() && self.momentum >= 0.0) {
            return Err(Error::InvalidArgument("momentum must be non-negative".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, phase_index: usize) -> f64 {
        if phase_index == 0 {
            self.lr_phase0
        } else {
            self.lr_later
        }
    }
}

/// Gradient (or any per-parameter quantity) laid out like the model's
/// parameter blocks `[W1, b1, W2, b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &PerceptronModel) -> Self {
        Gradients {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn scale(&mut self, f: f64) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x *= f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptronModel {
    input_dim: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    class_ids: Vec<ClassId>,
    frozen: BTreeSet<usize>,
    rehearsal: BTreeMap<ClassId, Vec<FeatureVector>>,
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl PerceptronModel {
    /// Fresh model with uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero biases.
    pub fn init(input_dim: usize, class_ids: &[ClassId], rng_seed: u64) -> Result<Self> {
        if input_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "input dim must be at least 2, got {input_dim}"
            )));
        }
        if class_ids.is_empty() {
            return Err(Error::InvalidArgument("at least one class is required".into()));
        }
        check_unique(class_ids, &[])?;
        let hidden = input_dim / 2;
        let classes = class_ids.len();
        let mut rng = SeededRng::substream(rng_seed, stream::MLP_INIT);
        let b = glorot_bound(input_dim, hidden);
        let w1 = (0..hidden * input_dim).map(|_| rng.uniform_range(-b, b)).collect();
        let b = glorot_bound(hidden, classes);
        let w2 = (0..classes * hidden).map(|_| rng.uniform_range(-b, b)).collect();
        Ok(PerceptronModel {
            input_dim,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
            class_ids: class_ids.to_vec(),
            frozen: BTreeSet::new(),
            rehearsal: BTreeMap::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn frozen_rows(&self) -> &BTreeSet<usize> {
        &self.frozen
    }

    pub fn rehearsal(&self) -> &BTreeMap<ClassId, Vec<FeatureVector>> {
        &self.rehearsal
    }

    /// Output-layer row `W2[row]` followed by `b2[row]`.
    pub fn output_row(&self, row: usize) -> (&[f64], f64) {
        (&self.w2[row * self.hidden..(row + 1) * self.hidden], self.b2[row])
    }

    /// Parameter blocks in the order `[W1, b1, W2, b2]`.
    pub fn param_blocks(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn param_blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn row_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("perceptron input".into()));
        }
        Ok(())
    }

    /// Hidden pre-activations and softmax output for one input.
    fn activations(&self, x: &[f64], pre: &mut [f64], probs: &mut [f64]) {
        let (inp, hid) = (self.input_dim, self.hidden);
        for (j, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[j * inp..(j + 1) * inp];
            *p = self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        for (c, out) in probs.iter_mut().enumerate() {
            let row = &self.w2[c * hid..(c + 1) * hid];
            *out = self.b2[c]
                + row
                    .iter()
                    .zip(pre.iter())
                    .map(|(w, h)| w * h.max(0.0))
                    .sum::<f64>();
        }
        softmax_in_place(probs);
    }

    /// Softmax class probabilities, in `class_ids` order.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut pre = vec![0.0; self.hidden];
        let mut probs = vec![0.0; self.class_ids.len()];
        self.activations(x, &mut pre, &mut probs);
        Ok(probs)
    }

    pub fn predict(&self, query: &FeatureVector) -> Result<ClassScores> {
        let probs = self.forward(&query.to_f64())?;
        Ok(ClassScores::new(
            self.class_ids.iter().copied().zip(probs).collect(),
        ))
    }

    fn encode(&self, samples: &[(ClassId, &FeatureVector)]) -> Result<Vec<(usize, Vec<f64>)>> {
        samples
            .iter()
            .map(|&(class, fv)| {
                let row = self.row_of(class).ok_or(Error::UnknownClass(class))?;
                let x = fv.to_f64();
                self.check_input(&x)?;
                Ok((row, x))
            })
            .collect()
    }

    /// Mean softmax cross-entropy over `samples`.
    pub fn loss(&self, samples: &[(ClassId, &FeatureVector)]) -> Result<f64> {
        let encoded = self.encode(samples)?;
        let refs: Vec<(usize, &[f64])> = encoded.iter().map(|(r, x)| (*r, x.as_slice())).collect();
        let mut pre = vec![0.0; self.hidden];
        let mut probs = vec![0.0; self.class_ids.len()];
        let total: f64 = refs
            .iter()
            .map(|&(row, x)| {
                self.activations(x, &mut pre, &mut probs);
                -probs[row].ln()
            })
            .sum();
        Ok(total / refs.len() as f64)
    }

    /// Mean cross-entropy and its analytic gradient.
    pub fn loss_and_gradient(
        &self,
        samples: &[(ClassId, &FeatureVector)],
    ) -> Result<(f64, Gradients)> {
        let encoded = self.encode(samples)?;
        let refs: Vec<(usize, &[f64])> = encoded.iter().map(|(r, x)| (*r, x.as_slice())).collect();
        let mut grads = Gradients::zeros_like(self);
        let loss = self.accumulate_gradient(&refs, &mut grads);
        Ok((loss, grads))
    }

    /// Writes the batch-mean gradient into `grads` and returns the mean loss.
    fn accumulate_gradient(&self, batch: &[(usize, &[f64])], grads: &mut Gradients) -> f64 {
        let (inp, hid, classes) = (self.input_dim, self.hidden, self.class_ids.len());
        for v in [&mut grads.w1, &mut grads.b1, &mut grads.w2, &mut grads.b2] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut pre = vec![0.0; hid];
        let mut probs = vec![0.0; classes];
        let mut dh = vec![0.0; hid];
        let mut loss = 0.0;
        for &(target, x) in batch {
            self.activations(x, &mut pre, &mut probs);
            loss -= probs[target].ln();
            // dL/dlogits = p - onehot
            probs[target] -= 1.0;
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (c, &d) in probs.iter().enumerate() {
                grads.b2[c] += d;
                let w_row = &self.w2[c * hid..(c + 1) * hid];
                let g_row = &mut grads.w2[c * hid..(c + 1) * hid];
                for j in 0..hid {
                    g_row[j] += d * pre[j].max(0.0);
                    dh[j] += d * w_row[j];
                }
            }
            for j in 0..hid {
                if pre[j] <= 0.0 {
                    continue;
                }
                let d = dh[j];
                grads.b1[j] += d;
                let g_row = &mut grads.w1[j * inp..(j + 1) * inp];
                for (g, v) in g_row.iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        loss / n
    }

    /// Mini-batch SGD with momentum on softmax cross-entropy over `samples`
    /// plus the stored rehearsal exemplars. Frozen output rows are left
    /// bit-identical. `phase_index` 0 uses `lr_phase0`, later phases `lr_later`.
    pub fn train(
        &self,
        samples: &[(ClassId, &FeatureVector)],
        config: &TrainConfig,
        phase_index: usize,
    ) -> Result<PerceptronModel> {
        config.validate()?;
        let mut data: Vec<(ClassId, &FeatureVector)> = samples.to_vec();
        for (&class, exemplars) in &self.rehearsal {
            data.extend(exemplars.iter().map(|fv| (class, fv)));
        }
        if data.is_empty() {
            return Err(Error::MissingData("no training samples".into()));
        }
        let encoded = self.encode(&data)?;
        let mut model = self.clone();
        if config.epochs == 0 {
            return Ok(model);
        }

        let lr = config.learning_rate(phase_index);
        let hid = model.hidden;
        let trainable: Vec<usize> = (0..model.class_ids.len())
            .filter(|r| !model.frozen.contains(r))
            .collect();
        let mut velocity = Gradients::zeros_like(&model);
        let mut grads = Gradients::zeros_like(&model);
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut rng = SeededRng::new(derive_seed(
            derive_seed(config.rng_seed, stream::MLP_SHUFFLE),
            phase_index as u64,
        ));
        let mut batch: Vec<(usize, &[f64])> = Vec::with_capacity(config.batch_size);

        for epoch in 0..config.epochs {
            rng.shuffle(&mut order);
            for (b, chunk) in order.chunks(config.batch_size).enumerate() {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| (encoded[i].0, encoded[i].1.as_slice())));
                let loss = model.accumulate_gradient(&batch, &mut grads);
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss {loss} at epoch {epoch}, batch {b} (lr {lr}, batch size {})",
                        batch.len()
                    )));
                }
                let mu = config.momentum;
                let step = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = mu * *v - lr * g;
                        *p += *v;
                    }
                };
                step(&mut model.w1, &mut velocity.w1, &grads.w1);
                step(&mut model.b1, &mut velocity.b1, &grads.b1);
                for &r in &trainable {
                    let span = r * hid..(r + 1) * hid;
                    step(
                        &mut model.w2[span.clone()],
                        &mut velocity.w2[span.clone()],
                        &grads.w2[span],
                    );
                    step(
                        &mut model.b2[r..r + 1],
                        &mut velocity.b2[r..r + 1],
                        &grads.b2[r..r + 1],
                    );
                }
            }
        }
        Ok(model)
    }

    /// Appends output rows for `new_class_ids`, freezes every existing row,
    /// and replaces the rehearsal set with `exemplars` (keyed by old class).
    pub fn expand_classes(
        &self,
        new_class_ids: &[ClassId],
        exemplars: BTreeMap<ClassId, Vec<FeatureVector>>,
        rng_seed: u64,
    ) -> Result<PerceptronModel> {
        check_unique(new_class_ids, &self.class_ids)?;
        for (&class, fvs) in &exemplars {
            if self.row_of(class).is_none() {
                return Err(Error::UnknownClass(class));
            }
            if let Some(fv) = fvs.iter().find(|fv| fv.dim() != self.input_dim) {
                return Err(Error::DimMismatch {
                    expected: self.input_dim,
                    actual: fv.dim(),
                });
            }
        }
        let mut model = self.clone();
        model.frozen.extend(0..self.class_ids.len());
        let total = self.class_ids.len() + new_class_ids.len();
        let bound = glorot_bound(self.hidden, total);
        let mut rng = SeededRng::new(derive_seed(
            derive_seed(rng_seed, stream::MLP_EXPAND),
            self.class_ids.len() as u64,
        ));
        for &class in new_class_ids {
            model
                .w2
                .extend((0..self.hidden).map(|_| rng.uniform_range(-bound, bound)));
            model.b2.push(0.0);
            model.class_ids.push(class);
        }
        model.rehearsal = exemplars;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.len_u32(self.input_dim)?;
        w.len_u32(self.hidden)?;
        w.len_u32(self.class_ids.len())?;
        self.class_ids.iter().for_each(|&c| w.u32(c));
        w.len_u32(self.frozen.len())?;
        for &r in &self.frozen {
            w.len_u32(r)?;
        }
        for block in self.param_blocks() {
            block.iter().for_each(|&v| w.f64(v));
        }
        w.len_u32(self.rehearsal.len())?;
        for (&class, fvs) in &self.rehearsal {
            w.u32(class);
            w.len_u32(fvs.len())?;
            for fv in fvs {
                fv.as_slice().iter().for_each(|&v| w.f32(v));
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.header(MODEL_MAGIC, MODEL_VERSION)?;
        let input_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        if input_dim < 2 || hidden != input_dim / 2 {
            return Err(Error::Format(format!(
                "inconsistent layer sizes: input {input_dim}, hidden {hidden}"
            )));
        }
        let n_classes = r.u32()? as usize;
        if n_classes == 0 || n_classes > r.remaining() / 4 {
            return Err(Error::Format(format!("implausible class count {n_classes}")));
        }
        let class_ids = (0..n_classes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        check_unique(&class_ids, &[]).map_err(|e| Error::Format(e.to_string()))?;
        let n_frozen = r.u32()? as usize;
        let mut frozen = BTreeSet::new();
        for _ in 0..n_frozen {
            let row = r.u32()? as usize;
            if row >= n_classes {
                return Err(Error::Format(format!("frozen row {row} out of range")));
            }
            frozen.insert(row);
        }
        let weights_needed = (hidden * input_dim + hidden + n_classes * hidden + n_classes) * 8;
        if r.remaining() < weights_needed {
            return Err(Error::Format("truncated input: weight blocks".into()));
        }
        let mut block = |len: usize| -> Result<Vec<f64>> {
            let v = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format("non-finite weight".into()));
            }
            Ok(v)
        };
        let w1 = block(hidden * input_dim)?;
        let b1 = block(hidden)?;
        let w2 = block(n_classes * hidden)?;
        let b2 = block(n_classes)?;
        let n_rehearsal = r.u32()? as usize;
        let mut rehearsal = BTreeMap::new();
        for _ in 0..n_rehearsal {
            let class = r.u32()?;
            if !class_ids.contains(&class) {
                return Err(Error::Format(format!("exemplars for unknown class {class}")));
            }
            let count = r.u32()? as usize;
            if count.saturating_mul(input_dim * 4) > r.remaining() {
                return Err(Error::Format("truncated input: exemplars".into()));
            }
            let mut fvs = Vec::with_capacity(count);
            for _ in 0..count {
                let values = (0..input_dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                fvs.push(FeatureVector::new(values).map_err(|e| Error::Format(e.to_string()))?);
            }
            rehearsal.insert(class, fvs);
        }
        r.finish()?;
        Ok(PerceptronModel {
            input_dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
            class_ids,
            frozen,
            rehearsal,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_unique(new: &[ClassId], existing: &[ClassId]) -> Result<()> {
    let mut seen: BTreeSet<ClassId> = existing.iter().copied().collect();
    for &c in new {
        if !seen.insert(c) {
            return Err(Error::ClassCollision(c));
        }
    }
    Ok(())
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}
