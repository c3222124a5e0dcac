//! Dense feed-forward classifiers trained from scratch: construction with
//! per-rank width compression, forward and backward passes, cross-entropy
//! and distillation losses, SGD, and a flat binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Architecture of the full-size model and how it shrinks per cluster rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden widths of the rank-1 (uncompressed) model.
    pub hidden_widths: Vec<usize>,
    pub class_count: usize,
    /// Width ratio between consecutive ranks, in (0, 1].
    pub compression_factor: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count < 2 {
            return Err(Error::Config(format!(
                "model needs input_dim >= 1 and class_count >= 2, got {} and {}",
                self.input_dim, self.class_count
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.compression_factor > 0.0 && self.compression_factor <= 1.0) {
            return Err(Error::Config(format!(
                "compression factor must be in (0, 1], got {}",
                self.compression_factor
            )));
        }
        Ok(())
    }

    /// Hidden widths of the model for cluster `rank` (1 = master). Only
    /// hidden layers shrink; input and output sizes are fixed.
    pub fn widths_for_rank(&self, rank: usize) -> Vec<usize> {
        let scale = self.compression_factor.powi(rank.max(1) as i32 - 1);
        self.hidden_widths
            .iter()
            .map(|&w| ((w as f64 * scale).round() as usize).max(1))
            .collect()
    }

    pub fn layer_shapes(&self, rank: usize) -> Vec<LayerShape> {
        let mut dims = vec![self.input_dim];
        dims.extend(self.widths_for_rank(rank));
        dims.push(self.class_count);
        dims.windows(2)
            .map(|d| LayerShape {
                inputs: d[0],
                outputs: d[1],
            })
            .collect()
    }

    pub fn param_count(&self, rank: usize) -> usize {
        self.layer_shapes(rank)
            .iter()
            .map(LayerShape::param_count)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Flat parameter vector with its layer manifest. Each layer stores its
/// weight matrix row-major (`outputs x inputs`) followed by its biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl WeightVector {
    pub fn zeros(shapes: Vec<LayerShape>) -> Self {
        let len = shapes.iter().map(LayerShape::param_count).sum();
        Self {
            values: vec![0.0; len],
            shapes,
        }
    }

    pub fn from_parts(values: Vec<f64>, shapes: Vec<LayerShape>) -> Result<Self> {
        let len: usize = shapes.iter().map(LayerShape::param_count).sum();
        if shapes.is_empty() || values.len() != len {
            return Err(Error::Shape(format!(
                "{} values for a manifest of {} parameters",
                values.len(),
                len
            )));
        }
        if shapes.windows(2).any(|s| s[0].outputs != s[1].inputs) {
            return Err(Error::Shape("consecutive layers do not chain".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("weights must be finite".into()));
        }
        Ok(Self { values, shapes })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn class_count(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.outputs)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &WeightVector) -> Result<()> {
        if self.shapes != other.shapes {
            return Err(Error::Shape(format!(
                "manifests differ: {:?} vs {:?}",
                self.shapes, other.shapes
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &WeightVector) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut at = 0;
        for s in &self.shapes {
            out.push(at);
            at += s.param_count();
        }
        out
    }

    /// Per-layer (weights, biases) copies.
    pub fn to_layers(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.shapes
            .iter()
            .zip(self.offsets())
            .map(|(s, at)| {
                let w_end = at + s.inputs * s.outputs;
                (
                    self.values[at..w_end].to_vec(),
                    self.values[w_end..w_end + s.outputs].to_vec(),
                )
            })
            .collect()
    }

    pub fn from_layers(shapes: Vec<LayerShape>, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if shapes.len() != layers.len() {
            return Err(Error::Shape("layer count mismatch".into()));
        }
        let mut values = Vec::new();
        for (s, (w, b)) in shapes.iter().zip(layers) {
            if w.len() != s.inputs * s.outputs || b.len() != s.outputs {
                return Err(Error::Shape(format!("layer data does not match {s:?}")));
            }
            values.extend_from_slice(w);
            values.extend_from_slice(b);
        }
        Self::from_parts(values, shapes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FRWV";
const CHECKPOINT_VERSION: u32 = 1;

impl WeightVector {
    /// Little-endian checkpoint: magic, version, layer count, per-layer
    /// (inputs, outputs) as u32, value count as u64, then raw f64 values.
    pub fn write_checkpoint(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.shapes.len() as u32).to_le_bytes())?;
        for s in &self.shapes {
            out.write_all(&(s.inputs as u32).to_le_bytes())?;
            out.write_all(&(s.outputs as u32).to_le_bytes())?;
        }
        out.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut input: impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::Shape(format!("checkpoint: {reason}"));
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |input: &mut dyn Read| -> Result<u32> {
            input
                .read_exact(&mut u32_buf)
                .map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let layers = read_u32(&mut input)? as usize;
        let mut shapes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let inputs = read_u32(&mut input)? as usize;
            let outputs = read_u32(&mut input)? as usize;
            shapes.push(LayerShape { inputs, outputs });
        }
        let mut u64_buf = [0u8; 8];
        input
            .read_exact(&mut u64_buf)
            .map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(u64_buf) as usize;
        let expected: usize = shapes.iter().map(LayerShape::param_count).sum();
        if count != expected {
            return Err(bad("value count does not match manifest"));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            input
                .read_exact(&mut u64_buf)
                .map_err(|_| bad("truncated values"))?;
            values.push(f64::from_le_bytes(u64_buf));
        }
        Self::from_parts(values, shapes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

/// Pre-softmax outputs for a batch, row-major `rows x classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitBatch {
    rows: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogitBatch {
    pub fn new(rows: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * classes {
            return Err(Error::Shape(format!(
                "{} logits for a {rows}x{classes} batch",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("logits must be finite".into()));
        }
        Ok(Self {
            rows,
            classes,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.classes..(r + 1) * self.classes]
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Rank-compressed model with seeded fan-in scaled uniform weights and
/// zero biases. Hidden layers use the He range sqrt(6 / fan_in) since they
/// feed rectifiers; the linear output layer uses sqrt(1 / fan_in).
pub fn build_model(spec: &ModelSpec, rank: usize, seed: u64) -> Result<WeightVector> {
    spec.validate()?;
    let shapes = spec.layer_shapes(rank);
    let mut rng = seed::rng(seed, &[seed::MODEL_INIT, rank as u64]);
    let mut values = Vec::with_capacity(spec.param_count(rank));
    let last = shapes.len() - 1;
    for (l, s) in shapes.iter().enumerate() {
        let limit = if l == last {
            (1.0 / s.inputs as f64).sqrt()
        } else {
            (6.0 / s.inputs as f64).sqrt()
        };
        for _ in 0..s.inputs * s.outputs {
            values.push(rng.gen_range(-limit..limit));
        }
        values.extend(std::iter::repeat_n(0.0, s.outputs));
    }
    WeightVector::from_parts(values, shapes)
}

fn batch_rows(w: &WeightVector, x: &[f64]) -> Result<usize> {
    let d = w.input_dim();
    if !x.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "input of length {} is not a multiple of input_dim {d}",
            x.len()
        )));
    }
    Ok(x.len() / d)
}

/// Layer outputs kept for backpropagation: `acts[0]` is the input and
/// `acts[l]` the (rectified) output of layer `l - 1`; the last entry holds
/// the logits.
struct ForwardPass {
    rows: usize,
    acts: Vec<Vec<f64>>,
}

fn forward_pass(w: &WeightVector, x: &[f64]) -> Result<ForwardPass> {
    let rows = batch_rows(w, x)?;
    let offsets = w.offsets();
    let last = w.shapes.len() - 1;
    let mut acts = Vec::with_capacity(w.shapes.len() + 1);
    acts.push(x.to_vec());
    for (l, s) in w.shapes.iter().enumerate() {
        let at = offsets[l];
        let weights = &w.values[at..at + s.inputs * s.outputs];
        let bias = &w.values[at + s.inputs * s.outputs..at + s.param_count()];
        let input = &acts[l];
        let mut out = vec![0.0; rows * s.outputs];
        for r in 0..rows {
            let a = &input[r * s.inputs..(r + 1) * s.inputs];
            for o in 0..s.outputs {
                let row = &weights[o * s.inputs..(o + 1) * s.inputs];
                let mut z = bias[o];
                for (wi, ai) in row.iter().zip(a) {
                    z += wi * ai;
                }
                out[r * s.outputs + o] = if l < last { z.max(0.0) } else { z };
            }
        }
        acts.push(out);
    }
    Ok(ForwardPass { rows, acts })
}

/// Logits of `w` on a row-major feature batch.
pub fn forward(w: &WeightVector, x: &[f64]) -> Result<LogitBatch> {
    let mut pass = forward_pass(w, x)?;
    let logits = pass.acts.pop().expect("at least one layer");
    LogitBatch::new(pass.rows, w.class_count(), logits)
}

/// Backpropagates gradients of the loss w.r.t. the logits.
fn backward(w: &WeightVector, pass: &ForwardPass, mut delta: Vec<f64>) -> WeightVector {
    let offsets = w.offsets();
    let mut grad = WeightVector::zeros(w.shapes.clone());
    let rows = pass.rows;
    for l in (0..w.shapes.len()).rev() {
        let s = w.shapes[l];
        let at = offsets[l];
        let input = &pass.acts[l];
        {
            let (gw, gb) = grad.values[at..at + s.param_count()].split_at_mut(s.inputs * s.outputs);
            for r in 0..rows {
                let a = &input[r * s.inputs..(r + 1) * s.inputs];
                for o in 0..s.outputs {
                    let d = delta[r * s.outputs + o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, ai) in gw[o * s.inputs..(o + 1) * s.inputs].iter_mut().zip(a) {
                        *g += d * ai;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let weights = &w.values[at..at + s.inputs * s.outputs];
        let mut prev = vec![0.0; rows * s.inputs];
        for r in 0..rows {
            let p = &mut prev[r * s.inputs..(r + 1) * s.inputs];
            for o in 0..s.outputs {
                let d = delta[r * s.outputs + o];
                if d == 0.0 {
                    continue;
                }
                for (pi, wi) in p.iter_mut().zip(&weights[o * s.inputs..(o + 1) * s.inputs]) {
                    *pi += d * wi;
                }
            }
            // Rectifier derivative of the layer that produced the input.
            for (pi, ai) in p.iter_mut().zip(&input[r * s.inputs..(r + 1) * s.inputs]) {
                if *ai <= 0.0 {
                    *pi = 0.0;
                }
            }
        }
        delta = prev;
    }
    grad
}

fn softmax_into(logits: &[f64], scale: f64, out: &mut [f64]) -> f64 {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    // log of the normalizer, for log-softmax.
    max + sum.ln()
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its gradient.
pub fn ce_loss_and_grad(w: &WeightVector, x: &[f64], y: &[usize]) -> Result<(f64, WeightVector)> {
    let pass = forward_pass(w, x)?;
    let c = w.class_count();
    check_labels(y, pass.rows, c)?;
    let logits = pass.acts.last().expect("logits");
    let n = pass.rows as f64;
    let mut delta = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for r in 0..pass.rows {
        let z = &logits[r * c..(r + 1) * c];
        let p = &mut delta[r * c..(r + 1) * c];
        let log_norm = softmax_into(z, 1.0, p);
        loss += log_norm - z[y[r]];
        p[y[r]] -= 1.0;
        for v in p.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, backward(w, &pass, delta)))
}

/// Distillation settings: softmax temperature and the weight of the
/// soft-target term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdParams {
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for KdParams {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            lambda: 0.5,
        }
    }
}

/// `(1 - lambda) CE(student, y) + lambda T^2 KL(soft(teacher) || soft(student))`,
/// averaged over the batch, with its gradient.
pub fn kd_loss_and_grad(
    w: &WeightVector,
    x: &[f64],
    y: &[usize],
    teacher: &LogitBatch,
    kd: KdParams,
) -> Result<(f64, WeightVector)> {
    if !(kd.temperature > 0.0) || !(0.0..=1.0).contains(&kd.lambda) {
        return Err(Error::Config(format!(
            "distillation needs T > 0 and lambda in [0, 1], got {kd:?}"
        )));
    }
    let pass = forward_pass(w, x)?;
    let c = w.class_count();
    check_labels(y, pass.rows, c)?;
    if teacher.rows() != pass.rows || teacher.classes() != c {
        return Err(Error::Shape(format!(
            "teacher logits {}x{} do not match batch {}x{c}",
            teacher.rows(),
            teacher.classes(),
            pass.rows
        )));
    }
    let logits = pass.acts.last().expect("logits");
    let n = pass.rows as f64;
    let t = kd.temperature;
    let inv_t = 1.0 / t;
    let (hard, soft) = (1.0 - kd.lambda, kd.lambda);
    let mut delta = vec![0.0; logits.len()];
    let mut p_soft = vec![0.0; c];
    let mut q_soft = vec![0.0; c];
    let mut loss = 0.0;
    for r in 0..pass.rows {
        let z = &logits[r * c..(r + 1) * c];
        let p = &mut delta[r * c..(r + 1) * c];
        let log_norm = softmax_into(z, 1.0, p);
        let ce = log_norm - z[y[r]];
        p[y[r]] -= 1.0;

        let log_norm_s = softmax_into(z, inv_t, &mut p_soft);
        let log_norm_t = softmax_into(teacher.row(r), inv_t, &mut q_soft);
        let mut kl = 0.0;
        for k in 0..c {
            if q_soft[k] > 0.0 {
                let log_q = teacher.row(r)[k] * inv_t - log_norm_t;
                let log_p = z[k] * inv_t - log_norm_s;
                kl += q_soft[k] * (log_q - log_p);
            }
        }
        loss += hard * ce + soft * t * t * kl;
        for k in 0..c {
            p[k] = (hard * p[k] + soft * t * (p_soft[k] - q_soft[k])) / n;
        }
    }
    Ok((loss / n, backward(w, &pass, delta)))
}

/// `w - eta * grad`.
pub fn sgd_step(w: &WeightVector, grad: &WeightVector, eta: f64) -> Result<WeightVector> {
    let mut out = w.clone();
    out.axpy(-eta, grad)?;
    Ok(out)
}

pub fn predict(w: &WeightVector, x: &[f64]) -> Result<Vec<usize>> {
    Ok(forward(w, x)?.argmax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(hidden: Vec<usize>) -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden_widths: hidden,
            class_count: 4,
            compression_factor: 0.5,
        }
    }

    #[test]
    fn compression_widths() {
        let s = ModelSpec {
            input_dim: 10,
            hidden_widths: vec![128, 64],
            class_count: 6,
            compression_factor: 0.5,
        };
        assert_eq!(s.widths_for_rank(1), vec![128, 64]);
        assert_eq!(s.widths_for_rank(2), vec![64, 32]);
        let single = ModelSpec {
            hidden_widths: vec![128],
            ..s.clone()
        };
        assert_eq!(single.widths_for_rank(3), vec![32]);
        assert_eq!(s.widths_for_rank(20), vec![1, 1]);
        for r in 1..8 {
            let (a, b) = (s.widths_for_rank(r), s.widths_for_rank(r + 1));
            assert!(a.iter().zip(&b).all(|(x, y)| y <= x));
        }
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let s = spec(vec![8, 5]);
        let a = build_model(&s, 1, 3).unwrap();
        assert_eq!(a, build_model(&s, 1, 3).unwrap());
        assert_ne!(a, build_model(&s, 1, 4).unwrap());
        assert_eq!(a.len(), s.param_count(1));
        assert_eq!(build_model(&s, 2, 3).unwrap().shapes()[0].outputs, 4);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let w = WeightVector::zeros(spec(vec![5]).layer_shapes(1));
        let logits = forward(&w, &[1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(logits.rows(), 2);
        assert!(logits.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let shapes = vec![LayerShape {
            inputs: 1,
            outputs: 1,
        }];
        let w = WeightVector::from_parts(vec![1.0, 0.0], shapes).unwrap();
        assert_eq!(forward(&w, &[0.25, -3.0]).unwrap().values(), &[0.25, -3.0]);
    }

    #[test]
    fn shape_errors() {
        let w = build_model(&spec(vec![4]), 1, 0).unwrap();
        assert!(matches!(forward(&w, &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(ce_loss_and_grad(&w, &[1.0, 2.0, 3.0], &[7]).is_err());
        let other = build_model(&spec(vec![3]), 1, 0).unwrap();
        assert!(sgd_step(&w, &other, 0.1).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let w = WeightVector::zeros(spec(vec![2]).layer_shapes(1));
        let (loss, _) = ce_loss_and_grad(&w, &[0.3, 0.1, 0.2], &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_gives_near_zero_loss() {
        let shapes = vec![LayerShape {
            inputs: 1,
            outputs: 2,
        }];
        let w = WeightVector::from_parts(vec![100.0, -100.0, 0.0, 0.0], shapes).unwrap();
        let (loss, _) = ce_loss_and_grad(&w, &[1.0], &[0]).unwrap();
        assert!(loss < 1e-80);
    }

    fn finite_difference_check(
        loss: impl Fn(&WeightVector) -> (f64, WeightVector),
        w: &WeightVector,
    ) {
        let (_, grad) = loss(w);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut plus = w.clone();
            plus.values_mut()[i] += h;
            let mut minus = w.clone();
            minus.values_mut()[i] -= h;
            let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let analytic = grad.values()[i];
            assert!(
                (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "param {i}: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let w = build_model(&spec(vec![5, 4]), 1, 11).unwrap();
        let x = [0.5, -1.0, 2.0, 1.5, 0.1, -0.3, -0.7, 0.4, 0.9];
        let y = [1, 3, 0];
        finite_difference_check(|w| ce_loss_and_grad(w, &x, &y).unwrap(), &w);
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let w = build_model(&spec(vec![5]), 1, 12).unwrap();
        let x = [0.5, -1.0, 2.0, 1.5, 0.1, -0.3];
        let y = [2, 1];
        let teacher =
            LogitBatch::new(2, 4, vec![1.0, 2.0, -1.0, 0.0, 0.3, 0.3, 0.9, -2.0]).unwrap();
        for kd in [
            KdParams::default(),
            KdParams {
                temperature: 4.0,
                lambda: 0.9,
            },
        ] {
            finite_difference_check(|w| kd_loss_and_grad(w, &x, &y, &teacher, kd).unwrap(), &w);
        }
    }

    #[test]
    fn kd_with_zero_lambda_is_ce() {
        let w = build_model(&spec(vec![6, 5]), 1, 9).unwrap();
        let x = [0.5, -1.0, 2.0, 1.5, 0.0, -0.3];
        let y = [1, 3];
        let teacher =
            LogitBatch::new(2, 4, vec![1.0, 2.0, -1.0, 0.0, 0.3, 0.3, 0.9, -2.0]).unwrap();
        let ce = ce_loss_and_grad(&w, &x, &y).unwrap();
        let kd = kd_loss_and_grad(
            &w,
            &x,
            &y,
            &teacher,
            KdParams {
                temperature: 2.0,
                lambda: 0.0,
            },
        )
        .unwrap();
        assert_eq!(ce.0.to_bits(), kd.0.to_bits());
        assert_eq!(ce.1, kd.1);
    }

    #[test]
    fn kd_term_vanishes_for_identical_logits() {
        let w = build_model(&spec(vec![6]), 1, 2).unwrap();
        let x = [0.5, -1.0, 2.0];
        let own = forward(&w, &x).unwrap();
        let (full, _) = kd_loss_and_grad(
            &w,
            &x,
            &[0],
            &own,
            KdParams {
                temperature: 3.0,
                lambda: 1.0,
            },
        )
        .unwrap();
        assert!(full.abs() < 1e-12);
    }

    #[test]
    fn kd_gradient_is_continuous_in_lambda() {
        let w = build_model(&spec(vec![6, 5]), 1, 5).unwrap();
        let x = [0.5, -1.0, 2.0, 1.5, 0.0, -0.3];
        let y = [2, 0];
        let teacher =
            LogitBatch::new(2, 4, vec![3.0, 1.0, -1.0, 0.0, 0.3, -0.3, 0.9, 2.0]).unwrap();
        let (_, g0) = kd_loss_and_grad(
            &w,
            &x,
            &y,
            &teacher,
            KdParams {
                temperature: 2.0,
                lambda: 0.0,
            },
        )
        .unwrap();
        let (_, g1) = kd_loss_and_grad(
            &w,
            &x,
            &y,
            &teacher,
            KdParams {
                temperature: 2.0,
                lambda: 1e-8,
            },
        )
        .unwrap();
        for (a, b) in g0.values().iter().zip(g1.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sgd_step_examples() {
        let w = build_model(&spec(vec![4]), 1, 1).unwrap();
        let g = build_model(&spec(vec![4]), 1, 2).unwrap();
        assert_eq!(sgd_step(&w, &g, 0.0).unwrap(), w);
        assert_eq!(
            sgd_step(&w, &WeightVector::zeros(w.shapes().to_vec()), 0.3).unwrap(),
            w
        );
        let two = sgd_step(&sgd_step(&w, &g, 0.05).unwrap(), &g, 0.05).unwrap();
        let one = sgd_step(&w, &g, 0.1).unwrap();
        for (a, b) in two.values().iter().zip(one.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let w = build_model(&spec(vec![4]), 1, 1).unwrap();
        let mut bytes = Vec::new();
        w.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FRWV");
        assert_eq!(WeightVector::read_checkpoint(bytes.as_slice()).unwrap(), w);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightVector::read_checkpoint(bad.as_slice()).is_err());
        assert!(WeightVector::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        // Majority over 5 seeds: one epoch of SGD lowers the full-batch loss.
        let mut wins = 0;
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            let mut x = Vec::with_capacity(n * 3);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % 2;
                let sign = if label == 0 { -1.0 } else { 1.0 };
                for _ in 0..3 {
                    x.push(sign * 2.0 + rng.gen_range(-0.5..0.5));
                }
                y.push(label);
            }
            let s = ModelSpec {
                input_dim: 3,
                hidden_widths: vec![8],
                class_count: 2,
                compression_factor: 0.5,
            };
            let mut w = build_model(&s, 1, seed).unwrap();
            let before = ce_loss_and_grad(&w, &x, &y).unwrap().0;
            for b in 0..n / 20 {
                let (_, g) =
                    ce_loss_and_grad(&w, &x[b * 60..(b + 1) * 60], &y[b * 20..(b + 1) * 20])
                        .unwrap();
                w = sgd_step(&w, &g, 0.1).unwrap();
            }
            let after = ce_loss_and_grad(&w, &x, &y).unwrap().0;
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 3);
    }

    proptest! {
        #[test]
        fn layers_round_trip(hidden in prop::collection::vec(1usize..6, 0..3), seed in 0u64..1000) {
            let s = spec(hidden);
            let w = build_model(&s, 1, seed).unwrap();
            let back = WeightVector::from_layers(w.shapes().to_vec(), &w.to_layers()).unwrap();
            prop_assert_eq!(&back, &w);
            let mut bytes = Vec::new();
            w.write_checkpoint(&mut bytes).unwrap();
            prop_assert_eq!(WeightVector::read_checkpoint(bytes.as_slice()).unwrap(), w);
        }

        #[test]
        fn logits_finite_for_finite_weights(seed in 0u64..1000, x in prop::collection::vec(-1e3..1e3f64, 3)) {
            let w = build_model(&spec(vec![7, 3]), 1, seed).unwrap();
            prop_assert!(forward(&w, &x).unwrap().values().iter().all(|v| v.is_finite()));
        }
    }
}
