//! Stacked auto-encoder (sigmoid encoders, linear untied decoders) with a
//! softmax head, greedy layer-wise pretraining and supervised fine-tuning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rmsprop::{RmsProp, RmsPropConfig};
use super::{add_bias_rows, argmax, column_sums_into, join, softmax_in_place, softmax_xent_grad, Parameters};
use crate::math::{self, gemm, MatRef};
use crate::{Error, Result};

/// Fully connected layer, `y = W x + b` with `W` stored `output x input`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input_dim: usize,
    pub output_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / math::sqrt(input_dim as f64);
        let w = (0..input_dim * output_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { input_dim, output_dim, w, b: vec![0.0; output_dim] }
    }

    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, output_dim, w: vec![0.0; input_dim * output_dim], b: vec![0.0; output_dim] }
    }

    pub fn from_parts(input_dim: usize, output_dim: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if w.len() != input_dim * output_dim || b.len() != output_dim {
            return Err(Error::invalid("dense layer shapes do not match its dimensions"));
        }
        Ok(Self { input_dim, output_dim, w, b })
    }

    /// `rows x output` for a row-major `rows x input` batch.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.output_dim];
        gemm(
            1.0,
            MatRef::new(x, rows, self.input_dim),
            MatRef::new(&self.w, self.output_dim, self.input_dim).t(),
            0.0,
            &mut y,
            self.output_dim,
        );
        add_bias_rows(&mut y, &self.b);
        y
    }

    /// Accumulates into `grad` and returns the input gradient.
    fn backward(&self, x: &[f64], rows: usize, dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let (i, o) = (self.input_dim, self.output_dim);
        gemm(1.0, MatRef::new(dy, rows, o).t(), MatRef::new(x, rows, i), 1.0, &mut grad.w, i);
        column_sums_into(dy, o, &mut grad.b);
        let mut dx = vec![0.0; rows * i];
        gemm(1.0, MatRef::new(dy, rows, o), MatRef::new(&self.w, o, i), 0.0, &mut dx, i);
        dx
    }
}

impl Parameters for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), &[self.output_dim, self.input_dim], &self.w);
        f(&join(prefix, "b"), &[self.output_dim], &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let (o, i) = (self.output_dim, self.input_dim);
        f(&join(prefix, "w"), &[o, i], &mut self.w);
        f(&join(prefix, "b"), &[o], &mut self.b);
    }
}

fn sigmoid_rows(v: &mut [f64]) {
    for x in v {
        *x = math::sigmoid(*x);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    /// Encoder widths after the input layer.
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 256, 64],
            pretrain_epochs: 5,
            finetune_epochs: 30,
            batch_size: 64,
            optimizer: RmsPropConfig::default(),
        }
    }
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.batch_size == 0 {
            return Err(Error::invalid("auto-encoder widths and batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

/// One encoder/decoder pair: the unit trained in a pretraining stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AeStage {
    pub encoder: Dense,
    pub decoder: Dense,
}

impl Parameters for AeStage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl AeStage {
    /// Mean squared reconstruction error over all entries and its gradient.
    pub fn loss_and_grad(&self, x: &[f64], rows: usize) -> Result<(f64, AeStage)> {
        let d = self.encoder.input_dim;
        if rows == 0 || x.len() != rows * d {
            return Err(Error::invalid("batch does not match the auto-encoder input dimension"));
        }
        let mut code = self.encoder.forward(x, rows);
        sigmoid_rows(&mut code);
        let mut diff = self.decoder.forward(&code, rows);
        let n = (rows * d) as f64;
        let mut loss = 0.0;
        for (r, &t) in diff.iter_mut().zip(x) {
            *r -= t;
            loss += *r * *r;
            *r *= 2.0 / n;
        }
        let mut grad = self.zeroed();
        let mut dcode = self.decoder.backward(&code, rows, &diff, &mut grad.decoder);
        for (g, &s) in dcode.iter_mut().zip(&code) {
            *g *= s * (1.0 - s);
        }
        self.encoder.backward(x, rows, &dcode, &mut grad.encoder);
        Ok((loss / n, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoders: Vec<Dense>,
    pub decoders: Vec<Dense>,
}

impl Autoencoder {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("auto-encoder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            encoders.push(Dense::new(prev, h, &mut rng));
            decoders.push(Dense::new(h, prev, &mut rng));
            prev = h;
        }
        Ok(Self { encoders, decoders })
    }

    pub fn from_parts(encoders: Vec<Dense>, decoders: Vec<Dense>) -> Result<Self> {
        if encoders.is_empty() || encoders.len() != decoders.len() {
            return Err(Error::invalid("auto-encoder needs matching encoder and decoder lists"));
        }
        for (k, (e, d)) in encoders.iter().zip(&decoders).enumerate() {
            if d.input_dim != e.output_dim || d.output_dim != e.input_dim {
                return Err(Error::invalid("decoder does not mirror its encoder"));
            }
            if k > 0 && e.input_dim != encoders[k - 1].output_dim {
                return Err(Error::invalid("adjacent encoder dimensions are incompatible"));
            }
        }
        Ok(Self { encoders, decoders })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.encoders.iter().map(|e| e.output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.encoders[0].input_dim
    }

    pub fn code_dim(&self) -> usize {
        self.encoders.last().map_or(0, |e| e.output_dim)
    }

    /// Codes after the first `depth` encoders.
    pub fn encode_to(&self, x: &[f64], rows: usize, depth: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for e in &self.encoders[..depth] {
            h = e.forward(&h, rows);
            sigmoid_rows(&mut h);
        }
        h
    }

    pub fn encode(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.encode_to(x, rows, self.encoders.len())
    }

    pub fn stage(&self, k: usize) -> AeStage {
        AeStage { encoder: self.encoders[k].clone(), decoder: self.decoders[k].clone() }
    }
}

impl Parameters for Autoencoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, e) in self.encoders.iter().enumerate() {
            e.visit(&join(prefix, &format!("encoders.{k}")), f);
        }
        for (k, d) in self.decoders.iter().enumerate() {
            d.visit(&join(prefix, &format!("decoders.{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (k, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("encoders.{k}")), f);
        }
        for (k, d) in self.decoders.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("decoders.{k}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    pub layer: Dense,
}

impl SoftmaxHead {
    pub fn new(feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { layer: Dense::new(feature_dim, classes, &mut rng) }
    }

    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self { layer: Dense::zeros(feature_dim, classes) }
    }

    pub fn classes(&self) -> usize {
        self.layer.output_dim
    }

    pub fn probabilities(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut p = self.layer.forward(x, rows);
        for row in p.chunks_exact_mut(self.classes()) {
            softmax_in_place(row);
        }
        p
    }

    /// Mean cross-entropy, the gradient and the input gradient.
    pub fn loss_and_grad(&self, x: &[f64], labels: &[usize]) -> Result<(f64, SoftmaxHead, Vec<f64>)> {
        let rows = labels.len();
        if rows == 0 || x.len() != rows * self.layer.input_dim {
            return Err(Error::invalid("batch does not match the softmax head input dimension"));
        }
        if labels.iter().any(|&y| y >= self.classes()) {
            return Err(Error::invalid("label outside the class range"));
        }
        let mut logits = self.layer.forward(x, rows);
        let loss = softmax_xent_grad(&mut logits, self.classes(), labels);
        let mut grad = self.zeroed();
        let dx = self.layer.backward(x, rows, &logits, &mut grad.layer);
        Ok((loss, grad, dx))
    }
}

impl Parameters for SoftmaxHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.layer.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.layer.visit_mut(prefix, f);
    }
}

/// Encoders plus softmax head; decoders ride along untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeClassifier {
    pub ae: Autoencoder,
    pub head: SoftmaxHead,
}

impl Parameters for SaeClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, e) in self.ae.encoders.iter().enumerate() {
            e.visit(&join(prefix, &format!("encoders.{k}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (k, e) in self.ae.encoders.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("encoders.{k}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl SaeClassifier {
    pub fn new(ae: Autoencoder, head: SoftmaxHead) -> Result<Self> {
        if head.layer.input_dim != ae.code_dim() {
            return Err(Error::invalid("softmax head does not match the auto-encoder code size"));
        }
        Ok(Self { ae, head })
    }

    pub fn input_dim(&self) -> usize {
        self.ae.input_dim()
    }

    /// Row-major `rows x classes` class distributions.
    pub fn predict(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        if x.len() != rows * self.input_dim() {
            return Err(Error::invalid("features do not match the classifier input dimension"));
        }
        Ok(self.head.probabilities(&self.ae.encode(x, rows), rows))
    }

    pub fn loss_and_grad(&self, x: &[f64], labels: &[usize]) -> Result<(f64, SaeClassifier)> {
        let rows = labels.len();
        if rows == 0 || x.len() != rows * self.input_dim() {
            return Err(Error::invalid("batch does not match the classifier input dimension"));
        }
        let mut acts = vec![x.to_vec()];
        for e in &self.ae.encoders {
            let mut h = e.forward(acts.last().expect("non-empty"), rows);
            sigmoid_rows(&mut h);
            acts.push(h);
        }
        let (loss, head_grad, mut dh) = self.head.loss_and_grad(acts.last().expect("non-empty"), labels)?;
        let mut grad = self.zeroed();
        grad.head = head_grad;
        for k in (0..self.ae.encoders.len()).rev() {
            for (g, &s) in dh.iter_mut().zip(&acts[k + 1]) {
                *g *= s * (1.0 - s);
            }
            dh = self.ae.encoders[k].backward(&acts[k], rows, &dh, &mut grad.ae.encoders[k]);
        }
        Ok((loss, grad))
    }
}

fn gather_rows(data: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }
    out
}

fn check_rows(data: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(Error::invalid("feature matrix does not match the input dimension"));
    }
    Ok(data.len() / dim)
}

/// Greedy layer-wise pretraining on a row-major feature matrix. Returns the
/// per-epoch mean reconstruction loss of every stage.
pub fn sae_pretrain(
    ae: &mut Autoencoder,
    data: &[f64],
    epochs: usize,
    batch_size: usize,
    optimizer: RmsPropConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let rows = check_rows(data, ae.input_dim())?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(ae.encoders.len());
    let mut input = data.to_vec();
    for k in 0..ae.encoders.len() {
        let dim = ae.encoders[k].input_dim;
        let mut stage = ae.stage(k);
        let mut opt = RmsProp::new(optimizer)?;
        let mut order: Vec<usize> = (0..rows).collect();
        let mut trace = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size) {
                let x = gather_rows(&input, dim, chunk);
                let (loss, grad) = stage.loss_and_grad(&x, chunk.len())?;
                if !loss.is_finite() || !grad.all_finite() {
                    return Err(Error::diverged(format!(
                        "auto-encoder stage {k} loss is not finite at epoch {epoch}"
                    )));
                }
                total += loss * chunk.len() as f64;
                opt.step(&mut stage, &grad)?;
            }
            trace.push(total / rows as f64);
        }
        ae.encoders[k] = stage.encoder;
        ae.decoders[k] = stage.decoder;
        if k + 1 < ae.encoders.len() {
            input = ae.encoders[k].forward(&input, rows);
            sigmoid_rows(&mut input);
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// End-to-end cross-entropy training of encoders and head. Returns the
/// per-epoch mean loss.
pub fn fine_tune(
    clf: &mut SaeClassifier,
    data: &[f64],
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    optimizer: RmsPropConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let rows = check_rows(data, clf.input_dim())?;
    if labels.len() != rows || batch_size == 0 {
        return Err(Error::invalid("one label per feature row and a positive batch size are required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = RmsProp::new(optimizer)?;
    let mut order: Vec<usize> = (0..rows).collect();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let x = gather_rows(data, clf.input_dim(), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = clf.loss_and_grad(&x, &y)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::diverged(format!("fine-tuning loss is not finite at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            opt.step(clf, &grad)?;
        }
        trace.push(total / rows as f64);
    }
    Ok(trace)
}

/// Class distribution and label for one feature vector.
pub fn classify(clf: &SaeClassifier, feature: &[f64]) -> Result<(Vec<f64>, usize)> {
    if feature.len() != clf.input_dim() {
        return Err(Error::invalid("feature does not match the classifier input dimension"));
    }
    let p = clf.predict(feature, 1)?;
    let label = argmax(&p);
    Ok((p, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn check<P: Parameters>(params: &P, grad: &P, loss: impl Fn(&P) -> f64) {
        let g = grad.flatten();
        let n = params.parameter_count();
        let eps = 1e-5;
        for k in 0..n {
            let bump = |d: f64| {
                let mut p = params.clone();
                let mut off = 0;
                p.visit_mut("", &mut |_, _, data| {
                    if k >= off && k < off + data.len() {
                        data[k - off] += d;
                    }
                    off += data.len();
                });
                loss(&p)
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!(rel(fd, g[k]) < 1e-5, "param {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn stage_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ae = Autoencoder::new(6, &[4], 2).unwrap();
        let mut stage = ae.stage(0);
        for b in stage.encoder.b.iter_mut().chain(stage.decoder.b.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = stage.loss_and_grad(&x, 3).unwrap();
        check(&stage, &grad, |s| s.loss_and_grad(&x, 3).unwrap().0);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ae = Autoencoder::new(5, &[6, 3], 1).unwrap();
        let clf = SaeClassifier::new(ae, SoftmaxHead::new(3, 2, 4)).unwrap();
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = [0, 1, 1, 0];
        let (_, grad) = clf.loss_and_grad(&x, &y).unwrap();
        check(&clf, &grad, |c| c.loss_and_grad(&x, &y).unwrap().0);
    }

    #[test]
    fn zero_head_is_uniform() {
        let ae = Autoencoder::new(4, &[3], 0).unwrap();
        let clf = SaeClassifier::new(ae, SoftmaxHead::zeros(3, 2)).unwrap();
        let (p, _) = classify(&clf, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(classify(&clf, &[0.1]).is_err());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let ae = Autoencoder::new(3, &[2], 0).unwrap();
        let mut clf = SaeClassifier::new(ae, SoftmaxHead::new(2, 2, 1)).unwrap();
        let before = clf.clone();
        let trace = fine_tune(&mut clf, &[0.0; 6], &[0, 1], 0, 4, RmsPropConfig::default(), 1).unwrap();
        assert!(trace.is_empty());
        assert_eq!(clf, before);
    }
}
