//! LSTM (and plain tanh RNN) stack with a softmax read-out and truncation-free
//! backpropagation through time.
//!
//! Batched tensors are time-major: row `t * batch + b` holds sample `b` at
//! step `t`. A layer's weight matrix is `gates*H x (I+H)` acting on
//! `[D(x_t), h_{t-1}]`, gate rows ordered input, forget, output, candidate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rmsprop::{RmsProp, RmsPropConfig};
use super::{add_bias_rows, argmax, column_sums_into, join, softmax, softmax_xent_grad, Parameters};
use crate::math::{self, gemm, MatRef};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    /// `h_t = tanh(W [x_t, h_{t-1}] + b)`; no gates, no memory cell.
    Plain,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Plain => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Dropout rate on the inputs of every layer but the first.
    pub dropout: f64,
    pub cell: CellKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            dropout: 0.5,
            cell: CellKind::Lstm,
            epochs: 4,
            batch_size: 32,
            optimizer: RmsPropConfig::default(),
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::invalid("layers, hidden size and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub cell: CellKind,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub dropout_rate: f64,
}

impl LstmLayer {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases except a
    /// forget-gate bias of one.
    pub fn new<R: Rng>(input_dim: usize, hidden_dim: usize, cell: CellKind, dropout_rate: f64, rng: &mut R) -> Self {
        let fan_in = input_dim + hidden_dim;
        let bound = 1.0 / math::sqrt(fan_in as f64);
        let rows = cell.gates() * hidden_dim;
        let w = (0..rows * fan_in).map(|_| rng.random_range(-bound..=bound)).collect();
        let mut b = vec![0.0; rows];
        if cell == CellKind::Lstm {
            b[hidden_dim..2 * hidden_dim].fill(1.0);
        }
        Self { input_dim, hidden_dim, cell, w, b, dropout_rate }
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        cell: CellKind,
        w: Vec<f64>,
        b: Vec<f64>,
        dropout_rate: f64,
    ) -> Result<Self> {
        let rows = cell.gates() * hidden_dim;
        if w.len() != rows * (input_dim + hidden_dim) || b.len() != rows {
            return Err(Error::invalid("LSTM weight shapes do not match the layer dimensions"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::invalid("LSTM weights must be finite"));
        }
        Ok(Self { input_dim, hidden_dim, cell, w, b, dropout_rate })
    }

    fn stride(&self) -> usize {
        self.input_dim + self.hidden_dim
    }

    fn gate_rows(&self) -> usize {
        self.cell.gates() * self.hidden_dim
    }
}

impl Parameters for LstmLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), &[self.gate_rows(), self.stride()], &self.w);
        f(&join(prefix, "b"), &[self.gate_rows()], &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.gate_rows(), self.stride()];
        let rows = self.gate_rows();
        f(&join(prefix, "w"), &shape, &mut self.w);
        f(&join(prefix, "b"), &[rows], &mut self.b);
    }
}

/// Inverted dropout: `x * mask / (1 - rate)`.
pub fn dropout(x: &[f64], mask: &[f64], rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    x.iter().zip(mask).map(|(v, m)| v * m * keep).collect()
}

fn check_step(layer: &LstmLayer, x: &[f64], h_prev: &[f64], c_prev: &[f64], mask: Option<&[f64]>) -> Result<()> {
    if x.len() != layer.input_dim
        || h_prev.len() != layer.hidden_dim
        || c_prev.len() != layer.hidden_dim
        || mask.is_some_and(|m| m.len() != layer.input_dim)
    {
        return Err(Error::invalid("LSTM step dimensions do not match the layer"));
    }
    Ok(())
}

struct StepState {
    z: Vec<f64>,
    acts: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

fn step_forward(layer: &LstmLayer, x: &[f64], h_prev: &[f64], c_prev: &[f64], mask: Option<&[f64]>) -> StepState {
    let hd = layer.hidden_dim;
    let mut z = match mask {
        Some(m) => dropout(x, m, layer.dropout_rate),
        None => x.to_vec(),
    };
    z.extend_from_slice(h_prev);
    let stride = layer.stride();
    let mut acts: Vec<f64> =
        (0..layer.gate_rows()).map(|r| math::dot(&layer.w[r * stride..(r + 1) * stride], &z) + layer.b[r]).collect();
    let mut c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    match layer.cell {
        CellKind::Lstm => {
            for a in &mut acts[..3 * hd] {
                *a = math::sigmoid(*a);
            }
            for a in &mut acts[3 * hd..] {
                *a = math::tanh(*a);
            }
            for k in 0..hd {
                c[k] = acts[hd + k] * c_prev[k] + acts[k] * acts[3 * hd + k];
                h[k] = acts[2 * hd + k] * math::tanh(c[k]);
            }
        }
        CellKind::Plain => {
            for (a, hk) in acts.iter_mut().zip(h.iter_mut()) {
                *a = math::tanh(*a);
                *hk = *a;
            }
        }
    }
    StepState { z, acts, c, h }
}

/// One recurrence step. `dropout_mask` (entries 0 or 1) switches on training
/// mode; `None` is inference and leaves `x` untouched. The plain cell returns
/// a zero memory cell.
pub fn lstm_step(
    layer: &LstmLayer,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    dropout_mask: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_step(layer, x, h_prev, c_prev, dropout_mask)?;
    let s = step_forward(layer, x, h_prev, c_prev, dropout_mask);
    Ok((s.h, s.c))
}

/// Gradients of one step given upstream `dh`, `dc`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
}

pub fn lstm_step_backward(
    layer: &LstmLayer,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    dropout_mask: Option<&[f64]>,
    dh: &[f64],
    dc: &[f64],
) -> Result<StepGrad> {
    check_step(layer, x, h_prev, c_prev, dropout_mask)?;
    let hd = layer.hidden_dim;
    if dh.len() != hd || dc.len() != hd {
        return Err(Error::invalid("upstream gradient dimensions do not match the layer"));
    }
    let s = step_forward(layer, x, h_prev, c_prev, dropout_mask);
    let a = &s.acts;
    let mut dpre = vec![0.0; layer.gate_rows()];
    let mut dc_prev = vec![0.0; hd];
    match layer.cell {
        CellKind::Lstm => {
            for k in 0..hd {
                let tc = math::tanh(s.c[k]);
                let (ig, fg, og, gg) = (a[k], a[hd + k], a[2 * hd + k], a[3 * hd + k]);
                let dck = dc[k] + dh[k] * og * (1.0 - tc * tc);
                dpre[k] = dck * gg * ig * (1.0 - ig);
                dpre[hd + k] = dck * c_prev[k] * fg * (1.0 - fg);
                dpre[2 * hd + k] = dh[k] * tc * og * (1.0 - og);
                dpre[3 * hd + k] = dck * ig * (1.0 - gg * gg);
                dc_prev[k] = dck * fg;
            }
        }
        CellKind::Plain => {
            for k in 0..hd {
                dpre[k] = dh[k] * (1.0 - a[k] * a[k]);
            }
        }
    }
    let stride = layer.stride();
    let mut dw = vec![0.0; layer.w.len()];
    let mut dz = vec![0.0; stride];
    for (r, &g) in dpre.iter().enumerate() {
        let row = &layer.w[r * stride..(r + 1) * stride];
        for c in 0..stride {
            dw[r * stride + c] = g * s.z[c];
            dz[c] += g * row[c];
        }
    }
    let mut dx = dz[..layer.input_dim].to_vec();
    if let Some(m) = dropout_mask {
        dx = dropout(&dx, m, layer.dropout_rate);
    }
    Ok(StepGrad { w: dw, b: dpre, x: dx, h_prev: dz[layer.input_dim..].to_vec(), c_prev: dc_prev })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
    /// `classes x H` read-out of the top layer.
    pub w_hy: Vec<f64>,
    pub output_dim: usize,
}

impl Parameters for LstmStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{k}")), f);
        }
        f(&join(prefix, "w_hy"), &[self.output_dim, self.hidden_dim()], &self.w_hy);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.output_dim, self.hidden_dim()];
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{k}")), f);
        }
        f(&join(prefix, "w_hy"), &shape, &mut self.w_hy);
    }
}

struct LayerTrace {
    /// Layer input after dropout, `TB x I`.
    x: Vec<f64>,
    /// Activated gates, `TB x gates*H`.
    acts: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

fn layer_forward(layer: &LstmLayer, x: Vec<f64>, steps: usize, batch: usize) -> LayerTrace {
    let (id, hd) = (layer.input_dim, layer.hidden_dim);
    let gh = layer.gate_rows();
    let stride = layer.stride();
    let tb = steps * batch;
    let mut acts = vec![0.0; tb * gh];
    gemm(1.0, MatRef::new(&x, tb, id), MatRef::strided(&layer.w, gh, id, stride).t(), 0.0, &mut acts, gh);
    add_bias_rows(&mut acts, &layer.b);
    let mut c = vec![0.0; tb * hd];
    let mut h = vec![0.0; tb * hd];
    let w_h = MatRef::strided(&layer.w[id..], gh, hd, stride).t();
    for t in 0..steps {
        if t > 0 {
            let prev = MatRef::new(&h[(t - 1) * batch * hd..t * batch * hd], batch, hd);
            gemm(1.0, prev, w_h, 1.0, &mut acts[t * batch * gh..(t + 1) * batch * gh], gh);
        }
        for r in 0..batch {
            let row = t * batch + r;
            let a = &mut acts[row * gh..(row + 1) * gh];
            match layer.cell {
                CellKind::Lstm => {
                    for v in &mut a[..3 * hd] {
                        *v = math::sigmoid(*v);
                    }
                    for v in &mut a[3 * hd..] {
                        *v = math::tanh(*v);
                    }
                    for k in 0..hd {
                        let cp = if t > 0 { c[(row - batch) * hd + k] } else { 0.0 };
                        let cv = a[hd + k] * cp + a[k] * a[3 * hd + k];
                        c[row * hd + k] = cv;
                        h[row * hd + k] = a[2 * hd + k] * math::tanh(cv);
                    }
                }
                CellKind::Plain => {
                    for k in 0..hd {
                        a[k] = math::tanh(a[k]);
                        h[row * hd + k] = a[k];
                    }
                }
            }
        }
    }
    LayerTrace { x, acts, c, h }
}

/// Accumulates parameter gradients into `grad` and returns the gradient with
/// respect to the (post-dropout) layer input.
fn layer_backward(
    layer: &LstmLayer,
    tr: &LayerTrace,
    dh_in: &[f64],
    grad: &mut LstmLayer,
    steps: usize,
    batch: usize,
) -> Vec<f64> {
    let (id, hd) = (layer.input_dim, layer.hidden_dim);
    let gh = layer.gate_rows();
    let stride = layer.stride();
    let tb = steps * batch;
    let mut dpre = vec![0.0; tb * gh];
    let mut dh_rec = vec![0.0; batch * hd];
    let mut dc_next = vec![0.0; batch * hd];
    let w_h = MatRef::strided(&layer.w[id..], gh, hd, stride);
    for t in (0..steps).rev() {
        for r in 0..batch {
            let row = t * batch + r;
            let a = &tr.acts[row * gh..(row + 1) * gh];
            let d = &mut dpre[row * gh..(row + 1) * gh];
            for k in 0..hd {
                let dh = dh_in[row * hd + k] + dh_rec[r * hd + k];
                match layer.cell {
                    CellKind::Lstm => {
                        let tc = math::tanh(tr.c[row * hd + k]);
                        let (ig, fg, og, gg) = (a[k], a[hd + k], a[2 * hd + k], a[3 * hd + k]);
                        let cp = if t > 0 { tr.c[(row - batch) * hd + k] } else { 0.0 };
                        let dc = dc_next[r * hd + k] + dh * og * (1.0 - tc * tc);
                        d[k] = dc * gg * ig * (1.0 - ig);
                        d[hd + k] = dc * cp * fg * (1.0 - fg);
                        d[2 * hd + k] = dh * tc * og * (1.0 - og);
                        d[3 * hd + k] = dc * ig * (1.0 - gg * gg);
                        dc_next[r * hd + k] = dc * fg;
                    }
                    CellKind::Plain => {
                        d[k] = dh * (1.0 - a[k] * a[k]);
                    }
                }
            }
        }
        if t > 0 {
            let d = MatRef::new(&dpre[t * batch * gh..(t + 1) * batch * gh], batch, gh);
            gemm(1.0, d, w_h, 0.0, &mut dh_rec, hd);
        }
    }
    gemm(1.0, MatRef::new(&dpre, tb, gh).t(), MatRef::new(&tr.x, tb, id), 1.0, &mut grad.w, stride);
    if steps > 1 {
        let rows = (steps - 1) * batch;
        gemm(
            1.0,
            MatRef::new(&dpre[batch * gh..], rows, gh).t(),
            MatRef::new(&tr.h[..rows * hd], rows, hd),
            1.0,
            &mut grad.w[id..],
            stride,
        );
    }
    column_sums_into(&dpre, gh, &mut grad.b);
    let mut dx = vec![0.0; tb * id];
    gemm(1.0, MatRef::new(&dpre, tb, gh), MatRef::strided(&layer.w, gh, id, stride), 0.0, &mut dx, id);
    dx
}

/// Dropout masks for one batch: `None` for layers without dropout.
pub type DropoutMasks = Vec<Option<Vec<f64>>>;

impl LstmStack {
    pub fn new(input_dim: usize, config: &LstmConfig, output_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || output_dim < 2 {
            return Err(Error::invalid("input dimension must be positive and at least two classes are needed"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let (inp, rate) = if k == 0 { (input_dim, 0.0) } else { (config.hidden, config.dropout) };
            layers.push(LstmLayer::new(inp, config.hidden, config.cell, rate, &mut rng));
        }
        let bound = 1.0 / math::sqrt(config.hidden as f64);
        let w_hy = (0..output_dim * config.hidden).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self { layers, w_hy, output_dim })
    }

    pub fn from_parts(layers: Vec<LstmLayer>, w_hy: Vec<f64>, output_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an LSTM stack needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim != pair[0].hidden_dim {
                return Err(Error::invalid("adjacent LSTM layer dimensions are incompatible"));
            }
        }
        let hd = layers.last().expect("non-empty").hidden_dim;
        if w_hy.len() != output_dim * hd {
            return Err(Error::invalid("output projection shape does not match"));
        }
        Ok(Self { layers, w_hy, output_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_dim)
    }

    pub fn sample_masks<R: Rng>(&self, steps: usize, batch: usize, rng: &mut R) -> DropoutMasks {
        self.layers
            .iter()
            .map(|l| {
                (l.dropout_rate > 0.0).then(|| {
                    (0..steps * batch * l.input_dim)
                        .map(|_| if rng.random::<f64>() < l.dropout_rate { 0.0 } else { 1.0 })
                        .collect()
                })
            })
            .collect()
    }

    fn check_batch(&self, x: &[f64], steps: usize, batch: usize) -> Result<()> {
        if steps == 0 || batch == 0 {
            return Err(Error::invalid("empty sequence batch"));
        }
        if x.len() != steps * batch * self.input_dim() {
            return Err(Error::invalid("sequence batch does not match the LSTM input dimension"));
        }
        Ok(())
    }

    fn run(&self, x: &[f64], steps: usize, batch: usize, masks: Option<&DropoutMasks>) -> Vec<LayerTrace> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = match traces.last() {
                Some(tr) => tr.h.clone(),
                None => x.to_vec(),
            };
            let input = match masks.and_then(|m| m[k].as_ref()) {
                Some(mask) => dropout(&input, mask, layer.dropout_rate),
                None => input,
            };
            traces.push(layer_forward(layer, input, steps, batch));
        }
        traces
    }

    /// Top-layer hidden state after the last step for each sequence of a
    /// time-major batch (inference mode), `batch x H`.
    pub fn final_hidden(&self, x: &[f64], steps: usize, batch: usize) -> Result<Vec<f64>> {
        self.check_batch(x, steps, batch)?;
        let hd = self.hidden_dim();
        let traces = self.run(x, steps, batch, None);
        let top = &traces.last().expect("non-empty").h;
        Ok(top[(steps - 1) * batch * hd..].to_vec())
    }

    /// Mean cross-entropy of the final-step prediction and its gradient.
    pub fn loss_and_grad(
        &self,
        x: &[f64],
        steps: usize,
        labels: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> Result<(f64, LstmStack)> {
        let batch = labels.len();
        self.check_batch(x, steps, batch)?;
        if labels.iter().any(|&y| y >= self.output_dim) {
            return Err(Error::invalid("label outside the class range"));
        }
        if masks.is_some_and(|m| m.len() != self.layers.len()) {
            return Err(Error::invalid("one dropout mask slot per layer is required"));
        }
        let hd = self.hidden_dim();
        let classes = self.output_dim;
        let traces = self.run(x, steps, batch, masks);
        let top = &traces.last().expect("non-empty").h;
        let h_last = &top[(steps - 1) * batch * hd..];
        let mut logits = vec![0.0; batch * classes];
        gemm(1.0, MatRef::new(h_last, batch, hd), MatRef::new(&self.w_hy, classes, hd).t(), 0.0, &mut logits, classes);
        let loss = softmax_xent_grad(&mut logits, classes, labels);

        let mut grad = self.zeroed();
        gemm(1.0, MatRef::new(&logits, batch, classes).t(), MatRef::new(h_last, batch, hd), 0.0, &mut grad.w_hy, hd);
        let mut dh = vec![0.0; steps * batch * hd];
        gemm(
            1.0,
            MatRef::new(&logits, batch, classes),
            MatRef::new(&self.w_hy, classes, hd),
            0.0,
            &mut dh[(steps - 1) * batch * hd..],
            hd,
        );
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let dx = layer_backward(layer, &traces[k], &dh, &mut grad.layers[k], steps, batch);
            if k > 0 {
                dh = match masks.and_then(|m| m[k].as_ref()) {
                    Some(mask) => dropout(&dx, mask, layer.dropout_rate),
                    None => dx,
                };
            }
        }
        Ok((loss, grad))
    }
}

/// Fixed-length labelled sequences stored sample-major (`T x I` per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    pub steps: usize,
    pub dim: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
}

impl SequenceSet {
    pub fn new(steps: usize, dim: usize) -> Self {
        Self { steps, dim, values: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, sequence: &[f64], label: usize) -> Result<()> {
        if sequence.len() != self.steps * self.dim {
            return Err(Error::invalid("sequence length does not match steps x dim"));
        }
        self.values.extend_from_slice(sequence);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sequence(&self, i: usize) -> &[f64] {
        let n = self.steps * self.dim;
        &self.values[i * n..(i + 1) * n]
    }

    /// Time-major batch of the selected samples.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let (t, d, b) = (self.steps, self.dim, idx.len());
        let mut out = vec![0.0; t * b * d];
        for (r, &i) in idx.iter().enumerate() {
            let seq = self.sequence(i);
            for s in 0..t {
                out[(s * b + r) * d..(s * b + r + 1) * d].copy_from_slice(&seq[s * d..(s + 1) * d]);
            }
        }
        out
    }
}

/// Softmax outputs for every step, their argmax labels and the final
/// top-layer hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmOutput {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub h_last: Vec<f64>,
}

/// Inference-mode pass over one sequence.
pub fn lstm_forward(stack: &LstmStack, x_seq: &[Vec<f64>]) -> Result<LstmOutput> {
    if x_seq.is_empty() {
        return Err(Error::invalid("empty input sequence"));
    }
    if x_seq.iter().any(|x| x.len() != stack.input_dim()) {
        return Err(Error::invalid("input vector does not match the LSTM input dimension"));
    }
    let steps = x_seq.len();
    let flat: Vec<f64> = x_seq.concat();
    let traces = stack.run(&flat, steps, 1, None);
    let top = &traces.last().expect("non-empty").h;
    let hd = stack.hidden_dim();
    let mut probs = Vec::with_capacity(steps);
    for t in 0..steps {
        let h = &top[t * hd..(t + 1) * hd];
        let logits: Vec<f64> =
            (0..stack.output_dim).map(|c| math::dot(&stack.w_hy[c * hd..(c + 1) * hd], h)).collect();
        probs.push(softmax(&logits));
    }
    let labels = probs.iter().map(|p| argmax(p)).collect();
    Ok(LstmOutput { probs, labels, h_last: top[(steps - 1) * hd..].to_vec() })
}

/// Minibatch RMSProp training on final-step cross-entropy. Returns the mean
/// loss of every epoch.
pub fn lstm_train(
    stack: &mut LstmStack,
    data: &SequenceSet,
    opt: &mut RmsProp,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if data.dim != stack.input_dim() || batch_size == 0 {
        return Err(Error::invalid("training data does not match the LSTM input dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let x = data.gather(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let masks = stack.sample_masks(data.steps, chunk.len(), &mut rng);
            let (loss, grad) = stack.loss_and_grad(&x, data.steps, &labels, Some(&masks))?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::diverged(format!("LSTM loss is not finite at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            opt.step(stack, &grad)?;
        }
        trace.push(total / data.len() as f64);
    }
    Ok(trace)
}
