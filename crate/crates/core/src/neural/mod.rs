//! Learnable components: LSTM stack, stacked auto-encoder, softmax head and
//! the RMSProp optimizer. Gradients are analytic; every model doubles as its
//! own gradient container.

use alloc::string::String;
use alloc::vec::Vec;

use crate::math;

pub mod lstm;
pub mod rmsprop;
pub mod sae;

pub use lstm::{lstm_forward, lstm_step, lstm_train, CellKind, LstmConfig, LstmLayer, LstmOutput, LstmStack, SequenceSet};
pub use rmsprop::{RmsProp, RmsPropConfig};
pub use sae::{
    classify, fine_tune, sae_pretrain, Autoencoder, Dense, SaeClassifier, SaeConfig, SoftmaxHead,
};

/// A set of named, shaped parameter tensors.
pub trait Parameters: Clone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    /// Same shapes, all zeros.
    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, _, d| d.fill(0.0));
        z
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    /// All parameters concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        let mut s = String::from(prefix);
        s.push('.');
        s.push_str(name);
        s
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax over a `rows x classes` logit matrix, returning the mean
/// cross-entropy and overwriting `logits` with `(p - onehot) / rows`.
pub(crate) fn softmax_xent_grad(logits: &mut [f64], classes: usize, labels: &[usize]) -> f64 {
    let rows = labels.len();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &mut logits[r * classes..(r + 1) * classes];
        softmax_in_place(row);
        loss -= math::ln(row[y].max(f64::MIN_POSITIVE));
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= rows as f64;
        }
    }
    loss / rows as f64
}

pub(crate) fn add_bias_rows(m: &mut [f64], bias: &[f64]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn column_sums_into(m: &[f64], cols: usize, out: &mut [f64]) {
    for row in m.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}
