use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{assemble_batch, local_feature, NormStats};
use crate::imaging::{ImageSequence, PixelMask};
use crate::localization::ROI_SIZE;
use crate::neural::{
    fine_tune, join, lstm_train, sae_pretrain, Autoencoder, LstmStack, Parameters, RmsProp, SaeClassifier,
    SequenceSet, SoftmaxHead,
};
use crate::varflow::{flow_sequence, FlowSequence};
use crate::{Error, Result};

use super::aha::{aha_segments, segment_agreement, SegmentScores};
use super::config::PipelineConfig;
use super::data::{Dataset, Subject};
use super::metrics::{evaluate, MetricsReport};

pub const CLASSES: usize = 2;

/// Rows per classifier batch at inference.
const PREDICT_BATCH: usize = 1024;

/// All trained parameters plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: PipelineConfig,
    /// Frames per input sequence.
    pub frames: usize,
    pub lstm: LstmStack,
    pub classifier: SaeClassifier,
    pub norm_stats: NormStats,
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.lstm.visit(&join(prefix, "lstm"), f);
        self.classifier.ae.visit(&join(prefix, "ae"), f);
        self.classifier.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.lstm.visit_mut(&join(prefix, "lstm"), f);
        self.classifier.ae.visit_mut(&join(prefix, "ae"), f);
        self.classifier.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl Model {
    /// A model with the shapes implied by `config` and `frames`; weights are
    /// freshly initialized and statistics are the identity.
    pub fn skeleton(config: &PipelineConfig, frames: usize) -> Result<Self> {
        config.validate()?;
        if frames < 2 {
            return Err(Error::invalid("a model needs at least two frames per sequence"));
        }
        let lstm = LstmStack::new(config.window * config.window, &config.lstm, CLASSES, 0)?;
        let dim = config.mode.feature_dim(config.lstm.hidden, frames);
        let ae = Autoencoder::new(dim, &config.sae.hidden, 0)?;
        let head = SoftmaxHead::zeros(ae.code_dim(), CLASSES);
        let classifier = SaeClassifier::new(ae, head)?;
        Ok(Self { config: config.clone(), frames, lstm, classifier, norm_stats: NormStats::identity(dim) })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.mode.feature_dim(self.lstm.hidden_dim(), self.frames)
    }

    /// Checks that the parts fit together.
    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim();
        if self.lstm.input_dim() != self.config.window * self.config.window
            || self.lstm.output_dim != CLASSES
            || self.classifier.input_dim() != dim
            || self.classifier.head.classes() != CLASSES
            || self.norm_stats.dim() != dim
            || self.norm_stats.std.len() != dim
        {
            return Err(Error::invalid("model components have inconsistent dimensions"));
        }
        if !self.all_finite() || self.norm_stats.mean.iter().chain(&self.norm_stats.std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model contains non-finite values"));
        }
        Ok(())
    }
}

struct Seeds {
    lstm_sample: u64,
    lstm_init: u64,
    lstm_train: u64,
    sample: u64,
    ae_init: u64,
    pretrain: u64,
    head_init: u64,
    finetune: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Self {
            lstm_sample: r.random(),
            lstm_init: r.random(),
            lstm_train: r.random(),
            sample: r.random(),
            ae_init: r.random(),
            pretrain: r.random(),
            head_init: r.random(),
            finetune: r.random(),
        }
    }
}

fn at_subject(id: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::AtSubject { subject: String::from(id), source: e.into() }
}

/// Flow fields of every subject, in order.
pub fn compute_flows(subjects: &[&Subject], config: &PipelineConfig) -> Result<Vec<FlowSequence>> {
    subjects
        .iter()
        .map(|s| flow_sequence(&s.sequence, &config.flow, &config.matcher).map_err(at_subject(&s.id)))
        .collect()
}

/// Class-balanced pixel sample from the subject's evaluation region.
fn sample_balanced(subject: &Subject, cap: usize, rng: &mut ChaCha8Rng) -> (Vec<(usize, usize)>, Vec<usize>) {
    let region = subject.region();
    let (w, h) = region.dims();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            if region.get(x, y) {
                if subject.mask.get(x, y) {
                    pos.push((x, y));
                } else {
                    neg.push((x, y));
                }
            }
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let half = cap / 2;
    let k = if pos.is_empty() || neg.is_empty() { half } else { half.min(pos.len()).min(neg.len()) };
    let mut pixels = Vec::with_capacity(2 * k);
    let mut labels = Vec::with_capacity(2 * k);
    for (list, label) in [(&pos, 1), (&neg, 0)] {
        for &p in list.iter().take(k) {
            pixels.push(p);
            labels.push(label);
        }
    }
    (pixels, labels)
}

fn check_labels(labels: &[usize]) -> Result<()> {
    if !labels.contains(&1) {
        return Err(Error::DegenerateLabels(String::from("no infarct pixels in the training subjects")));
    }
    if !labels.contains(&0) {
        return Err(Error::DegenerateLabels(String::from("no healthy pixels in the training subjects")));
    }
    Ok(())
}

fn common_frames(subjects: &[&Subject]) -> Result<usize> {
    let frames = subjects.first().ok_or_else(|| Error::invalid("no training subjects"))?.sequence.len();
    if subjects.iter().any(|s| s.sequence.len() != frames) {
        return Err(Error::invalid("all subjects must have the same number of frames"));
    }
    Ok(frames)
}

/// Trains the LSTM stack on window patch sequences of balanced pixel samples.
pub fn train_lstm(subjects: &[&Subject], config: &PipelineConfig, seed: u64) -> Result<LstmStack> {
    config.validate()?;
    let frames = common_frames(subjects)?;
    let seeds = Seeds::new(seed);
    let mut stack = LstmStack::new(config.window * config.window, &config.lstm, CLASSES, seeds.lstm_init)?;
    if config.lstm.epochs == 0 {
        return Ok(stack);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.lstm_sample);
    let mut set = SequenceSet::new(frames, config.window * config.window);
    let mut all_labels = Vec::new();
    for s in subjects {
        let (pixels, labels) = sample_balanced(s, config.lstm_samples_per_subject, &mut rng);
        for (&p, &y) in pixels.iter().zip(&labels) {
            set.push(&local_feature(&s.sequence, p, config.window).map_err(at_subject(&s.id))?, y)?;
        }
        all_labels.extend(labels);
    }
    check_labels(&all_labels)?;
    let mut opt = RmsProp::new(config.lstm.optimizer)?;
    lstm_train(&mut stack, &set, &mut opt, config.lstm.epochs, config.lstm.batch_size, seeds.lstm_train)?;
    Ok(stack)
}

/// Trains the classifier on precomputed flows. A supplied LSTM is used as is;
/// otherwise one is trained when the feature mode needs it.
pub fn train_on(
    subjects: &[&Subject],
    flows: &[&FlowSequence],
    config: &PipelineConfig,
    seed: u64,
    lstm: Option<LstmStack>,
) -> Result<Model> {
    config.validate()?;
    if subjects.len() != flows.len() {
        return Err(Error::invalid("one flow sequence per subject is required"));
    }
    let frames = common_frames(subjects)?;
    let seeds = Seeds::new(seed);
    let lstm = match lstm {
        Some(l) => l,
        None if config.mode.uses_local() => train_lstm(subjects, config, seed)?,
        None => LstmStack::new(config.window * config.window, &config.lstm, CLASSES, seeds.lstm_init)?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.sample);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (s, f) in subjects.iter().zip(flows) {
        let (pixels, y) = sample_balanced(s, config.samples_per_subject, &mut rng);
        let x = assemble_batch(&s.sequence, f, &pixels, &lstm, config.window, config.mode, None)
            .map_err(at_subject(&s.id))?;
        features.extend(x);
        labels.extend(y);
    }
    check_labels(&labels)?;
    let dim = config.mode.feature_dim(lstm.hidden_dim(), frames);
    let norm_stats = NormStats::fit(&features, dim)?;
    norm_stats.apply_rows(&mut features);

    let sae = &config.sae;
    let mut ae = Autoencoder::new(dim, &sae.hidden, seeds.ae_init)?;
    sae_pretrain(&mut ae, &features, sae.pretrain_epochs, sae.batch_size, sae.optimizer, seeds.pretrain)?;
    let head = SoftmaxHead::new(ae.code_dim(), CLASSES, seeds.head_init);
    let mut classifier = SaeClassifier::new(ae, head)?;
    fine_tune(&mut classifier, &features, &labels, sae.finetune_epochs, sae.batch_size, sae.optimizer, seeds.finetune)?;
    Ok(Model { config: config.clone(), frames, lstm, classifier, norm_stats })
}

/// Flows, LSTM, features, auto-encoder and softmax head from scratch.
pub fn train(dataset: &Dataset, config: &PipelineConfig, seed: u64) -> Result<Model> {
    let subjects: Vec<&Subject> = dataset.subjects.iter().collect();
    let flows = compute_flows(&subjects, config)?;
    let flow_refs: Vec<&FlowSequence> = flows.iter().collect();
    train_on(&subjects, &flow_refs, config, seed, None)
}

/// Per-pixel infarct scores over an evaluation region.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: PixelMask,
    /// Class-1 probability per pixel, row-major; zero outside `region`.
    pub scores: Vec<f64>,
    pub region: PixelMask,
}

impl Prediction {
    /// Scores and truth labels of the region pixels, raster order.
    pub fn region_pairs(&self, truth: &PixelMask) -> Result<(Vec<f64>, Vec<bool>)> {
        if truth.dims() != self.mask.dims() {
            return Err(Error::invalid("truth mask dimensions differ from the prediction"));
        }
        let (w, h) = self.mask.dims();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.region.get(x, y) {
                    scores.push(self.scores[y * w + x]);
                    labels.push(truth.get(x, y));
                }
            }
        }
        Ok((scores, labels))
    }
}

pub fn infer_with_flows(
    model: &Model,
    seq: &ImageSequence,
    flows: &FlowSequence,
    region: Option<&PixelMask>,
) -> Result<Prediction> {
    let (w, h) = seq.dims();
    if (w, h) != (ROI_SIZE, ROI_SIZE) {
        return Err(Error::invalid("inference expects 64x64 ROI sequences"));
    }
    if seq.len() != model.frames {
        return Err(Error::invalid(format!("model expects {} frames, got {}", model.frames, seq.len())));
    }
    let region = match region {
        Some(r) if r.dims() != (w, h) => return Err(Error::invalid("region mask dimensions differ from the frames")),
        Some(r) => r.clone(),
        None => PixelMask::from_fn(w, h, |_, _| true),
    };
    let mut pixels = Vec::with_capacity(region.count());
    for y in 0..h {
        for x in 0..w {
            if region.get(x, y) {
                pixels.push((x, y));
            }
        }
    }
    let cfg = &model.config;
    let mut scores = vec![0.0; w * h];
    for chunk in pixels.chunks(PREDICT_BATCH) {
        let x = assemble_batch(seq, flows, chunk, &model.lstm, cfg.window, cfg.mode, Some(&model.norm_stats))?;
        let p = model.classifier.predict(&x, chunk.len())?;
        for (&(px, py), row) in chunk.iter().zip(p.chunks_exact(CLASSES)) {
            scores[py * w + px] = row[1];
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::diverged("non-finite infarct score"));
    }
    let mask = PixelMask::from_fn(w, h, |x, y| region.get(x, y) && scores[y * w + x] >= cfg.decision_threshold);
    Ok(Prediction { mask, scores, region })
}

/// Computes flows with the model's settings and classifies every region pixel.
pub fn infer(model: &Model, seq: &ImageSequence, region: Option<&PixelMask>) -> Result<Prediction> {
    let flows = flow_sequence(seq, &model.config.flow, &model.config.matcher)?;
    infer_with_flows(model, seq, &flows, region)
}

/// Predicted and true AHA segment scores of one subject.
pub fn subject_segments(
    pred: &PixelMask,
    subject: &Subject,
    threshold: f64,
) -> Result<(SegmentScores, SegmentScores)> {
    let region = subject.region();
    let p = aha_segments(pred, &region, subject.center, subject.reference_angle, subject.slice_level, threshold)?;
    let t = aha_segments(&subject.mask, &region, subject.center, subject.reference_angle, subject.slice_level, threshold)?;
    Ok((p, t))
}

/// Accumulates region scores and segment agreement over test subjects.
#[derive(Debug, Clone, Default)]
pub struct Pooled {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
    pub segment_agreement: Vec<f64>,
}

impl Pooled {
    pub fn add(&mut self, pred: &Prediction, subject: &Subject, segment_threshold: f64) -> Result<()> {
        let (s, t) = pred.region_pairs(&subject.mask)?;
        self.scores.extend(s);
        self.truth.extend(t);
        if subject.myocardium.is_some() {
            let (p, t) = subject_segments(&pred.mask, subject, segment_threshold).map_err(at_subject(&subject.id))?;
            self.segment_agreement.push(segment_agreement(&p, &t)?);
        }
        Ok(())
    }

    pub fn report(&self, threshold: f64) -> Result<MetricsReport> {
        let mut r = evaluate(&self.scores, &self.truth, threshold)?;
        if !self.segment_agreement.is_empty() {
            r.segment_accuracy =
                Some(self.segment_agreement.iter().sum::<f64>() / self.segment_agreement.len() as f64);
        }
        Ok(r)
    }
}

/// Infers every subject and pools the metrics.
pub fn evaluate_subjects(model: &Model, subjects: &[&Subject], flows: &[&FlowSequence]) -> Result<MetricsReport> {
    if subjects.len() != flows.len() {
        return Err(Error::invalid("one flow sequence per subject is required"));
    }
    let mut pooled = Pooled::default();
    for (s, f) in subjects.iter().zip(flows) {
        let pred = infer_with_flows(model, &s.sequence, f, s.myocardium.as_ref()).map_err(at_subject(&s.id))?;
        pooled.add(&pred, s, model.config.segment_threshold)?;
    }
    pooled.report(model.config.decision_threshold)
}
