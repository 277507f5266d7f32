use serde::{Deserialize, Serialize};

use crate::features::{FeatureMode, DEFAULT_WINDOW};
use crate::matching::MatcherConfig;
use crate::neural::{LstmConfig, SaeConfig};
use crate::varflow::FlowParams;
use crate::{Error, Result};

use super::aha::DEFAULT_SEGMENT_THRESHOLD;

/// Everything that shapes training and inference; stored in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Side of the square intensity window fed to the LSTM.
    pub window: usize,
    pub mode: FeatureMode,
    pub flow: FlowParams,
    pub matcher: MatcherConfig,
    pub lstm: LstmConfig,
    pub sae: SaeConfig,
    /// Balanced pixel sample cap per subject for the classifier.
    pub samples_per_subject: usize,
    /// Balanced pixel sample cap per subject for LSTM training.
    pub lstm_samples_per_subject: usize,
    pub decision_threshold: f64,
    pub segment_threshold: f64,
    pub folds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            mode: FeatureMode::Combined,
            flow: FlowParams::default(),
            matcher: MatcherConfig::default(),
            lstm: LstmConfig::default(),
            sae: SaeConfig::default(),
            samples_per_subject: 2000,
            lstm_samples_per_subject: 600,
            decision_threshold: 0.5,
            segment_threshold: DEFAULT_SEGMENT_THRESHOLD,
            folds: 10,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid("window must be odd and at least 3"));
        }
        if self.samples_per_subject < 2 || self.lstm_samples_per_subject < 2 {
            return Err(Error::invalid("per-subject sample caps must be at least 2"));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::invalid("decision threshold must lie in (0, 1)"));
        }
        if !(self.segment_threshold > 0.0 && self.segment_threshold <= 1.0) {
            return Err(Error::invalid("segment threshold must lie in (0, 1]"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("at least two folds are required"));
        }
        self.flow.validate()?;
        self.lstm.validate()?;
        self.sae.validate()
    }
}
