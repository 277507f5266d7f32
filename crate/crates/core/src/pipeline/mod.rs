//! Orchestration: training, inference, evaluation and segment scoring.

pub mod aha;
pub mod config;
pub mod cv;
pub mod data;
pub mod metrics;
pub mod model;

pub use crate::features::FeatureMode;
pub use aha::{aha_segments, segment_agreement, SegmentScores, SliceLevel};
pub use config::PipelineConfig;
pub use cv::{ablate, ablate_with_flows, cross_validate, holdout_split, kfold_split, patch_sweep, AblationReport, Fold, SweepRow};
pub use data::{phantom_cohort, phantom_subject, Dataset, Subject};
pub use metrics::{curves, evaluate, MetricsReport};
pub use model::{compute_flows, evaluate_subjects, infer, infer_with_flows, train, train_lstm, train_on, Model, Prediction};
