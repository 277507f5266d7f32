use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureMode;
use crate::varflow::FlowSequence;
use crate::{Error, Result};

use super::config::PipelineConfig;
use super::data::{Dataset, Subject};
use super::metrics::MetricsReport;
use super::model::{compute_flows, infer_with_flows, train_lstm, train_on, Pooled};

/// Subject indices of one train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle into `k` near-equal test folds.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    if n < k {
        return Err(Error::invalid("fewer subjects than folds"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let mut test = order[lo..hi].to_vec();
            test.sort_unstable();
            let mut train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            train.sort_unstable();
            Fold { train, test }
        })
        .collect())
}

/// Single seeded split holding out `test` subjects.
pub fn holdout_split(n: usize, test: usize, seed: u64) -> Result<Fold> {
    if test == 0 || test >= n {
        return Err(Error::invalid("hold-out size must leave both train and test subjects"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut t = order[..test].to_vec();
    let mut r = order[test..].to_vec();
    t.sort_unstable();
    r.sort_unstable();
    Ok(Fold { train: r, test: t })
}

fn check_folds(folds: &[Fold], n: usize) -> Result<()> {
    if folds.is_empty() {
        return Err(Error::invalid("no folds"));
    }
    for f in folds {
        if f.train.is_empty() || f.test.is_empty() || f.train.iter().chain(&f.test).any(|&i| i >= n) {
            return Err(Error::invalid("fold indices are empty or out of range"));
        }
    }
    Ok(())
}

/// Metrics per feature mode, always in the order local, global, combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub local: MetricsReport,
    pub global: MetricsReport,
    pub combined: MetricsReport,
}

impl AblationReport {
    pub fn get(&self, mode: FeatureMode) -> &MetricsReport {
        match mode {
            FeatureMode::LocalOnly => &self.local,
            FeatureMode::GlobalOnly => &self.global,
            FeatureMode::Combined => &self.combined,
        }
    }
}

/// Train/evaluate `modes` over the folds with precomputed flows. The LSTM
/// is trained once per fold and shared by the modes.
pub fn run_folds(
    dataset: &Dataset,
    flows: &[FlowSequence],
    config: &PipelineConfig,
    folds: &[Fold],
    modes: &[FeatureMode],
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    check_folds(folds, dataset.len())?;
    if flows.len() != dataset.len() {
        return Err(Error::invalid("one flow sequence per subject is required"));
    }
    let mut pooled: Vec<Pooled> = modes.iter().map(|_| Pooled::default()).collect();
    for fold in folds {
        let train: Vec<&Subject> = dataset.select(&fold.train);
        let train_flows: Vec<&FlowSequence> = fold.train.iter().map(|&i| &flows[i]).collect();
        let lstm = if modes.iter().any(|m| m.uses_local()) { Some(train_lstm(&train, config, seed)?) } else { None };
        for (mode, acc) in modes.iter().zip(&mut pooled) {
            let cfg = PipelineConfig { mode: *mode, ..config.clone() };
            let model = train_on(&train, &train_flows, &cfg, seed, lstm.clone())?;
            for &i in &fold.test {
                let s = &dataset.subjects[i];
                let pred = infer_with_flows(&model, &s.sequence, &flows[i], s.myocardium.as_ref())
                    .map_err(|e| Error::AtSubject { subject: s.id.clone(), source: e.into() })?;
                acc.add(&pred, s, cfg.segment_threshold)?;
            }
        }
    }
    pooled.iter().map(|p| p.report(config.decision_threshold)).collect()
}

/// Pooled held-out metrics of `config.mode` over the folds.
pub fn cross_validate(dataset: &Dataset, config: &PipelineConfig, folds: &[Fold], seed: u64) -> Result<MetricsReport> {
    let subjects: Vec<&Subject> = dataset.subjects.iter().collect();
    let flows = compute_flows(&subjects, config)?;
    Ok(run_folds(dataset, &flows, config, folds, &[config.mode], seed)?.remove(0))
}

pub fn ablate_with_flows(
    dataset: &Dataset,
    flows: &[FlowSequence],
    config: &PipelineConfig,
    folds: &[Fold],
    seed: u64,
) -> Result<AblationReport> {
    let mut r = run_folds(dataset, flows, config, folds, &FeatureMode::ALL, seed)?.into_iter();
    let (local, global, combined) = (r.next(), r.next(), r.next());
    match (local, global, combined) {
        (Some(local), Some(global), Some(combined)) => Ok(AblationReport { local, global, combined }),
        _ => Err(Error::invalid("ablation produced too few reports")),
    }
}

/// Local-only, global-only and combined features on identical folds and seed.
pub fn ablate(dataset: &Dataset, config: &PipelineConfig, folds: &[Fold], seed: u64) -> Result<AblationReport> {
    let subjects: Vec<&Subject> = dataset.subjects.iter().collect();
    let flows = compute_flows(&subjects, config)?;
    ablate_with_flows(dataset, &flows, config, folds, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Accuracy and wall time per window size. `clock` returns seconds.
pub fn patch_sweep(
    dataset: &Dataset,
    sizes: &[usize],
    config: &PipelineConfig,
    folds: &[Fold],
    seed: u64,
    clock: &mut dyn FnMut() -> f64,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() || sizes.iter().any(|&s| s < 3 || s % 2 == 0) {
        return Err(Error::invalid("window sizes must be odd and at least 3"));
    }
    let subjects: Vec<&Subject> = dataset.subjects.iter().collect();
    let flows = compute_flows(&subjects, config)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let cfg = PipelineConfig { window: size, ..config.clone() };
        let start = clock();
        let report = run_folds(dataset, &flows, &cfg, folds, &[cfg.mode], seed)?.remove(0);
        rows.push(SweepRow { size, accuracy: report.accuracy, seconds: clock() - start });
    }
    Ok(rows)
}
