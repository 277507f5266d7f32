use std::f64::consts::PI;

use ofrnn_core::imaging::PixelMask;
use ofrnn_core::neural::{LstmConfig, SaeConfig};
use ofrnn_core::pipeline::aha::segment_of;
use ofrnn_core::pipeline::*;
use ofrnn_core::synth::PhantomParams;
use ofrnn_core::varflow::FlowParams;
use ofrnn_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mann_whitney(scores: &[f64], truth: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti && !tj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn tiny_config() -> PipelineConfig {
    PipelineConfig {
        window: 5,
        flow: FlowParams { beta: 0.0, outer_iters: 2, solver_iters: 5, ..Default::default() },
        lstm: LstmConfig { layers: 1, hidden: 6, epochs: 1, batch_size: 16, ..Default::default() },
        sae: SaeConfig { hidden: vec![12, 6], pretrain_epochs: 1, finetune_epochs: 3, batch_size: 32, ..Default::default() },
        samples_per_subject: 80,
        lstm_samples_per_subject: 20,
        ..Default::default()
    }
}

fn short_phantoms(n: usize) -> Dataset {
    let base = PhantomParams { frames: 6, ..Default::default() };
    phantom_cohort(n, &base, 3).unwrap()
}

#[test]
fn kfold_partitions_subjects() {
    let folds = kfold_split(114, 10, 1).unwrap();
    assert_eq!(folds.len(), 10);
    let mut seen = vec![0; 114];
    for f in &folds {
        assert!(f.test.len() == 11 || f.test.len() == 12);
        assert_eq!(f.test.len() + f.train.len(), 114);
        for &i in &f.test {
            seen[i] += 1;
            assert!(!f.train.contains(&i));
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(folds, kfold_split(114, 10, 1).unwrap());
    assert!(matches!(kfold_split(3, 5, 0), Err(Error::InvalidParameter(_))));
    assert!(kfold_split(10, 1, 0).is_err());
}

proptest! {
    #[test]
    fn kfold_union_is_disjoint(n in 2usize..60, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let folds = kfold_split(n, k, seed).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn degenerate_predictors() {
    let truth = [true, true, false, false];
    let r = evaluate(&[0.1; 4], &truth, 0.5).unwrap();
    assert_eq!((r.accuracy, r.sensitivity, r.specificity), (0.5, 0.0, 1.0));
    let r = evaluate(&[0.9; 4], &truth, 0.5).unwrap();
    assert_eq!((r.accuracy, r.sensitivity, r.specificity), (0.5, 1.0, 0.0));
    assert_eq!(r.roc_auc, 0.5);
    let r = evaluate(&[1.0, 1.0, 0.0, 0.0], &truth, 0.5).unwrap();
    assert_eq!((r.accuracy, r.roc_auc), (1.0, 1.0));
}

#[test]
fn auc_matches_pairwise_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for case in 0..60 {
        let n = if case == 0 { 20 } else { rng.random_range(2..=200) };
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..15) as f64) / 14.0).collect();
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        truth[0] = true;
        truth[1] = false;
        let r = evaluate(&scores, &truth, 0.5).unwrap();
        assert!((r.roc_auc - mann_whitney(&scores, &truth)).abs() < 1e-12);
        assert_eq!(r.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.roc.last(), Some(&(1.0, 1.0)));
        for v in [r.accuracy, r.sensitivity, r.specificity] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn evaluation_ignores_pixel_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..50).map(|_| rng.random()).collect();
    let truth: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
    let a = evaluate(&scores, &truth, 0.5).unwrap();
    let mut idx: Vec<usize> = (0..50).collect();
    idx.reverse();
    idx.swap(3, 17);
    let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let t2: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
    let b = evaluate(&s2, &t2, 0.5).unwrap();
    assert_eq!((a.accuracy, a.sensitivity, a.specificity, a.roc_auc), (b.accuracy, b.sensitivity, b.specificity, b.roc_auc));
    assert_eq!(a.roc, b.roc);
}

fn annulus(size: usize, c: (f64, f64)) -> PixelMask {
    PixelMask::from_fn(size, size, |x, y| {
        let r = (x as f64 - c.0).hypot(y as f64 - c.1);
        (14.0..=24.0).contains(&r)
    })
}

#[test]
fn aha_counts_and_single_sector() {
    let counts: Vec<usize> = SliceLevel::ALL.iter().map(|l| l.segment_count()).collect();
    assert_eq!(counts, vec![6, 6, 4]);
    assert_eq!(counts.iter().sum::<usize>(), 16);

    let c = (32.0, 32.0);
    let region = annulus(64, c);
    let all = aha_segments(&region, &region, c, 0.0, SliceLevel::Apical, 0.05).unwrap();
    assert!(all.abnormal.iter().all(|&a| a));

    for (level, seg) in [(SliceLevel::Basal, 2), (SliceLevel::Mid, 5), (SliceLevel::Apical, 1)] {
        let n = level.segment_count();
        let reference = 0.3;
        let infarct = PixelMask::from_fn(64, 64, |x, y| {
            region.get(x, y) && segment_of(x as f64, y as f64, c, reference, n) == seg
        });
        let s = aha_segments(&infarct, &region, c, reference, level, 0.05).unwrap();
        let mut oracle = vec![false; n];
        let width = 2.0 * PI / n as f64;
        for y in 0..64 {
            for x in 0..64 {
                if infarct.get(x, y) {
                    let a = ((y as f64 - c.1).atan2(x as f64 - c.0) - reference).rem_euclid(2.0 * PI);
                    oracle[((a / width) as usize).min(n - 1)] = true;
                }
            }
        }
        assert_eq!(s.abnormal, oracle);
        assert_eq!(s.abnormal.iter().filter(|&&a| a).count(), 1);
    }
}

#[test]
fn untrained_model_predictions_are_well_formed() {
    let ds = short_phantoms(2);
    let cfg = PipelineConfig {
        lstm: LstmConfig { epochs: 0, ..tiny_config().lstm },
        sae: SaeConfig { pretrain_epochs: 0, finetune_epochs: 0, ..tiny_config().sae },
        ..tiny_config()
    };
    let model = train(&ds, &cfg, 1).unwrap();
    let s = &ds.subjects[0];
    let pred = infer(&model, &s.sequence, s.myocardium.as_ref()).unwrap();
    assert_eq!(pred.mask.dims(), (64, 64));
    let region = s.myocardium.as_ref().unwrap();
    for y in 0..64 {
        for x in 0..64 {
            let score = pred.scores[y * 64 + x];
            if region.get(x, y) {
                assert!(score > 0.0 && score < 1.0);
                assert_eq!(pred.mask.get(x, y), score >= 0.5);
            } else {
                assert!(!pred.mask.get(x, y));
            }
        }
    }
    assert_eq!(Model::skeleton(&cfg, 6).unwrap().feature_dim(), model.feature_dim());
    assert!(model.validate().is_ok());
}

#[test]
fn training_is_deterministic() {
    let ds = short_phantoms(2);
    let a = train(&ds, &tiny_config(), 9).unwrap();
    let b = train(&ds, &tiny_config(), 9).unwrap();
    assert_eq!(a, b);
    let c = train(&ds, &tiny_config(), 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn missing_infarct_is_degenerate() {
    let mut ds = short_phantoms(2);
    for s in &mut ds.subjects {
        s.mask = PixelMask::zeros(64, 64);
    }
    assert!(matches!(train(&ds, &tiny_config(), 0), Err(Error::DegenerateLabels(_))));
}

#[test]
fn inference_rejects_wrong_dims() {
    let ds = short_phantoms(2);
    let model = Model::skeleton(&tiny_config(), 6).unwrap();
    let big = ofrnn_core::synth::generate(&PhantomParams { frames: 6, ..Default::default() }).unwrap();
    assert!(matches!(infer(&model, &big.sequence, None), Err(Error::InvalidParameter(_))));
    let model25 = Model::skeleton(&tiny_config(), 25).unwrap();
    assert!(infer(&model25, &ds.subjects[0].sequence, None).is_err());
}

#[test]
fn ablation_reports_every_mode_on_shared_folds() {
    let ds = short_phantoms(3);
    let folds = vec![holdout_split(3, 1, 2).unwrap()];
    let r = ablate(&ds, &tiny_config(), &folds, 4).unwrap();
    for m in FeatureMode::ALL {
        let rep = r.get(m);
        assert!(rep.pixels > 0 && rep.segment_accuracy.is_some());
    }
    assert_eq!(r.local.pixels, r.combined.pixels);
    let single = cross_validate(&ds, &PipelineConfig { mode: FeatureMode::GlobalOnly, ..tiny_config() }, &folds, 4).unwrap();
    assert_eq!(serde_json::to_string(&single).unwrap(), serde_json::to_string(&r.global).unwrap());
}

#[test]
fn patch_sweep_validates_sizes() {
    let ds = short_phantoms(2);
    let folds = vec![holdout_split(2, 1, 0).unwrap()];
    let mut t = 0.0;
    let mut clock = || {
        t += 1.0;
        t
    };
    assert!(matches!(patch_sweep(&ds, &[3, 4], &tiny_config(), &folds, 0, &mut clock), Err(Error::InvalidParameter(_))));
    let rows = patch_sweep(&ds, &[3, 11], &tiny_config(), &folds, 0, &mut clock).unwrap();
    assert_eq!(rows.iter().map(|r| r.size).collect::<Vec<_>>(), vec![3, 11]);
    assert!(rows.iter().all(|r| r.seconds > 0.0 && (0.0..=1.0).contains(&r.accuracy)));
}
