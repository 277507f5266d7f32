use ofrnn_core::neural::lstm::{dropout, lstm_step_backward};
use ofrnn_core::neural::sae::AeStage;
use ofrnn_core::neural::{
    classify, fine_tune, lstm_forward, lstm_step, lstm_train, sae_pretrain, softmax, Autoencoder, CellKind,
    LstmConfig, LstmLayer, LstmStack, Parameters, RmsProp, RmsPropConfig, SaeClassifier, SequenceSet, SoftmaxHead,
};
use ofrnn_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Normwise relative error between analytic and central-difference gradients.
fn fd_check<P: Parameters>(params: &P, grad: &P, loss: impl Fn(&P) -> f64) -> f64 {
    let g = grad.flatten();
    let eps = 1e-5;
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for k in 0..params.parameter_count() {
        let bump = |d: f64| {
            let mut p = params.clone();
            let mut off = 0;
            p.visit_mut("", &mut |_, _, data| {
                if (off..off + data.len()).contains(&k) {
                    data[k - off] += d;
                }
                off += data.len();
            });
            loss(&p)
        };
        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
        diff += (fd - g[k]) * (fd - g[k]);
        na += g[k] * g[k];
        nf += fd * fd;
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300)
}

#[test]
fn two_layer_stack_matches_straight_line_recurrence() {
    let w1: Vec<f64> = (0..8 * 4).map(|k| ((k * 7 % 11) as f64 - 5.0) * 0.1).collect();
    let b1: Vec<f64> = (0..8).map(|k| (k as f64 - 3.5) * 0.05).collect();
    let w2: Vec<f64> = (0..8 * 4).map(|k| ((k * 5 % 13) as f64 - 6.0) * 0.08).collect();
    let b2: Vec<f64> = (0..8).map(|k| 0.1 - k as f64 * 0.03).collect();
    let why = vec![0.7, -0.4, -0.2, 0.9, 0.3, 0.5];
    let l1 = LstmLayer::from_parts(2, 2, CellKind::Lstm, w1.clone(), b1.clone(), 0.0).unwrap();
    let l2 = LstmLayer::from_parts(2, 2, CellKind::Lstm, w2.clone(), b2.clone(), 0.5).unwrap();
    let stack = LstmStack::from_parts(vec![l1, l2], why.clone(), 3).unwrap();
    let xs = vec![vec![0.5, -1.0], vec![0.25, 0.75], vec![-0.6, 0.1]];
    let out = lstm_forward(&stack, &xs).unwrap();

    let cell = |w: &[f64], b: &[f64], x: [f64; 2], h: [f64; 2], c: [f64; 2]| {
        let z = [x[0], x[1], h[0], h[1]];
        let pre = |r: usize| b[r] + (0..4).map(|j| w[r * 4 + j] * z[j]).sum::<f64>();
        let mut hn = [0.0; 2];
        let mut cn = [0.0; 2];
        for k in 0..2 {
            let i = sig(pre(k));
            let f = sig(pre(2 + k));
            let o = sig(pre(4 + k));
            let g = pre(6 + k).tanh();
            cn[k] = f * c[k] + i * g;
            hn[k] = o * cn[k].tanh();
        }
        (hn, cn)
    };
    let (mut h1, mut c1, mut h2, mut c2) = ([0.0; 2], [0.0; 2], [0.0; 2], [0.0; 2]);
    for (t, x) in xs.iter().enumerate() {
        (h1, c1) = cell(&w1, &b1, [x[0], x[1]], h1, c1);
        (h2, c2) = cell(&w2, &b2, h1, h2, c2);
        let logits: Vec<f64> = (0..3).map(|r| why[2 * r] * h2[0] + why[2 * r + 1] * h2[1]).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for r in 0..3 {
            assert!((out.probs[t][r] - e[r] / s).abs() < 1e-12);
        }
    }
    assert!((out.h_last[0] - h2[0]).abs() < 1e-12 && (out.h_last[1] - h2[1]).abs() < 1e-12);
}

#[test]
fn stack_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..6u64 {
        let cell = if trial % 3 == 2 { CellKind::Plain } else { CellKind::Lstm };
        let cfg = LstmConfig { layers: 1 + trial as usize % 3, hidden: rng.random_range(2..=6), dropout: 0.4, cell, ..Default::default() };
        let input = rng.random_range(1..=5);
        let steps = rng.random_range(1..=5);
        let batch = rng.random_range(1..=3);
        let mut stack = LstmStack::new(input, &cfg, 2 + trial as usize % 2, trial).unwrap();
        for l in &mut stack.layers {
            for b in &mut l.b {
                *b += rng.random_range(-0.3..0.3);
            }
        }
        let x: Vec<f64> = (0..steps * batch * input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..stack.output_dim)).collect();
        let masks = stack.sample_masks(steps, batch, &mut rng);
        let (_, grad) = stack.loss_and_grad(&x, steps, &labels, Some(&masks)).unwrap();
        let worst = fd_check(&stack, &grad, |s| s.loss_and_grad(&x, steps, &labels, Some(&masks)).unwrap().0);
        assert!(worst < 1e-5, "trial {trial}: {worst}");
    }
}

#[test]
fn step_backward_rejects_bad_dims() {
    let layer = LstmLayer::from_parts(1, 1, CellKind::Lstm, vec![0.0; 8], vec![0.0; 4], 0.0).unwrap();
    assert!(matches!(lstm_step(&layer, &[1.0, 2.0], &[0.0], &[0.0], None), Err(Error::InvalidParameter(_))));
    assert!(lstm_step_backward(&layer, &[1.0], &[0.0], &[0.0], None, &[1.0, 1.0], &[0.0]).is_err());
}

#[test]
fn dropout_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x: Vec<f64> = (0..6).map(|k| 0.2 + k as f64 * 0.3).collect();
    let rate = 0.5;
    let n = 10_000;
    let mut sum = vec![0.0; x.len()];
    let mut sq = vec![0.0; x.len()];
    for _ in 0..n {
        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 }).collect();
        for (k, v) in dropout(&x, &mask, rate).iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    for k in 0..x.len() {
        let mean = sum[k] / n as f64;
        let var = sq[k] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - x[k]).abs() < 3.0 * se, "{k}: {mean} vs {}", x[k]);
    }
}

#[test]
fn argmax_invariant_under_output_scaling() {
    let cfg = LstmConfig { layers: 2, hidden: 5, ..Default::default() };
    let stack = LstmStack::new(3, &cfg, 3, 2).unwrap();
    let mut scaled = stack.clone();
    for w in &mut scaled.w_hy {
        *w *= 3.7;
    }
    let seq: Vec<Vec<f64>> = (0..4).map(|t| vec![0.3 * t as f64, -0.5, 0.2]).collect();
    assert_eq!(lstm_forward(&stack, &seq).unwrap().labels, lstm_forward(&scaled, &seq).unwrap().labels);
    let p = softmax(&[1.0, 2.0, 3.0]);
    let q = softmax(&[101.0, 102.0, 103.0]);
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn toy_sequences(seed: u64) -> SequenceSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = 10;
    let mut set = SequenceSet::new(steps, 1);
    for k in 0..20 {
        let label = k % 2;
        let seq: Vec<f64> = if label == 0 {
            let (a, v) = (rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1));
            (0..steps).map(|t| a + v * t as f64).collect()
        } else {
            let (amp, phase) = (rng.random_range(0.3..0.8), rng.random_range(0.0..6.28));
            (0..steps).map(|t| amp * (1.5 * t as f64 + phase).sin()).collect()
        };
        set.push(&seq, label).unwrap();
    }
    set
}

fn toy_config() -> LstmConfig {
    LstmConfig { layers: 2, hidden: 8, dropout: 0.0, ..Default::default() }
}

#[test]
fn toy_task_is_learned() {
    let data = toy_sequences(1);
    let mut stack = LstmStack::new(1, &toy_config(), 2, 3).unwrap();
    let mut opt = RmsProp::new(RmsPropConfig { learning_rate: 3e-3, ..Default::default() }).unwrap();
    let trace = lstm_train(&mut stack, &data, &mut opt, 300, 20, 5).unwrap();
    for w in trace[..10].windows(2) {
        assert!(w[1] < w[0], "{trace:?}");
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let seq: Vec<Vec<f64>> = data.sequence(i).iter().map(|&v| vec![v]).collect();
            *lstm_forward(&stack, &seq).unwrap().labels.last().unwrap() == data.labels()[i]
        })
        .count();
    assert_eq!(correct, data.len());
}

#[test]
fn training_is_deterministic_and_zero_rate_is_inert() {
    let data = toy_sequences(2);
    let cfg = LstmConfig { dropout: 0.5, ..toy_config() };
    let run = |lr: f64| {
        let mut stack = LstmStack::new(1, &cfg, 2, 4).unwrap();
        let mut opt = RmsProp::new(RmsPropConfig { learning_rate: lr, ..Default::default() }).unwrap();
        let trace = lstm_train(&mut stack, &data, &mut opt, 3, 6, 9).unwrap();
        (stack, trace)
    };
    let (a, ta) = run(0.01);
    let (b, tb) = run(0.01);
    assert_eq!(ta, tb);
    assert_eq!(a, b);
    let (frozen, _) = run(0.0);
    let init = LstmStack::new(1, &cfg, 2, 4).unwrap();
    assert_eq!(frozen.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), init.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn diverging_training_reports_epoch() {
    let mut data = SequenceSet::new(2, 1);
    data.push(&[f64::NAN, 1.0], 0).unwrap();
    data.push(&[0.0, 1.0], 1).unwrap();
    let mut stack = LstmStack::new(1, &toy_config(), 2, 0).unwrap();
    let mut opt = RmsProp::new(RmsPropConfig::default()).unwrap();
    match lstm_train(&mut stack, &data, &mut opt, 2, 2, 0) {
        Err(Error::NumericalDivergence(msg)) => assert!(msg.contains("epoch 0")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn sae_and_head_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..5u64 {
        let d = rng.random_range(2..=8);
        let h = rng.random_range(2..=8);
        let rows = rng.random_range(1..=4);
        let ae = Autoencoder::new(d, &[h, rng.random_range(2..=6)], trial).unwrap();
        let mut stage: AeStage = ae.stage(0);
        for b in stage.encoder.b.iter_mut().chain(stage.decoder.b.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = stage.loss_and_grad(&x, rows).unwrap();
        assert!(fd_check(&stage, &g, |s| s.loss_and_grad(&x, rows).unwrap().0) < 1e-5);

        let code = ae.code_dim();
        let clf = SaeClassifier::new(ae, SoftmaxHead::new(code, 2, trial)).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..2)).collect();
        let (_, g) = clf.loss_and_grad(&x, &labels).unwrap();
        assert!(fd_check(&clf, &g, |c| c.loss_and_grad(&x, &labels).unwrap().0) < 1e-5);

        let head = SoftmaxHead::new(d, 3, trial + 10);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let (_, g, _) = head.loss_and_grad(&x, &labels).unwrap();
        assert!(fd_check(&head, &g, |hd| hd.loss_and_grad(&x, &labels).unwrap().0) < 1e-5);
    }
}

fn blobs(seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for k in 0..40 {
        let label = k % 2;
        let c = if label == 1 { 1.0 } else { -1.0 };
        for _ in 0..6 {
            x.push(c * 0.8 + rng.random_range(-0.5..0.5));
        }
        y.push(label);
    }
    (x, y)
}

#[test]
fn pretraining_losses_settle() {
    let (x, _) = blobs(3);
    let mut ae = Autoencoder::new(6, &[8, 4, 3], 1).unwrap();
    let opt = RmsPropConfig { learning_rate: 5e-3, ..Default::default() };
    let traces = sae_pretrain(&mut ae, &x, 30, 40, opt, 2).unwrap();
    assert_eq!(traces.len(), 3);
    for t in &traces {
        for w in t.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{t:?}");
        }
        assert!(t.last().unwrap() < &t[0]);
    }

    let zeros = vec![0.0; 40 * 6];
    let mut ae = Autoencoder::new(6, &[4], 1).unwrap();
    let traces = sae_pretrain(&mut ae, &zeros, 200, 40, opt, 2).unwrap();
    assert!(traces[0].last().unwrap() < &(traces[0][0] * 1e-2));
}

#[test]
fn fine_tuning_separates_blobs_deterministically() {
    let (x, y) = blobs(4);
    let build = || {
        let ae = Autoencoder::new(6, &[8, 4], 5).unwrap();
        SaeClassifier::new(ae, SoftmaxHead::new(4, 2, 6)).unwrap()
    };
    let opt = RmsPropConfig { learning_rate: 1e-2, ..Default::default() };
    let mut a = build();
    let trace = fine_tune(&mut a, &x, &y, 60, 40, opt, 7).unwrap();
    for w in trace[..10].windows(2) {
        assert!(w[1] < w[0]);
    }
    for (row, &label) in x.chunks(6).zip(&y) {
        let (p, l) = classify(&a, row).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|&v| v > 0.0));
        assert_eq!(l, label);
    }
    let mut b = build();
    fine_tune(&mut b, &x, &y, 60, 40, opt, 7).unwrap();
    assert_eq!(a, b);
}
