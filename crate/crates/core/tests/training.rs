use std::collections::BTreeSet;

use scotti::autodiff::Graph;
use scotti::config::Mode;
use scotti::data::DatasetSpec;
use scotti::flops::FlopsLedger;
use scotti::metrics::metrics_csv;
use scotti::model::{Model, ModelSpec, NeuronId};
use scotti::neq::{capture_probe_outputs, FreezeMask, ProbeSet};
use scotti::optimizer::{train_iteration, Batch, HyperState, IterationOutcome};
use scotti::train::{run_training, run_training_observed, EpochRecord, IterationRecord, Observer};
use scotti::TrainConfig;

fn small(mode: Mode) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::Mlp(vec![8, 6, 3]),
        dataset: DatasetSpec::SyntheticBlobs {
            classes: 3,
            dims: 8,
            samples: 200,
        },
        epochs: 6,
        batch_size: 16,
        probe_size: 10,
        ..TrainConfig::for_mode(mode)
    }
}

fn batch(n: usize, d: usize, k: usize, salt: f64) -> (Vec<f64>, Vec<usize>) {
    let x = (0..n * d).map(|i| ((i as f64 + salt) * 0.731).sin()).collect();
    let y = (0..n).map(|i| (i * 7 + salt as usize) % k).collect();
    (x, y)
}

fn engine_grads(m: &Model, x: &[f64], y: &[usize]) -> Vec<f64> {
    let mut g = Graph::new();
    let pass = m.forward(&mut g, x, y.len(), true).unwrap();
    let l = g.softmax_cross_entropy(pass.logits, y).unwrap();
    g.backward(l, &Default::default()).unwrap();
    m.flat_grads(&g, &pass)
}

#[test]
fn baseline_matches_plain_sgd() {
    let (alpha, mu, wd) = (0.05, 0.9, 5e-4);
    let mut m = Model::mlp(&[5, 4, 3], 7).unwrap();
    let mut w = m.flat_params();
    let mut buf = vec![0.0; w.len()];
    let mut hyper = HyperState::new(alpha, 0.0, m.param_count()).with_sgd(mu, wd);
    let mut ledger = FlopsLedger::new(false);
    let mask = FreezeMask::empty(0);
    let mut oracle = Model::mlp(&[5, 4, 3], 7).unwrap();
    for t in 0..12 {
        let (x, y) = batch(6, 5, 3, t as f64);
        let g = engine_grads(&oracle, &x, &y);
        for i in 0..w.len() {
            buf[i] = mu * buf[i] + (g[i] + wd * w[i]);
            w[i] -= alpha * buf[i];
        }
        set_params(&mut oracle, &w);
        train_iteration(&mut m, Batch { inputs: &x, labels: &y }, &mask, &mut hyper, &mut ledger).unwrap();
        assert_eq!(m.flat_params(), w, "step {t}");
        assert_eq!(hyper.alpha, alpha);
    }
}

fn set_params(m: &mut Model, flat: &[f64]) {
    let mut k = 0;
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v = flat[k];
            k += 1;
        }
    }
}

#[test]
fn baseline_alpha_follows_schedule() {
    let c = TrainConfig {
        epochs: 10,
        ..small(Mode::Baseline)
    };
    let r = run_training(&c).unwrap();
    let alphas: Vec<f64> = r.epochs.iter().map(|e| e.alpha).collect();
    for (e, a) in alphas.iter().enumerate() {
        assert_eq!(*a, c.scheduled_alpha(e));
    }
    assert!(alphas[9] < alphas[0]);
    assert_eq!(r.flops_saved_percent(), 0.0);
}

struct FrozenSlices {
    offsets: Vec<usize>,
    frozen: Vec<(Vec<usize>, Vec<f64>)>,
    checked: usize,
}

impl Observer for FrozenSlices {
    fn on_epoch_start(&mut self, _epoch: usize, mask: &FreezeMask, model: &Model) {
        let flat = model.flat_params();
        self.frozen = mask
            .frozen()
            .iter()
            .map(|id| {
                let idx: Vec<usize> = model.neuron_params(*id).unwrap().global_indices(&self.offsets).collect();
                let vals = idx.iter().map(|&i| flat[i]).collect();
                (idx, vals)
            })
            .collect();
    }

    fn on_iteration(&mut self, _r: &IterationRecord, _o: &IterationOutcome, model: &Model) {
        let flat = model.flat_params();
        for (idx, vals) in &self.frozen {
            for (i, v) in idx.iter().zip(vals) {
                assert_eq!(flat[*i], *v);
                self.checked += 1;
            }
        }
    }
}

#[test]
fn frozen_slices_never_move() {
    let c = TrainConfig {
        epsilon0: 0.02,
        ..small(Mode::FixedEps)
    };
    let model = c.model.build(c.seed).unwrap();
    let mut obs = FrozenSlices {
        offsets: model.param_offsets(),
        frozen: Vec::new(),
        checked: 0,
    };
    let r = run_training_observed(&c, &mut obs).unwrap();
    assert!(r.epochs.iter().any(|e| e.frozen_count > 0));
    assert!(r.epochs.iter().any(|e| e.frozen_count < 9));
    assert!(obs.checked > 0);
}

#[test]
fn ledger_matches_engine_counts() {
    let mut m = Model::mlp(&[6, 5, 4, 3], 3).unwrap();
    let mut hyper = HyperState::new(0.05, 0.0, m.param_count()).with_sgd(0.9, 0.0);
    let mut ledger = FlopsLedger::new(false);
    let masks = [
        FreezeMask::empty(0),
        FreezeMask::from_neurons([NeuronId::new(0, 1), NeuronId::new(1, 0)], 0),
        FreezeMask::from_neurons((0..5).map(|u| NeuronId::new(0, u)), 0),
        FreezeMask::from_neurons(m.neurons(), 0),
        FreezeMask::from_neurons([NeuronId::new(2, 2)], 0),
    ];
    for (t, mask) in masks.iter().enumerate() {
        let (x, y) = batch(5, 6, 3, t as f64);
        let out = train_iteration(&mut m, Batch { inputs: &x, labels: &y }, mask, &mut hyper, &mut ledger).unwrap();
        assert_eq!(out.forward_flops, out.booked.forward, "mask {t}");
        assert_eq!(out.backward.weight_flops, out.booked.backward_weight, "mask {t}");
        assert_eq!(out.backward.input_flops, out.booked.backward_input, "mask {t}");
    }
}

#[test]
fn cnn_ledger_matches_engine_counts() {
    let mut m = Model::cnn([1, 6, 6], &[2, 3], &[4, 2], 5).unwrap();
    let mut hyper = HyperState::new(0.01, 0.0, m.param_count());
    let mut ledger = FlopsLedger::new(false);
    let masks = [
        FreezeMask::empty(0),
        FreezeMask::from_neurons([NeuronId::new(0, 0), NeuronId::new(2, 1)], 0),
        FreezeMask::from_neurons([NeuronId::new(0, 0), NeuronId::new(0, 1)], 0),
    ];
    for (t, mask) in masks.iter().enumerate() {
        let (x, y) = batch(3, 36, 2, t as f64);
        let out = train_iteration(&mut m, Batch { inputs: &x, labels: &y }, mask, &mut hyper, &mut ledger).unwrap();
        assert_eq!(out.forward_flops, out.booked.forward, "mask {t}");
        assert_eq!(out.backward.weight_flops, out.booked.backward_weight, "mask {t}");
        assert_eq!(out.backward.input_flops, out.booked.backward_input, "mask {t}");
    }
}

#[test]
fn mode_lattice() {
    let runs: Vec<(Mode, _)> = Mode::ALL
        .iter()
        .map(|&m| {
            let c = TrainConfig {
                epsilon0: 0.01,
                eta_alpha: if m == Mode::Baseline { 0.0 } else { 1e-3 },
                ..small(m)
            };
            let c = if m == Mode::Scotti { c.with_eta_alpha(1e-3) } else { c };
            (m, run_training(&c).unwrap())
        })
        .collect();
    for (mode, r) in &runs {
        let eps: BTreeSet<u64> = r.iterations.iter().map(|i| i.epsilon.to_bits()).collect();
        let alphas_move = r.iterations.windows(2).any(|w| w[0].alpha != w[1].alpha && w[0].epoch == w[1].epoch);
        let any_frozen = r.epochs.iter().any(|e| e.frozen_count > 0);
        match mode {
            Mode::Baseline => {
                assert!(!alphas_move && !any_frozen && eps.len() == 1);
                assert_eq!(r.flops.probe_overhead, 0);
                assert_eq!(r.flops.hyper_flops, 0);
            }
            Mode::Ultimate => {
                assert!(alphas_move && !any_frozen && eps.len() == 1);
                assert_eq!(r.flops.probe_overhead, 0);
            }
            Mode::FixedEps => {
                assert_eq!(eps.len(), 1);
                assert!(any_frozen);
                assert!(r.flops.probe_overhead > 0);
            }
            Mode::Scotti => {
                assert!(alphas_move && eps.len() > 1);
                assert!(r.flops.hyper_flops > 0);
            }
        }
    }
}

#[test]
fn metrics_bytes_identical_across_reruns() {
    for mode in Mode::ALL {
        let c = small(mode);
        assert_eq!(metrics_csv(&run_training(&c).unwrap()), metrics_csv(&run_training(&c).unwrap()));
    }
}

#[test]
fn huge_fixed_threshold_flattens_accuracy() {
    let c = TrainConfig {
        epsilon0: 1e9,
        ..small(Mode::FixedEps)
    };
    let r = run_training(&c).unwrap();
    let acc = r.test_acc_series();
    assert!(acc[2..].iter().all(|a| *a == acc[1]), "{acc:?}");
    let loss: Vec<f64> = r.epochs.iter().map(|e| e.loss).collect();
    // weights are fixed; only the shuffled summation order differs
    assert!(loss[3..].iter().all(|l| (l - loss[2]).abs() < 1e-12), "{loss:?}");
}

struct MaskSizes(Vec<(usize, usize)>);

impl Observer for MaskSizes {
    fn on_epoch_start(&mut self, epoch: usize, mask: &FreezeMask, _m: &Model) {
        self.0.push((epoch, mask.len()));
    }

    fn on_epoch_end(&mut self, record: &EpochRecord, _m: &Model) {
        let (epoch, n) = *self.0.last().unwrap();
        assert_eq!(epoch, record.epoch);
        assert_eq!(n, record.frozen_count);
    }
}

#[test]
fn frozen_count_is_mask_size() {
    let c = TrainConfig {
        epsilon0: 0.02,
        ..small(Mode::FixedEps)
    };
    let mut obs = MaskSizes(Vec::new());
    let r = run_training_observed(&c, &mut obs).unwrap();
    assert_eq!(obs.0.len(), r.epochs.len());
    assert_eq!(obs.0[0].1, 0);
    assert_eq!(obs.0[1].1, 0);
}

#[test]
fn frozen_lower_layer_outputs_do_not_change() {
    let mut m = Model::mlp(&[6, 5, 4, 3], 11).unwrap();
    let (px, _) = batch(8, 6, 3, 99.0);
    let probe = ProbeSet::new(px, 8, 0).unwrap();
    let before = capture_probe_outputs(&m, &probe, 0).unwrap();
    let mask = FreezeMask::from_neurons((0..5).map(|u| NeuronId::new(0, u)), 0);
    let mut hyper = HyperState::new(0.1, 0.0, m.param_count()).with_sgd(0.9, 5e-4);
    let mut ledger = FlopsLedger::new(false);
    for t in 0..5 {
        let (x, y) = batch(4, 6, 3, t as f64);
        train_iteration(&mut m, Batch { inputs: &x, labels: &y }, &mask, &mut hyper, &mut ledger).unwrap();
    }
    let after = capture_probe_outputs(&m, &probe, 1).unwrap();
    for u in 0..5 {
        let id = NeuronId::new(0, u);
        assert_eq!(before.get(id), after.get(id));
    }
    assert_ne!(before.get(NeuronId::new(1, 0)), after.get(NeuronId::new(1, 0)));
}

#[test]
fn two_iteration_scalar_replay() {
    let (alpha0, eps0, eta_a, eta_e) = (0.05, 0.1, 1e-2, 5e-3);
    let mut m = Model::mlp(&[4, 5, 3], 2).unwrap();
    let mask = FreezeMask::from_neurons([NeuronId::new(0, 1)], 0);
    let offsets = m.param_offsets();
    let frozen: Vec<usize> = m.neuron_params(NeuronId::new(0, 1)).unwrap().global_indices(&offsets).collect();
    let mut hyper = HyperState::new(alpha0, eps0, m.param_count())
        .with_hyper_rates(eta_a, eta_e)
        .with_sgd(0.0, 0.0);
    let mut ledger = FlopsLedger::new(false);
    let mut grads = Vec::new();
    for t in 0..2 {
        let (x, y) = batch(6, 4, 3, t as f64);
        let mut g = engine_grads(&m, &x, &y);
        for &i in &frozen {
            g[i] = 0.0;
        }
        grads.push(g);
        let out = train_iteration(&mut m, Batch { inputs: &x, labels: &y }, &mask, &mut hyper, &mut ledger).unwrap();
        if t == 0 {
            assert_eq!((out.alpha, out.epsilon, out.dot), (alpha0, eps0, None));
        } else {
            let dot: f64 = grads[0].iter().zip(&grads[1]).map(|(a, b)| a * b).sum();
            let alpha = alpha0 + eta_a * dot;
            let eps = eps0 - eta_e * dot * alpha0;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-14 * b.abs().max(1e-3);
            assert!(close(out.dot.unwrap(), dot));
            assert!(close(out.alpha, alpha), "{} vs {alpha}", out.alpha);
            assert!(close(out.epsilon, eps), "{} vs {eps}", out.epsilon);
        }
    }
}

struct ParamTrace(Vec<Vec<f64>>);

impl Observer for ParamTrace {
    fn on_iteration(&mut self, _r: &IterationRecord, _o: &IterationOutcome, model: &Model) {
        self.0.push(model.flat_params());
    }
}

fn trace(c: &TrainConfig) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut t = ParamTrace(Vec::new());
    let r = run_training_observed(c, &mut t).unwrap();
    (t.0, r.epochs.iter().map(|e| e.frozen_count).collect())
}

#[test]
fn fixed_eps_equals_scotti_without_epsilon_learning() {
    let fixed = TrainConfig {
        epsilon0: 0.02,
        eta_alpha: 1e-3,
        ..small(Mode::FixedEps)
    };
    let scotti = TrainConfig {
        mode: Mode::Scotti,
        eta_epsilon: 0.0,
        ..fixed.clone()
    };
    let (a, frozen) = trace(&fixed);
    assert!(frozen.iter().any(|&n| n > 0));
    assert_eq!((a, frozen), trace(&scotti));
}

#[test]
fn ultimate_equals_scotti_that_never_freezes() {
    let ultimate = TrainConfig {
        eta_alpha: 1e-3,
        ..small(Mode::Ultimate)
    };
    let scotti = TrainConfig {
        mode: Mode::Scotti,
        epsilon0: -1.0,
        eta_epsilon: 0.0,
        ..ultimate.clone()
    };
    assert_eq!(trace(&ultimate), trace(&scotti));
}
