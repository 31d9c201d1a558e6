use std::collections::BTreeMap;

use proptest::prelude::*;

use scotti::autodiff::Graph;
use scotti::flops::FlopsLedger;
use scotti::model::{Model, NeuronId};
use scotti::neq::{compute_freeze_mask, cosine_phi, normalize, FreezeMask, OutputSnapshot};
use scotti::optimizer::{masked_sgd_step, HyperState};

fn snapshot(v: Vec<f64>) -> OutputSnapshot {
    OutputSnapshot::new(0, BTreeMap::from([(NeuronId::new(0, 0), v)]))
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    normalize(&mut v);
    v
}

fn velocities() -> impl Strategy<Value = BTreeMap<NeuronId, f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..40).prop_map(|vs| {
        vs.into_iter()
            .enumerate()
            .map(|(i, v)| (NeuronId::new(i / 8, i % 8), v))
            .collect()
    })
}

fn mlp_sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..7, 2..5)
}

fn mask_for(model: &Model, bits: &[bool]) -> FreezeMask {
    FreezeMask::from_neurons(
        model
            .neurons()
            .into_iter()
            .zip(bits.iter().cycle())
            .filter(|(_, &b)| b)
            .map(|(n, _)| n),
        0,
    )
}

proptest! {
    #[test]
    fn phi_in_range(a in prop::collection::vec(-1e3f64..1e3, 1..16), seed in any::<u64>()) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 60)) & 3) as f64 - 0.5).collect();
        let (sa, sb) = (snapshot(unit(a)), snapshot(unit(b)));
        let phi = cosine_phi(&sa, &sb, NeuronId::new(0, 0)).unwrap();
        prop_assert!((-1.0..=1.0).contains(&phi));
    }

    #[test]
    fn phi_of_self_is_one(a in prop::collection::vec(-1e3f64..1e3, 1..16)) {
        let s = snapshot(unit(a));
        let phi = cosine_phi(&s, &s, NeuronId::new(0, 0)).unwrap();
        prop_assert!((phi - 1.0).abs() < 1e-12, "phi = {}", phi);
    }

    #[test]
    fn mask_monotone_in_epsilon(v in velocities(), a in -0.5f64..1.0, b in -0.5f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = compute_freeze_mask(&v, lo, 0);
        let large = compute_freeze_mask(&v, hi, 0);
        prop_assert!(small.frozen().is_subset(large.frozen()));
    }

    #[test]
    fn mask_is_pure(v in velocities(), eps in -0.5f64..1.0) {
        prop_assert_eq!(compute_freeze_mask(&v, eps, 3), compute_freeze_mask(&v, eps, 3));
    }

    #[test]
    fn mask_invariant_under_common_scaling(v in velocities(), eps in 0.0f64..1.0, k in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0, 1024.0])) {
        // power-of-two factors scale exactly, so the comparison is unaffected
        let scaled: BTreeMap<NeuronId, f64> = v.iter().map(|(id, x)| (*id, x * k)).collect();
        prop_assert_eq!(compute_freeze_mask(&v, eps, 0), compute_freeze_mask(&scaled, eps * k, 0));
    }

    #[test]
    fn neuron_slices_partition_mlp(sizes in mlp_sizes()) {
        let m = Model::mlp(&sizes, 0).unwrap();
        let offsets = m.param_offsets();
        let mut seen = vec![0u32; m.param_count()];
        let mut total = 0;
        for id in m.neurons() {
            let s = m.neuron_params(id).unwrap();
            total += s.len();
            for i in s.global_indices(&offsets) {
                seen[i] += 1;
            }
        }
        prop_assert_eq!(total, m.param_count());
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn neuron_slices_partition_cnn(c in 1usize..3, conv in prop::collection::vec(1usize..4, 0..3), tail in prop::collection::vec(1usize..5, 1..3)) {
        let m = Model::cnn([c, 8, 8], &conv, &tail, 1).unwrap();
        let offsets = m.param_offsets();
        let mut seen = vec![0u32; m.param_count()];
        for id in m.neurons() {
            for i in m.neuron_params(id).unwrap().global_indices(&offsets) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn skip_equals_zeroed_full_backward(sizes in mlp_sizes(), bits in prop::collection::vec(any::<bool>(), 1..20), seed in 0u64..1000) {
        let m = Model::mlp(&sizes, seed).unwrap();
        let n = 3;
        let x: Vec<f64> = (0..n * sizes[0]).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect();
        let y: Vec<usize> = (0..n).map(|i| i % sizes[sizes.len() - 1]).collect();
        let mask = mask_for(&m, &bits);
        let grads = |mask: &FreezeMask| {
            let mut g = Graph::new();
            let pass = m.forward(&mut g, &x, n, true).unwrap();
            let l = g.softmax_cross_entropy(pass.logits, &y).unwrap();
            g.backward(l, &m.grad_skip(mask, &pass)).unwrap();
            m.flat_grads(&g, &pass)
        };
        let full = grads(&FreezeMask::empty(0));
        let skipped = grads(&mask);
        let offsets = m.param_offsets();
        let mut oracle = full;
        for id in mask.frozen() {
            for i in m.neuron_params(*id).unwrap().global_indices(&offsets) {
                oracle[i] = 0.0;
            }
        }
        prop_assert_eq!(skipped, oracle);
    }

    #[test]
    fn full_freeze_any_number_of_steps(sizes in mlp_sizes(), steps in 1usize..10, seed in 0u64..100) {
        let mut m = Model::mlp(&sizes, seed).unwrap();
        let before = m.flat_params();
        let mut h = HyperState::new(0.1, 0.0, m.param_count()).with_sgd(0.9, 5e-4);
        let all = FreezeMask::from_neurons(m.neurons(), 0);
        for s in 0..steps {
            let g: Vec<f64> = (0..m.param_count()).map(|i| ((i + s) as f64).cos()).collect();
            masked_sgd_step(&mut m, &g, &all, &mut h).unwrap();
        }
        prop_assert_eq!(m.flat_params(), before);
    }

    #[test]
    fn ledger_bounded_and_monotone(sizes in mlp_sizes(), small_bits in prop::collection::vec(any::<bool>(), 1..20), extra_bits in prop::collection::vec(any::<bool>(), 1..20), epochs in 1usize..6) {
        let m = Model::mlp(&sizes, 0).unwrap();
        let small = mask_for(&m, &small_bits);
        let extra = mask_for(&m, &extra_bits);
        let large = FreezeMask::from_neurons(small.frozen().union(extra.frozen()).copied(), 0);
        let run = |mask: &FreezeMask| {
            let mut l = FlopsLedger::new(false);
            let mut last = 0;
            for e in 0..epochs {
                l.begin_epoch(e);
                l.record_iteration(mask, &m, 4);
                // counters never decrease
                assert!(l.spent_total() >= last);
                last = l.spent_total();
            }
            for e in l.epochs() {
                assert!(e.backward_weight <= e.baseline_backward_weight);
            }
            l.flops_saved_percent().unwrap()
        };
        let (ps, pl) = (run(&small), run(&large));
        prop_assert!((0.0..=100.0).contains(&ps));
        prop_assert!((0.0..=100.0).contains(&pl));
        prop_assert!(pl >= ps);
    }
}
