//! Built-in verification: finite-difference gradient checks for every
//! differentiable op, and randomized property checks of the freezing
//! machinery. Both back the `gradcheck` and `selftest` subcommands.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradSkip, Graph, NodeId, Tensor};
use crate::error::Result;
use crate::flops::FlopsLedger;
use crate::model::{Model, NeuronId};
use crate::neq::{compute_freeze_mask, cosine_phi, normalize, FreezeMask, OutputSnapshot, VelocityState};
use crate::optimizer::{masked_sgd_step, HyperState};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

type Builder = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

/// One case: the point to differentiate at and the scalar function of it.
fn case(name: &'static str, rng: &mut ChaCha8Rng) -> (Tensor, Builder) {
    match name {
        "matmul_a" => {
            let b = uniform(rng, &[4, 3]);
            let f: Builder = Box::new(move |g, x| {
                let b = g.leaf(b.clone());
                let y = g.matmul(x, b)?;
                let s = g.square(y)?;
                g.sum(s)
            });
            (uniform(rng, &[5, 4]), f)
        }
        "matmul_b" => {
            let a = uniform(rng, &[5, 4]);
            let f: Builder = Box::new(move |g, x| {
                let a = g.leaf(a.clone());
                let y = g.matmul(a, x)?;
                let s = g.square(y)?;
                g.sum(s)
            });
            (uniform(rng, &[4, 3]), f)
        }
        "conv2d_input" => {
            let k = uniform(rng, &[3, 2, 3, 3]);
            let f: Builder = Box::new(move |g, x| {
                let k = g.leaf(k.clone());
                let y = g.conv2d(x, k)?;
                let s = g.square(y)?;
                g.sum(s)
            });
            (uniform(rng, &[2, 2, 5, 5]), f)
        }
        "conv2d_kernel" => {
            let input = uniform(rng, &[2, 2, 5, 5]);
            let f: Builder = Box::new(move |g, k| {
                let x = g.leaf(input.clone());
                let y = g.conv2d(x, k)?;
                let s = g.square(y)?;
                g.sum(s)
            });
            (uniform(rng, &[3, 2, 3, 3]), f)
        }
        "relu" => {
            let f: Builder = Box::new(|g, x| {
                let y = g.relu(x)?;
                let s = g.square(y)?;
                g.sum(s)
            });
            (uniform(rng, &[4, 6]), f)
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let f: Builder = Box::new(move |g, x| g.softmax_cross_entropy(x, &labels));
            let mut logits = uniform(rng, &[4, 5]);
            logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            (logits, f)
        }
        "mlp3" => {
            // gradient with respect to the first weight matrix flows through
            // all three layers
            let input = uniform(rng, &[6, 5]);
            let b1 = uniform(rng, &[4]);
            let (w2, b2) = (uniform(rng, &[4, 4]), uniform(rng, &[4]));
            let (w3, b3) = (uniform(rng, &[3, 4]), uniform(rng, &[3]));
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let f: Builder = Box::new(move |g, w1| {
                let x = g.leaf(input.clone());
                let b1 = g.leaf(b1.clone());
                let (w2, b2) = (g.leaf(w2.clone()), g.leaf(b2.clone()));
                let (w3, b3) = (g.leaf(w3.clone()), g.leaf(b3.clone()));
                let h = g.linear(x, w1, b1)?;
                let h = g.relu(h)?;
                let h = g.linear(h, w2, b2)?;
                let h = g.relu(h)?;
                let y = g.linear(h, w3, b3)?;
                g.softmax_cross_entropy(y, &labels)
            });
            (uniform(rng, &[4, 5]), f)
        }
        other => unreachable!("unknown gradcheck case {other}"),
    }
}

pub const GRADCHECK_CASES: [&str; 7] = [
    "matmul_a",
    "matmul_b",
    "conv2d_input",
    "conv2d_kernel",
    "relu",
    "softmax_cross_entropy",
    "mlp3",
];

/// Runs every case at `points` seeded random points and reports the worst
/// relative error per case.
pub fn gradcheck_suite(seed: u64, points: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for name in GRADCHECK_CASES {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let (point, f) = case(name, &mut rng);
            worst = worst.max(grad_check(f, &point, GRADCHECK_STEP)?);
        }
        out.push(CheckResult {
            name,
            points,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub trials: usize,
    /// First counterexample, if any.
    pub failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

fn property(name: &'static str, trials: usize, mut check: impl FnMut(usize) -> Option<String>) -> PropertyResult {
    let failure = (0..trials).find_map(&mut check);
    PropertyResult { name, trials, failure }
}

fn random_snapshot(rng: &mut ChaCha8Rng, neurons: usize, len: usize) -> OutputSnapshot {
    let mut vectors = BTreeMap::new();
    for u in 0..neurons {
        let mut v: Vec<f64> = if rng.random_bool(0.1) {
            vec![0.0; len]
        } else {
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        normalize(&mut v);
        vectors.insert(NeuronId::new(0, u), v);
    }
    OutputSnapshot::new(0, vectors)
}

fn random_velocities(rng: &mut ChaCha8Rng, n: usize) -> BTreeMap<NeuronId, f64> {
    (0..n)
        .map(|u| (NeuronId::new(u % 3, u), rng.random_range(-0.1..0.1)))
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, model: &Model) -> FreezeMask {
    FreezeMask::from_neurons(model.neurons().into_iter().filter(|_| rng.random_bool(0.4)), 0)
}

/// Randomized checks of the invariants the freezing machinery relies on.
pub fn selftest(seed: u64) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(property("phi stays in [-1, 1]", 1000, |_| {
        let a = random_snapshot(&mut rng, 4, 7);
        let b = random_snapshot(&mut rng, 4, 7);
        let bad = a.neurons().find_map(|id| {
            let phi = cosine_phi(&a, &b, id).ok()?;
            (!(-1.0..=1.0).contains(&phi)).then(|| format!("phi = {phi}"))
        });
        bad
    }));

    let mut st = VelocityState::new(0.5);
    let id = NeuronId::new(0, 0);
    st.record_phi(id, 0.8);
    st.set(
        id,
        crate::neq::NeuronVelocity {
            phi_prev: Some(0.8),
            v_prev: 0.2,
        },
    );
    let v = st.update_velocity(0.9, id)?;
    out.push(property("velocity worked example", 1, |_| {
        (v != (0.9 - 0.8) - 0.5 * 0.2 || v.abs() >= 1e-16).then(|| format!("v = {v:e}"))
    }));

    out.push(property("mask grows with epsilon", 100, |_| {
        let vel = random_velocities(&mut rng, 20);
        let (e1, e2) = (rng.random_range(0.0..0.1), rng.random_range(0.0..0.1));
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let (m_lo, m_hi) = (compute_freeze_mask(&vel, lo, 0), compute_freeze_mask(&vel, hi, 0));
        (!m_lo.frozen().is_subset(m_hi.frozen())).then(|| format!("eps {lo} vs {hi}"))
    }));

    let model = Model::mlp(&[16, 8, 4], seed)?;
    let x: Vec<f64> = (0..5 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    let grads = |mask: &FreezeMask| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &x, 5, true)?;
        let loss = g.softmax_cross_entropy(pass.logits, &labels)?;
        let skip = if mask.is_empty() { GradSkip::none() } else { model.grad_skip(mask, &pass) };
        g.backward(loss, &skip)?;
        Ok(model.flat_grads(&g, &pass))
    };
    let full = grads(&FreezeMask::empty(0))?;
    let mut masks = Vec::new();
    for _ in 0..20 {
        masks.push(random_mask(&mut rng, &model));
    }
    let mut skip_failure = None;
    for mask in &masks {
        let skipped = grads(mask)?;
        let active = model.active_params(mask);
        let oracle: Vec<f64> = full.iter().zip(&active).map(|(&g, &a)| if a { g } else { 0.0 }).collect();
        if skipped != oracle {
            skip_failure = Some(format!("mask {:?}", mask.frozen()));
            break;
        }
    }
    out.push(PropertyResult {
        name: "skipped backward equals masked full backward",
        trials: masks.len(),
        failure: skip_failure,
    });

    out.push(property("neuron slices partition the parameters", 20, |_| {
        let depth = rng.random_range(2..5);
        let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..7)).collect();
        let m = Model::mlp(&sizes, 0).ok()?;
        let offsets = m.param_offsets();
        let mut seen = vec![0u8; m.param_count()];
        for id in m.neurons() {
            for i in m.neuron_params(id).ok()?.global_indices(&offsets) {
                seen[i] += 1;
            }
        }
        seen.iter().any(|&c| c != 1).then(|| format!("sizes {sizes:?}"))
    }));

    out.push(property("FLOPs saved stays in [0, 100] and grows with the mask", 50, |_| {
        let small = random_mask(&mut rng, &model);
        let extra = random_mask(&mut rng, &model);
        let large = FreezeMask::from_neurons(small.frozen().union(extra.frozen()).copied(), 0);
        let pct = |mask: &FreezeMask| {
            let mut l = FlopsLedger::new(false);
            l.begin_epoch(0);
            l.record_iteration(&FreezeMask::empty(0), &model, 8);
            l.record_iteration(mask, &model, 8);
            l.flops_saved_percent().ok()
        };
        let (p_small, p_large) = (pct(&small)?, pct(&large)?);
        let bad = !(0.0..=100.0).contains(&p_small) || !(0.0..=100.0).contains(&p_large) || p_large < p_small;
        bad.then(|| format!("{p_small} then {p_large}"))
    }));

    out.push(property("full freeze leaves parameters bitwise unchanged", 10, |_| {
        let mut m = Model::mlp(&[6, 5, 3], rng.random()).ok()?;
        let before = m.flat_params();
        let mut h = HyperState::new(0.1, 0.0, m.param_count()).with_sgd(0.9, 5e-4);
        let g: Vec<f64> = (0..m.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let all = FreezeMask::from_neurons(m.neurons(), 0);
        masked_sgd_step(&mut m, &g, &all, &mut h).ok()?;
        (m.flat_params() != before).then(|| "parameters moved".to_string())
    }));

    Ok(out)
}
