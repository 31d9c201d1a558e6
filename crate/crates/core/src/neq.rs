//! Per-neuron equilibrium tracking.
//!
//! Once per epoch the model is evaluated on a fixed probe batch. Each
//! neuron's outputs over the probe (spatial positions flattened, then
//! concatenated across samples) are L2-normalized into a snapshot. The
//! similarity of consecutive snapshots `phi`, its change, and a
//! momentum-damped velocity `v = Δphi − mu_eq · v_prev` decide which
//! neurons are frozen: `|v| <= epsilon`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Model, NeuronId};

/// Fixed inputs on which neuron outputs are compared across epochs.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    inputs: Vec<f64>,
    size: usize,
    seed: u64,
}

impl ProbeSet {
    pub fn new(inputs: Vec<f64>, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Validation("probe set must not be empty".into()));
        }
        if !inputs.len().is_multiple_of(size) {
            return Err(Error::Dimension(format!(
                "{} probe values do not split into {size} samples",
                inputs.len()
            )));
        }
        Ok(Self { inputs, size, seed })
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Unit-norm output vector of every neuron at one point in training.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSnapshot {
    /// Training epochs completed when the snapshot was taken.
    pub epoch: usize,
    vectors: BTreeMap<NeuronId, Vec<f64>>,
    /// Forward FLOPs spent on the probe pass.
    pub flops: u64,
}

impl OutputSnapshot {
    pub fn new(epoch: usize, vectors: BTreeMap<NeuronId, Vec<f64>>) -> Self {
        Self {
            epoch,
            vectors,
            flops: 0,
        }
    }

    pub fn get(&self, id: NeuronId) -> Option<&[f64]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.vectors.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Scales `v` to unit length in place; an all-zero vector stays all zero
/// and serves as the dead-neuron sentinel.
pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn is_sentinel(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// One gradient-free forward pass over the probe, collecting each neuron's
/// post-activation outputs.
pub fn capture_probe_outputs(model: &Model, probe: &ProbeSet, epoch: usize) -> Result<OutputSnapshot> {
    let n = probe.size();
    if probe.inputs().len() != n * model.input_len() {
        return Err(Error::Dimension(format!(
            "probe has {} features per sample, model expects {}",
            probe.inputs().len() / n,
            model.input_len()
        )));
    }
    let mut g = Graph::new();
    let pass = model.forward(&mut g, probe.inputs(), n, false)?;
    let mut vectors = BTreeMap::new();
    for (li, node) in pass.neuron_outputs.iter().enumerate() {
        let layer = model.trainable_layer(li).expect("output per trainable layer");
        let (width, positions) = (layer.width(), layer.positions());
        let out = g.value(*node).data();
        for unit in 0..width {
            let mut v = Vec::with_capacity(n * positions);
            for s in 0..n {
                let base = (s * width + unit) * positions;
                v.extend_from_slice(&out[base..base + positions]);
            }
            normalize(&mut v);
            vectors.insert(NeuronId::new(li, unit), v);
        }
    }
    Ok(OutputSnapshot {
        epoch,
        vectors,
        flops: g.forward_flops(),
    })
}

/// Cosine similarity of a neuron's outputs in two snapshots, in [-1, 1].
/// Two dead (all-zero) snapshots count as unchanged (1); dead against live
/// counts as unrelated (0).
pub fn cosine_phi(current: &OutputSnapshot, previous: &OutputSnapshot, id: NeuronId) -> Result<f64> {
    let (Some(a), Some(b)) = (current.get(id), previous.get(id)) else {
        return Err(Error::Contract(format!("neuron {id} missing from a snapshot")));
    };
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "neuron {id} snapshot length changed from {} to {}",
            b.len(),
            a.len()
        )));
    }
    Ok(phi_of(a, b))
}

fn phi_of(a: &[f64], b: &[f64]) -> f64 {
    match (is_sentinel(a), is_sentinel(b)) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeuronVelocity {
    pub phi_prev: Option<f64>,
    pub v_prev: f64,
}

/// Velocity memory for every neuron.
#[derive(Clone, Debug)]
pub struct VelocityState {
    mu_eq: f64,
    entries: BTreeMap<NeuronId, NeuronVelocity>,
    /// Snapshots observed so far.
    pub warm: usize,
}

impl VelocityState {
    pub fn new(mu_eq: f64) -> Self {
        Self {
            mu_eq,
            entries: BTreeMap::new(),
            warm: 0,
        }
    }

    pub fn mu_eq(&self) -> f64 {
        self.mu_eq
    }

    pub fn get(&self, id: NeuronId) -> Option<&NeuronVelocity> {
        self.entries.get(&id)
    }

    /// Seeds `phi_prev` without producing a velocity.
    pub fn record_phi(&mut self, id: NeuronId, phi: f64) {
        self.entries.entry(id).or_default().phi_prev = Some(phi);
    }

    pub fn set(&mut self, id: NeuronId, entry: NeuronVelocity) {
        self.entries.insert(id, entry);
    }

    /// `v_e = (phi_e − phi_prev) − mu_eq · v_prev`; stores `phi_e` and `v_e`.
    pub fn update_velocity(&mut self, phi: f64, id: NeuronId) -> Result<f64> {
        let mu = self.mu_eq;
        let entry = self
            .entries
            .get_mut(&id)
            .filter(|e| e.phi_prev.is_some())
            .ok_or_else(|| Error::Contract(format!("neuron {id} has no previous similarity yet")))?;
        let delta = phi - entry.phi_prev.expect("checked above");
        let v = delta - mu * entry.v_prev;
        entry.phi_prev = Some(phi);
        entry.v_prev = v;
        Ok(v)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    frozen: BTreeSet<NeuronId>,
    pub epoch: usize,
}

impl FreezeMask {
    pub fn empty(epoch: usize) -> Self {
        Self {
            frozen: BTreeSet::new(),
            epoch,
        }
    }

    pub fn from_neurons(neurons: impl IntoIterator<Item = NeuronId>, epoch: usize) -> Self {
        Self {
            frozen: neurons.into_iter().collect(),
            epoch,
        }
    }

    pub fn frozen(&self) -> &BTreeSet<NeuronId> {
        &self.frozen
    }

    pub fn contains(&self, id: NeuronId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }
}

/// Neurons whose velocity satisfies `|v| <= epsilon`. Neurons without a
/// velocity are absent from `velocities` and therefore never frozen.
pub fn compute_freeze_mask(velocities: &BTreeMap<NeuronId, f64>, epsilon: f64, epoch: usize) -> FreezeMask {
    FreezeMask {
        frozen: velocities
            .iter()
            .filter(|(_, v)| v.abs() <= epsilon)
            .map(|(id, _)| *id)
            .collect(),
        epoch,
    }
}

/// Snapshot history plus velocity state across a run.
#[derive(Clone, Debug)]
pub struct NeqTracker {
    state: VelocityState,
    previous: Option<OutputSnapshot>,
}

impl NeqTracker {
    pub fn new(mu_eq: f64) -> Self {
        Self {
            state: VelocityState::new(mu_eq),
            previous: None,
        }
    }

    pub fn state(&self) -> &VelocityState {
        &self.state
    }

    /// Folds in a new snapshot and returns the velocities it produced: empty
    /// for the first two snapshots, then one entry per neuron.
    pub fn observe(&mut self, snapshot: OutputSnapshot) -> Result<BTreeMap<NeuronId, f64>> {
        let mut velocities = BTreeMap::new();
        if let Some(prev) = &self.previous {
            for id in snapshot.neurons() {
                let phi = cosine_phi(&snapshot, prev, id)?;
                let ready = self.state.get(id).is_some_and(|e| e.phi_prev.is_some());
                if ready {
                    velocities.insert(id, self.state.update_velocity(phi, id)?);
                } else {
                    self.state.record_phi(id, phi);
                }
            }
        }
        self.state.warm += 1;
        self.previous = Some(snapshot);
        Ok(velocities)
    }
}

/// Histogram of `|v|` over decades, for the per-epoch report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VelocitySummary {
    pub count: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Upper edges of the first `bins.len() - 1` buckets; the last bucket is open.
    pub edges: Vec<f64>,
    pub bins: Vec<usize>,
}

impl VelocitySummary {
    pub const EDGES: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

    pub fn from_velocities(velocities: &BTreeMap<NeuronId, f64>) -> Self {
        let mut bins = vec![0; Self::EDGES.len() + 1];
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for v in velocities.values() {
            let a = v.abs();
            sum += a;
            max = max.max(a);
            let b = Self::EDGES.iter().position(|&e| a < e).unwrap_or(Self::EDGES.len());
            bins[b] += 1;
        }
        let count = velocities.len();
        Self {
            count,
            mean_abs: if count > 0 { sum / count as f64 } else { 0.0 },
            max_abs: max,
            edges: Self::EDGES.to_vec(),
            bins,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(vecs: &[(NeuronId, Vec<f64>)]) -> OutputSnapshot {
        OutputSnapshot::new(0, vecs.iter().cloned().collect())
    }

    fn id(u: usize) -> NeuronId {
        NeuronId::new(0, u)
    }

    #[test]
    fn phi_examples() {
        let a = snap(&[(id(0), vec![1.0, 0.0])]);
        let b = snap(&[(id(0), vec![0.0, 1.0])]);
        let c = snap(&[(id(0), vec![0.6, 0.8])]);
        assert_eq!(cosine_phi(&a, &a, id(0)).unwrap(), 1.0);
        assert_eq!(cosine_phi(&a, &b, id(0)).unwrap(), 0.0);
        assert_eq!(cosine_phi(&a, &c, id(0)).unwrap(), 0.6);
    }

    #[test]
    fn phi_sentinels() {
        let z = snap(&[(id(0), vec![0.0, 0.0])]);
        let a = snap(&[(id(0), vec![1.0, 0.0])]);
        assert_eq!(cosine_phi(&z, &z, id(0)).unwrap(), 1.0);
        assert_eq!(cosine_phi(&z, &a, id(0)).unwrap(), 0.0);
        assert_eq!(cosine_phi(&a, &z, id(0)).unwrap(), 0.0);
    }

    #[test]
    fn phi_length_mismatch() {
        let a = snap(&[(id(0), vec![1.0, 0.0])]);
        let b = snap(&[(id(0), vec![1.0, 0.0, 0.0])]);
        assert!(matches!(cosine_phi(&a, &b, id(0)), Err(Error::Contract(_))));
        let empty = snap(&[]);
        assert!(cosine_phi(&a, &empty, id(0)).is_err());
    }

    #[test]
    fn velocity_examples() {
        let mut s = VelocityState::new(0.0);
        s.record_phi(id(0), 0.8);
        assert!((s.update_velocity(0.9, id(0)).unwrap() - 0.1).abs() < 1e-15);

        let mut s = VelocityState::new(0.5);
        s.set(
            id(0),
            NeuronVelocity {
                phi_prev: Some(0.8),
                v_prev: 0.2,
            },
        );
        let v = s.update_velocity(0.9, id(0)).unwrap();
        // (0.9 - 0.8) - 0.5 * 0.2 in binary floating point
        assert_eq!(v, (0.9 - 0.8) - 0.5 * 0.2);
        assert!(v.abs() < 1e-16);
        assert_eq!(s.get(id(0)).unwrap().phi_prev, Some(0.9));
        assert_eq!(s.get(id(0)).unwrap().v_prev, v);
    }

    #[test]
    fn constant_phi_is_a_fixed_point() {
        let mut s = VelocityState::new(0.5);
        s.record_phi(id(0), 0.97);
        for _ in 0..10 {
            assert_eq!(s.update_velocity(0.97, id(0)).unwrap(), 0.0);
        }
    }

    #[test]
    fn velocity_before_warmup_is_an_error() {
        let mut s = VelocityState::new(0.5);
        assert!(matches!(s.update_velocity(0.9, id(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_examples() {
        let v: BTreeMap<_, _> = [(id(0), 0.0005), (id(1), 0.01)].into_iter().collect();
        let m = compute_freeze_mask(&v, 0.001, 3);
        assert_eq!(m.frozen().iter().copied().collect::<Vec<_>>(), vec![id(0)]);

        let v: BTreeMap<_, _> = [(id(0), 0.0)].into_iter().collect();
        assert!(compute_freeze_mask(&v, 0.0, 3).contains(id(0)));

        let v: BTreeMap<_, _> = [(id(0), 0.0), (id(1), -0.3)].into_iter().collect();
        assert!(compute_freeze_mask(&v, -1.0, 3).is_empty());
    }

    #[test]
    fn mask_uses_absolute_velocity() {
        let v: BTreeMap<_, _> = [(id(0), -0.0005), (id(1), -0.01)].into_iter().collect();
        let m = compute_freeze_mask(&v, 0.001, 0);
        assert!(m.contains(id(0)) && !m.contains(id(1)));
    }

    #[test]
    fn normalize_unit_and_zero() {
        let mut v = vec![3.0, 4.0];
        normalize(&mut v);
        assert_eq!(v, vec![0.6, 0.8]);
        let mut z = vec![0.0; 3];
        normalize(&mut z);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn probe_vector_lengths() {
        let m = Model::mlp(&[4, 3, 2], 0).unwrap();
        let probe = ProbeSet::new((0..20).map(|i| i as f64 * 0.1 - 1.0).collect(), 5, 0).unwrap();
        let s = capture_probe_outputs(&m, &probe, 0).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.neurons().all(|n| s.get(n).unwrap().len() == 5));

        let m = Model::cnn([1, 8, 8], &[2], &[3], 0).unwrap();
        let probe = ProbeSet::new((0..320).map(|i| (i as f64 * 0.13).sin()).collect(), 5, 0).unwrap();
        let s = capture_probe_outputs(&m, &probe, 0).unwrap();
        assert_eq!(s.get(NeuronId::new(0, 0)).unwrap().len(), 5 * 6 * 6);
        assert_eq!(s.get(NeuronId::new(1, 0)).unwrap().len(), 5);
    }

    #[test]
    fn probe_vectors_are_unit_or_sentinel() {
        let m = Model::mlp(&[6, 8, 3], 11).unwrap();
        let probe = ProbeSet::new((0..60).map(|i| (i as f64 * 0.71).cos()).collect(), 10, 0).unwrap();
        let s = capture_probe_outputs(&m, &probe, 0).unwrap();
        for n in s.neurons() {
            let v = s.get(n).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(is_sentinel(v) || (norm - 1.0).abs() <= 1e-12, "{n}: {norm}");
        }
        assert!(s.flops > 0);
    }

    #[test]
    fn probe_shape_mismatch() {
        let m = Model::mlp(&[4, 2], 0).unwrap();
        let probe = ProbeSet::new(vec![0.0; 15], 5, 0).unwrap();
        assert!(matches!(capture_probe_outputs(&m, &probe, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn tracker_warmup_schedule() {
        let m = Model::mlp(&[4, 3, 2], 0).unwrap();
        let probe = ProbeSet::new((0..20).map(|i| i as f64 * 0.1).collect(), 5, 0).unwrap();
        let mut t = NeqTracker::new(0.5);
        for (k, expect_v) in [(0, false), (1, false), (2, true), (3, true)] {
            let s = capture_probe_outputs(&m, &probe, k).unwrap();
            let v = t.observe(s).unwrap();
            assert_eq!(!v.is_empty(), expect_v, "snapshot {k}");
            // identical parameters every time: phi = 1, v = 0
            assert!(v.values().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn summary_bins() {
        let v: BTreeMap<_, _> = [(id(0), 5e-6), (id(1), -5e-4), (id(2), 0.5)].into_iter().collect();
        let s = VelocitySummary::from_velocities(&v);
        assert_eq!(s.count, 3);
        assert_eq!(s.bins, vec![1, 0, 1, 0, 0, 1]);
        assert_eq!(s.max_abs, 0.5);
    }
}
