//! Training FLOPs actually spent versus a run in which nothing is frozen.
//!
//! Convention: one multiply-accumulate is 2 FLOPs; bias adds and ReLU count
//! one FLOP per element. A frozen neuron's share of its layer's
//! weight-gradient work is omitted. The input gradient of a layer is only
//! booked when some unfrozen neuron sits below it, since otherwise nothing
//! consumes it; in particular the first layer never propagates into the
//! data. This matches what [`crate::autodiff::Graph::backward`] executes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, LayerSpec, Model};
use crate::neq::FreezeMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub forward: u64,
    pub backward_weight: u64,
    pub backward_input: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.forward + self.backward_weight + self.backward_input
    }
}

impl std::ops::AddAssign for LayerFlops {
    fn add_assign(&mut self, o: Self) {
        self.forward += o.forward;
        self.backward_weight += o.backward_weight;
        self.backward_input += o.backward_input;
    }
}

/// Weight-gradient FLOPs owned by a single neuron of `layer` per sample.
fn per_neuron_weight_flops(layer: &Layer) -> u64 {
    match layer.spec {
        LayerSpec::Dense { inputs, .. } => (2 * inputs + 1) as u64,
        LayerSpec::Conv { in_channels, .. } => {
            let p = layer.positions() as u64;
            2 * (in_channels as u64) * 9 * p + p
        }
        _ => 0,
    }
}

/// Full-cost FLOPs of one layer over a batch.
pub fn layer_flops(layer: &Layer, batch: usize) -> LayerFlops {
    let b = batch as u64;
    match layer.spec {
        LayerSpec::Dense { inputs, outputs } => {
            let mac = 2 * (inputs * outputs) as u64 * b;
            LayerFlops {
                forward: mac + outputs as u64 * b,
                backward_weight: mac + outputs as u64 * b,
                backward_input: mac,
            }
        }
        LayerSpec::Conv {
            in_channels,
            out_channels,
        } => {
            let p = layer.positions() as u64;
            let mac = 2 * (in_channels * out_channels * 9) as u64 * p * b;
            let bias = out_channels as u64 * p * b;
            LayerFlops {
                forward: mac + bias,
                backward_weight: mac + bias,
                backward_input: mac,
            }
        }
        LayerSpec::Relu => {
            let n = layer.out_shape.iter().product::<usize>() as u64 * b;
            LayerFlops {
                forward: n,
                backward_weight: 0,
                backward_input: n,
            }
        }
        LayerSpec::Flatten => LayerFlops::default(),
    }
}

/// FLOPs booked for one training iteration under `mask`.
pub fn iteration_flops(model: &Model, mask: &FreezeMask, batch: usize) -> LayerFlops {
    let layers = model.layers();
    let mut total = LayerFlops::default();
    // true once some trainable layer at a lower position has an unfrozen neuron
    let mut live_below = false;
    let mut trainable_idx = 0;
    for layer in layers {
        let full = layer_flops(layer, batch);
        total.forward += full.forward;
        if live_below {
            total.backward_input += full.backward_input;
        }
        if layer.spec.is_trainable() {
            let width = layer.width();
            let frozen = mask.frozen().iter().filter(|id| id.layer == trainable_idx).count();
            let unfrozen = (width - frozen.min(width)) as u64;
            total.backward_weight += unfrozen * per_neuron_weight_flops(layer) * batch as u64;
            live_below |= unfrozen > 0;
            trainable_idx += 1;
        }
    }
    total
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochFlops {
    pub epoch: usize,
    pub iterations: u64,
    pub forward: u64,
    pub backward_weight: u64,
    pub backward_input: u64,
    pub probe_overhead: u64,
    pub hyper: u64,
    pub baseline_forward: u64,
    pub baseline_backward_weight: u64,
    pub baseline_backward_input: u64,
}

impl EpochFlops {
    pub fn spent(&self) -> u64 {
        self.forward + self.backward_weight + self.backward_input
    }

    pub fn baseline(&self) -> u64 {
        self.baseline_forward + self.baseline_backward_weight + self.baseline_backward_input
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub baseline_total: u64,
    pub spent_total: u64,
    pub probe_overhead: u64,
    pub hyper_flops: u64,
    pub count_probe_overhead: bool,
    pub flops_saved_percent: f64,
    pub per_epoch: Vec<EpochFlops>,
}

#[derive(Clone, Debug, Default)]
pub struct FlopsLedger {
    epochs: Vec<EpochFlops>,
    count_probe_overhead: bool,
}

impl FlopsLedger {
    pub fn new(count_probe_overhead: bool) -> Self {
        Self {
            epochs: Vec::new(),
            count_probe_overhead,
        }
    }

    pub fn begin_epoch(&mut self, epoch: usize) {
        self.epochs.push(EpochFlops {
            epoch,
            ..EpochFlops::default()
        });
    }

    /// Appends a fully formed epoch record (used to build ledgers by hand).
    pub fn push_epoch(&mut self, record: EpochFlops) {
        self.epochs.push(record);
    }

    fn current(&mut self) -> &mut EpochFlops {
        if self.epochs.is_empty() {
            self.begin_epoch(0);
        }
        self.epochs.last_mut().expect("at least one epoch")
    }

    /// Books one iteration and returns what it spent.
    pub fn record_iteration(&mut self, mask: &FreezeMask, model: &Model, batch_size: usize) -> LayerFlops {
        let spent = iteration_flops(model, mask, batch_size);
        let base = iteration_flops(model, &FreezeMask::empty(mask.epoch), batch_size);
        let e = self.current();
        e.iterations += 1;
        e.forward += spent.forward;
        e.backward_weight += spent.backward_weight;
        e.backward_input += spent.backward_input;
        e.baseline_forward += base.forward;
        e.baseline_backward_weight += base.backward_weight;
        e.baseline_backward_input += base.backward_input;
        spent
    }

    pub fn record_probe(&mut self, flops: u64) {
        self.current().probe_overhead += flops;
    }

    pub fn record_hyper(&mut self, flops: u64) {
        self.current().hyper += flops;
    }

    pub fn epochs(&self) -> &[EpochFlops] {
        &self.epochs
    }

    pub fn baseline_total(&self) -> u64 {
        self.epochs.iter().map(EpochFlops::baseline).sum()
    }

    pub fn probe_overhead(&self) -> u64 {
        self.epochs.iter().map(|e| e.probe_overhead).sum()
    }

    pub fn hyper_flops(&self) -> u64 {
        self.epochs.iter().map(|e| e.hyper).sum()
    }

    /// Training FLOPs spent, plus probe overhead when configured to count it.
    pub fn spent_total(&self) -> u64 {
        let train: u64 = self.epochs.iter().map(EpochFlops::spent).sum();
        if self.count_probe_overhead {
            train + self.probe_overhead()
        } else {
            train
        }
    }

    /// `100 · (baseline − spent) / baseline`. Can drop below zero only when
    /// probe overhead is counted and outweighs the savings.
    pub fn flops_saved_percent(&self) -> Result<f64> {
        let baseline = self.baseline_total();
        if baseline == 0 {
            return Err(Error::Contract("no baseline FLOPs recorded".into()));
        }
        let saved = baseline as i128 - self.spent_total() as i128;
        Ok(100.0 * saved as f64 / baseline as f64)
    }

    pub fn report(&self) -> Result<FlopsReport> {
        Ok(FlopsReport {
            baseline_total: self.baseline_total(),
            spent_total: self.spent_total(),
            probe_overhead: self.probe_overhead(),
            hyper_flops: self.hyper_flops(),
            count_probe_overhead: self.count_probe_overhead,
            flops_saved_percent: self.flops_saved_percent()?,
            per_epoch: self.epochs.clone(),
        })
    }
}
