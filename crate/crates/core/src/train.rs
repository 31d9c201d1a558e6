//! The epoch loop: minibatch steps under the current freeze mask, a probe
//! pass after every epoch, velocities and a new mask once warm-up is over.
//!
//! Probe snapshots are taken before the first epoch and after each epoch.
//! After epoch 0 only the first similarity exists; after epoch 1 the first
//! velocity does, so the earliest epoch that can run with frozen neurons
//! is epoch 2.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, TrainConfig};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::flops::{FlopsLedger, FlopsReport};
use crate::model::Model;
use crate::neq::{capture_probe_outputs, compute_freeze_mask, FreezeMask, NeqTracker, ProbeSet, VelocitySummary};
use crate::optimizer::{train_iteration, Batch, HyperState, IterationOutcome};

const SHUFFLE_STREAM: u64 = 0x05af_ef1e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the minibatch losses.
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// α and ε at the end of the epoch.
    pub alpha: f64,
    pub epsilon: f64,
    /// Neurons frozen during this epoch's iterations.
    pub frozen_count: usize,
    /// Training FLOPs spent in this epoch.
    pub epoch_flops: u64,
    /// Velocities computed after this epoch (empty during warm-up).
    pub velocity: VelocitySummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub alpha_before: f64,
    pub epsilon_before: f64,
    pub dot: Option<f64>,
    pub alpha: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub flops: FlopsReport,
    pub epochs: Vec<EpochRecord>,
    /// Per-iteration hyperparameter trace; written to its own CSV.
    #[serde(skip)]
    pub iterations: Vec<IterationRecord>,
}

impl RunReport {
    pub fn flops_saved_percent(&self) -> f64 {
        self.flops.flops_saved_percent
    }

    pub fn test_acc_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_acc).collect()
    }

    pub fn epsilon_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.epsilon).collect()
    }
}

/// Hooks into a running training loop, for tests and tooling.
pub trait Observer {
    fn on_epoch_start(&mut self, _epoch: usize, _mask: &FreezeMask, _model: &Model) {}
    fn on_iteration(&mut self, _record: &IterationRecord, _outcome: &IterationOutcome, _model: &Model) {}
    fn on_epoch_end(&mut self, _record: &EpochRecord, _model: &Model) {}
}

impl Observer for () {}

pub fn run_training(config: &TrainConfig) -> Result<RunReport> {
    run_training_observed(config, &mut ())
}

pub fn run_training_observed(config: &TrainConfig, observer: &mut dyn Observer) -> Result<RunReport> {
    config.validate()?;
    let data = load_dataset(&config.dataset, config.seed)?;
    let model = config.model.build(config.seed)?;
    run_on(config, &data, model, observer)
}

fn check_fit(model: &Model, data: &Dataset) -> Result<()> {
    if model.input_len() != data.n_features {
        return Err(Error::Model(format!(
            "model takes {} input features, dataset has {}",
            model.input_len(),
            data.n_features
        )));
    }
    if model.output_len() != data.n_classes {
        return Err(Error::Model(format!(
            "model has {} outputs, dataset has {} classes",
            model.output_len(),
            data.n_classes
        )));
    }
    Ok(())
}

/// Trains `model` on an already loaded dataset.
pub fn run_on(config: &TrainConfig, data: &Dataset, mut model: Model, observer: &mut dyn Observer) -> Result<RunReport> {
    config.validate()?;
    check_fit(&model, data)?;
    let d = data.n_features;
    let freezing = config.mode.freezes();

    let probe_n = config.probe_size.min(data.val.len());
    if probe_n < config.probe_size {
        warn!("validation split has {probe_n} samples, probe_size {} clamped", config.probe_size);
    }
    let probe = ProbeSet::new(data.val.head_inputs(probe_n, d).to_vec(), probe_n, config.seed)?;

    let mut hyper = HyperState::new(config.alpha0, config.epsilon0, model.param_count())
        .with_hyper_rates(config.eta_alpha, config.eta_epsilon)
        .with_sgd(config.momentum, config.weight_decay)
        .with_epsilon_sign(config.epsilon_update_sign);
    let mut ledger = FlopsLedger::new(config.count_probe_overhead);
    let mut tracker = NeqTracker::new(config.mu_eq);
    let mut mask = FreezeMask::empty(0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut iterations = Vec::new();
    let mut batch_x = Vec::with_capacity(config.batch_size * d);
    let mut batch_y = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        ledger.begin_epoch(epoch);
        if freezing && epoch == 0 {
            let snap = capture_probe_outputs(&model, &probe, 0)?;
            ledger.record_probe(snap.flops);
            tracker.observe(snap)?;
        }
        if config.mode == Mode::Baseline {
            hyper.alpha = config.scheduled_alpha(epoch);
        }
        mask.epoch = epoch;
        observer.on_epoch_start(epoch, &mask, &model);

        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (it, chunk) in order.chunks(config.batch_size).enumerate() {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&data.train.inputs[i * d..(i + 1) * d]);
                batch_y.push(data.train.labels[i]);
            }
            let batch = Batch {
                inputs: &batch_x,
                labels: &batch_y,
            };
            let out = match train_iteration(&mut model, batch, &mask, &mut hyper, &mut ledger) {
                Ok(out) => out,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        iteration: it,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: it,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss * out.batch_size as f64;
            let record = IterationRecord {
                epoch,
                iteration: it,
                loss: out.loss,
                alpha_before: out.alpha_before,
                epsilon_before: out.epsilon_before,
                dot: out.dot,
                alpha: out.alpha,
                epsilon: out.epsilon,
            };
            observer.on_iteration(&record, &out, &model);
            iterations.push(record);
        }

        let frozen_count = mask.len();
        let mut velocity = VelocitySummary::default();
        if freezing {
            let snap = capture_probe_outputs(&model, &probe, epoch + 1)?;
            ledger.record_probe(snap.flops);
            let velocities = tracker.observe(snap)?;
            velocity = VelocitySummary::from_velocities(&velocities);
            mask = compute_freeze_mask(&velocities, hyper.epsilon, epoch + 1);
        }

        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.train.len() as f64,
            train_acc: model.accuracy(&data.train.inputs, &data.train.labels)?,
            test_acc: model.accuracy(&data.test.inputs, &data.test.labels)?,
            alpha: hyper.alpha,
            epsilon: hyper.epsilon,
            frozen_count,
            epoch_flops: ledger.epochs()[epoch].spent(),
            velocity,
        };
        info!(
            "epoch {epoch}: loss {:.4} train {:.3} test {:.3} alpha {:.4e} eps {:.4e} frozen {}",
            record.loss, record.train_acc, record.test_acc, record.alpha, record.epsilon, record.frozen_count
        );
        observer.on_epoch_end(&record, &model);
        epochs.push(record);
    }

    let last = epochs.last().expect("at least one epoch");
    Ok(RunReport {
        config: config.clone(),
        final_train_acc: last.train_acc,
        final_test_acc: last.test_acc,
        flops: ledger.report()?,
        epochs,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::model::ModelSpec;

    fn small(mode: Mode) -> TrainConfig {
        TrainConfig {
            model: ModelSpec::Mlp(vec![8, 6, 3]),
            dataset: DatasetSpec::SyntheticBlobs {
                classes: 3,
                dims: 8,
                samples: 200,
            },
            epochs: 5,
            batch_size: 16,
            probe_size: 10,
            ..TrainConfig::for_mode(mode)
        }
    }

    #[test]
    fn series_lengths_match_epochs() {
        let r = run_training(&small(Mode::Scotti)).unwrap();
        assert_eq!(r.epochs.len(), 5);
        assert_eq!(r.iterations.len(), 5 * 10);
        assert_eq!(r.flops.per_epoch.len(), 5);
    }

    #[test]
    fn warm_up_has_no_frozen_neurons() {
        let c = TrainConfig {
            epsilon0: 1e9,
            ..small(Mode::FixedEps)
        };
        let r = run_training(&c).unwrap();
        let frozen: Vec<usize> = r.epochs.iter().map(|e| e.frozen_count).collect();
        assert_eq!(frozen, vec![0, 0, 9, 9, 9]);
        assert!(r.flops_saved_percent() > 0.0);
    }

    #[test]
    fn mismatched_model_is_config_error() {
        let c = TrainConfig {
            model: ModelSpec::Mlp(vec![5, 3]),
            ..small(Mode::Baseline)
        };
        assert!(run_training(&c).unwrap_err().is_config());
    }

    #[test]
    fn divergence_reports_position() {
        let c = TrainConfig {
            alpha0: 1e200,
            momentum: 0.0,
            ..small(Mode::Baseline)
        };
        match run_training(&c) {
            Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("{other:?}"),
        }
    }
}
