//! Stage-1 optimization and the frozen backbone handle used afterwards.

mod optim;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{Adam, AdamConfig};

use crate::backbone::{forward, sample_gradients, Architecture, BackboneParams, ForwardTrace, Stage1Terms};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::splat_io::{Dataset, LabeledSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOneConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl StageOneConfig {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        Self {
            arch,
            epochs: 60,
            batch_size: 16,
            patience: 15,
            seed,
            optimizer: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub cls_loss: f64,
    /// Unweighted density term, logged even when its weight is zero.
    pub density_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were retained.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    /// Not serialized, so reruns write identical reports.
    #[serde(skip)]
    pub wall_seconds: f64,
    pub seed: u64,
    pub n_parameters: usize,
    pub digest: String,
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(params: &BackboneParams<f32>, samples: &[&LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let predictions = predict(params, samples)?;
    let correct = predictions.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

pub fn predict(params: &BackboneParams<f32>, samples: &[&LabeledSample]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| forward(s, params).map(|t| t.predicted()))
        .collect()
}

fn batch_step(
    params: &BackboneParams<f32>,
    batch: &[&LabeledSample],
) -> Result<(Stage1Terms, usize, crate::backbone::Net<Tensor<f32>>)> {
    let parts = batch
        .par_iter()
        .map(|s| sample_gradients(params, s).map(|(t, pred, g)| (t, pred == s.label, g)))
        .collect::<Result<Vec<_>>>()?;
    // fixed summation order keeps the update independent of thread count
    let mut iter = parts.into_iter();
    let (first_terms, first_ok, mut grad) = iter.next().expect("non-empty batch");
    let mut terms = first_terms;
    let mut correct = first_ok as usize;
    for (t, ok, g) in iter {
        terms.total += t.total;
        terms.cls += t.cls;
        terms.density += t.density;
        correct += ok as usize;
        grad.accumulate(&g);
    }
    grad.scale(1.0 / batch.len() as f32);
    Ok((terms, correct, grad))
}

/// Minimizes the Stage-1 objective; returns the best-validation parameters.
pub fn train_stage1(dataset: &Dataset, config: &StageOneConfig) -> Result<(BackboneParams<f32>, TrainReport)> {
    train_stage1_with(dataset, config, |_| {})
}

/// [`train_stage1`] with a per-epoch callback (progress logging).
pub fn train_stage1_with(
    dataset: &Dataset,
    config: &StageOneConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(BackboneParams<f32>, TrainReport)> {
    config.validate()?;
    let start = Instant::now();
    let regridded;
    let dataset = if dataset.grid_size != config.arch.hyper.grid_size {
        regridded = dataset.regrid(config.arch.hyper.grid_size)?;
        &regridded
    } else {
        dataset
    };
    if dataset.n_classes() != config.arch.hyper.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, architecture expects {}",
            dataset.n_classes(),
            config.arch.hyper.n_classes
        )));
    }
    let train = dataset.train();
    let val = dataset.val();
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }

    let mut params = BackboneParams::<f32>::init(config.arch.clone(), dataset.class_names.clone(), config.seed)?;
    let mut adam = Adam::new(config.optimizer.clone(), params.net.named().iter().map(|(_, t)| t.shape()));
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut records = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = Stage1Terms::default();
        let mut correct = 0;
        let mut lr = config.optimizer.lr;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| train[i]).collect();
            let (terms, ok, grad) = batch_step(&params, &batch)?;
            if !terms.total.is_finite() || !grad.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss or gradient (loss {})", terms.total),
                });
            }
            sums.total += terms.total;
            sums.cls += terms.cls;
            sums.density += terms.density;
            correct += ok;
            lr = config.optimizer.lr_at(adam.steps_taken(), total_steps);
            let grads: Vec<&Tensor<f32>> = grad.named().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params.net.slots_mut(), &grads, lr);
        }
        let n = train.len() as f64;
        let val_accuracy = if val.is_empty() { correct as f64 / n } else { evaluate(&params, &val)? };
        let record = EpochRecord {
            epoch,
            train_loss: sums.total / n,
            cls_loss: sums.cls / n,
            density_loss: sums.density / n,
            train_accuracy: correct as f64 / n,
            val_accuracy,
            lr,
        };
        on_epoch(&record);
        records.push(record);
        if val_accuracy > best_val {
            best_val = val_accuracy;
            best_epoch = epoch;
            best = params.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    if records.is_empty() {
        best_val = if val.is_empty() { 0.0 } else { evaluate(&best, &val)? };
    }

    let test = dataset.test();
    let test_accuracy = if test.is_empty() { f64::NAN } else { evaluate(&best, &test)? };
    let report = TrainReport {
        epochs: records,
        best_epoch,
        best_val_accuracy: best_val,
        test_accuracy,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: config.seed,
        n_parameters: best.net.n_parameters(),
        digest: best.digest(),
    };
    Ok((best, report))
}

/// Read-only view of trained parameters, tagged with their digest.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    params: Arc<BackboneParams<f32>>,
    digest: String,
}

pub fn freeze(params: BackboneParams<f32>) -> FrozenBackbone {
    let digest = params.digest();
    FrozenBackbone {
        params: Arc::new(params),
        digest,
    }
}

impl FrozenBackbone {
    pub fn params(&self) -> &BackboneParams<f32> {
        &self.params
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn forward(&self, sample: &LabeledSample) -> Result<ForwardTrace<f32>> {
        forward(sample, &self.params)
    }

    /// Recomputes the digest and fails if the parameters changed.
    pub fn verify(&self) -> Result<()> {
        let now = self.params.digest();
        if now != self.digest {
            return Err(Error::FrozenViolation(format!(
                "backbone digest changed from {} to {now}",
                self.digest
            )));
        }
        Ok(())
    }

    /// Optimizer entry point; always refuses.
    pub fn apply_update(&self, _grads: &crate::backbone::Net<Tensor<f32>>) -> Result<()> {
        Err(Error::FrozenViolation(
            "backbone parameters are frozen; no optimizer step may touch them".into(),
        ))
    }

    pub fn into_inner(self) -> BackboneParams<f32> {
        Arc::try_unwrap(self.params).unwrap_or_else(|a| (*a).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Hyper, Widths};
    use crate::splat_io::{ShapeClass, SyntheticConfig};

    fn tiny_dataset() -> Dataset {
        let cfg = SyntheticConfig {
            grid_size: 2,
            ..Default::default()
        };
        Dataset::synthetic(&cfg, &[ShapeClass::Sphere, ShapeClass::Box], 6, 48, [0.5, 0.25, 0.25], 1).unwrap()
    }

    fn config(epochs: usize) -> StageOneConfig {
        let arch = Architecture {
            hyper: Hyper::new(2, 8, 2),
            widths: Widths::tiny(),
        };
        StageOneConfig {
            epochs,
            batch_size: 4,
            ..StageOneConfig::new(arch, 3)
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = tiny_dataset();
        let (a, ra) = train_stage1(&ds, &config(3)).unwrap();
        let (b, rb) = train_stage1(&ds, &config(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
    }

    #[test]
    fn retained_checkpoint_is_best_validation() {
        let ds = tiny_dataset();
        let (p, r) = train_stage1(&ds, &config(5)).unwrap();
        let last = r.epochs.last().unwrap();
        assert!(r.best_val_accuracy >= last.val_accuracy);
        assert_eq!(evaluate(&p, &ds.val()).unwrap(), r.best_val_accuracy);
        assert!(r.epochs.iter().all(|e| e.density_loss > 0.0));
    }

    #[test]
    fn zero_lambda_still_reports_density() {
        let ds = tiny_dataset();
        let mut c = config(1);
        c.arch.hyper.lambda = 0.0;
        let (_, r) = train_stage1(&ds, &c).unwrap();
        let e = &r.epochs[0];
        assert!(e.density_loss > 0.0);
        assert!((e.train_loss - e.cls_loss).abs() < 1e-12);
    }

    #[test]
    fn divergence_reports_epoch() {
        let ds = tiny_dataset();
        let mut c = config(2);
        c.optimizer.lr = 1e30;
        match train_stage1(&ds, &c) {
            Err(Error::Training { .. }) => {}
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn constant_classifier_is_at_chance() {
        let ds = tiny_dataset();
        let mut p = BackboneParams::<f32>::init(config(1).arch, ds.class_names.clone(), 0).unwrap();
        p.net.classifier = Tensor::zeros(2, 8);
        // every logit ties, so everything is predicted as class 0
        let all: Vec<_> = ds.samples.iter().collect();
        assert_eq!(evaluate(&p, &all).unwrap(), 0.5);
        assert!(evaluate(&p, &[]).is_err());
    }

    #[test]
    fn frozen_handle_refuses_updates() {
        let ds = tiny_dataset();
        let p = BackboneParams::<f32>::init(config(1).arch, ds.class_names.clone(), 0).unwrap();
        let before = forward(&ds.samples[0], &p).unwrap();
        let f = freeze(p.clone());
        assert_eq!(f.forward(&ds.samples[0]).unwrap(), before);
        assert!(matches!(f.apply_update(&p.net.zeros_like()), Err(Error::FrozenViolation(_))));
        assert!(f.verify().is_ok());
    }
}
