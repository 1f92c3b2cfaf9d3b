//! The desk-scale CNN under attack.

use std::time::Instant;

use rayon::prelude::*;

use crate::autograd::{loss_and_param_grads, Graph, Objective, Var};
use crate::data::{batch_indices, Dataset, NUM_CLASSES, SIDE};
use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::optim::Sgd;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{argmax, per_example_cross_entropy, Tensor};

/// Batch size used for inference passes.
pub const EVAL_BATCH: usize = 250;

/// `conv(1>16,k3,s1)-gelu-conv(16>32,k3,s2)-gelu-conv(32>32,k3,s2)-gelu-flatten-dense(>128)-gelu-dense(>10)`,
/// all convolutions padded by 1.
pub fn classifier_topology() -> Vec<Layer> {
    vec![
        Layer::Conv2d { in_channels: 1, out_channels: 16, kernel: 3, stride: 1, padding: 1 },
        Layer::Gelu,
        Layer::Conv2d { in_channels: 16, out_channels: 32, kernel: 3, stride: 2, padding: 1 },
        Layer::Gelu,
        Layer::Conv2d { in_channels: 32, out_channels: 32, kernel: 3, stride: 2, padding: 1 },
        Layer::Gelu,
        Layer::Flatten,
        Layer::Dense { inputs: 32 * 7 * 7, outputs: 128 },
        Layer::Gelu,
        Layer::Dense { inputs: 128, outputs: NUM_CLASSES },
    ]
}

/// Provenance carried into checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub epochs: usize,
    pub seed: u64,
    pub clean_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T = f32> {
    net: Network<T>,
    pub meta: TrainMeta,
}

impl<T: Scalar> Classifier<T> {
    pub fn init(seed: u64) -> Self {
        Self { net: Network::init(classifier_topology(), seed), meta: TrainMeta { seed, ..TrainMeta::default() } }
    }

    pub fn from_network(net: Network<T>, meta: TrainMeta) -> Result<Self> {
        if net.layers() != classifier_topology().as_slice() {
            return Err(Error::TopologyMismatch {
                expected: crate::nn::topology_hash(&classifier_topology()),
                found: net.topology_hash(),
            });
        }
        Ok(Self { net, meta })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier { net: self.net.cast(), meta: self.meta.clone() }
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        self.net.forward(x)
    }

    /// Logits and argmax labels (ties go to the lowest class index).
    pub fn predict(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let logits = self.logits(x)?;
        let labels = (0..logits.batch_size()).map(|i| argmax(logits.example(i))).collect();
        Ok((logits, labels))
    }

    /// Predicted labels for a batch of any size, evaluated in parallel chunks.
    pub fn predict_labels(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let n = x.batch_size();
        let chunks: Vec<_> = (0..n).step_by(EVAL_BATCH).map(|s| s..(s + EVAL_BATCH).min(n)).collect();
        let parts = chunks
            .into_par_iter()
            .map(|r| self.predict(&x.slice_batch(r)?).map(|(_, l)| l))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }

    /// Mean cross-entropy over a batch of any size.
    pub fn mean_loss(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let n = x.batch_size();
        if n == 0 {
            return Ok(0.0);
        }
        let chunks: Vec<_> = (0..n).step_by(EVAL_BATCH).map(|s| s..(s + EVAL_BATCH).min(n)).collect();
        let sums = chunks
            .into_par_iter()
            .map(|r| {
                let logits = self.logits(&x.slice_batch(r.clone())?)?;
                let per = per_example_cross_entropy(&logits, &labels[r])?;
                Ok(per.iter().map(|v| v.to_f64_lossy()).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(sums.iter().sum::<f64>() / n as f64)
    }
}

/// Fraction of `predicted` equal to `labels`.
pub fn fraction_correct(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Clean accuracy of `model` on `data`.
pub fn accuracy<T: Scalar>(model: &Classifier<T>, data: &Dataset) -> Result<f64> {
    let pred = model.predict_labels(&data.images().cast())?;
    Ok(fraction_correct(&pred, data.labels()))
}

impl<T: Scalar> Objective<T> for Classifier<T> {
    type Target = [usize];

    fn record_losses(&self, g: &mut Graph<T>, x: Var, labels: &[usize]) -> Result<Var> {
        let vars = self.net.bind(g);
        let logits = self.net.apply(g, &vars, x, 0..self.net.layers().len())?;
        g.cross_entropy(logits, labels)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 1, SIDE, SIDE] => Ok(()),
            _ => Err(Error::shape(&[0, 1, SIDE, SIDE], shape)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, lr: 0.05, momentum: 0.9, batch_size: 128, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }
}

pub fn train_classifier<T: Scalar>(
    model: Classifier<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Classifier<T>, TrainReport)> {
    train_classifier_observed(model, train, test, cfg, |_| {})
}

/// [`train_classifier`] calling `observe` after every epoch.
pub fn train_classifier_observed<T: Scalar>(
    mut model: Classifier<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochStats),
) -> Result<(Classifier<T>, TrainReport)> {
    let start = Instant::now();
    let mut opt = Sgd::new(T::lit(cfg.lr), T::lit(cfg.momentum));
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let order = batch_indices(train.len(), cfg.batch_size, Some(rng::derive(cfg.seed, &[epoch as u64])))?;
        let mut total = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let (x, y) = train.gather(idx)?;
            let (loss, grad) = loss_and_param_grads(&model, &x.cast::<T>(), &y)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            total += loss;
            opt.step(model.net.params_mut(), &grad)?;
        }
        let test_x = test.images().cast::<T>();
        let stats = EpochStats {
            epoch,
            train_loss: total / order.len().max(1) as f64,
            test_loss: model.mean_loss(&test_x, test.labels())?,
            test_accuracy: fraction_correct(&model.predict_labels(&test_x)?, test.labels()),
        };
        observe(&stats);
        report.epochs.push(stats);
    }
    model.meta =
        TrainMeta { epochs: model.meta.epochs + cfg.epochs, seed: cfg.seed, clean_accuracy: report.final_accuracy() };
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_closed_form() {
        let m = Classifier::<f32>::init(0);
        let conv = |i: usize, o: usize| o * i * 9 + o;
        let dense = |i: usize, o: usize| o * i + o;
        let expected = conv(1, 16) + conv(16, 32) + conv(32, 32) + dense(1568, 128) + dense(128, 10);
        assert_eq!(expected, 216_170);
        assert_eq!(m.network().param_count(), expected);
    }

    #[test]
    fn init_is_seeded_and_forward_is_finite() {
        let a = Classifier::<f32>::init(5);
        assert_eq!(a, Classifier::init(5));
        let (logits, labels) = a.predict(&Tensor::zeros([2, 1, 28, 28])).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.is_finite());
        assert_eq!(labels.len(), 2);
        assert!(a.predict(&Tensor::zeros([2, 1, 27, 28])).is_err());
    }

    #[test]
    fn fraction_correct_extremes() {
        assert_eq!(fraction_correct(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(fraction_correct(&[0, 0, 0], &[1, 2, 3]), 0.0);
    }
}
