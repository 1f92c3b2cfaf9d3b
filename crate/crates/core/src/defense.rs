//! Convolutional autoencoder that purifies inputs before classification.
//!
//! Encoder: two stride-2 convolutions (28 -> 14 -> 7). Decoder: two stride-2
//! transposed convolutions back to 28x28 and a sigmoid. There are no
//! encoder-to-decoder skip connections, so everything the decoder sees has
//! passed through the `C_b x 7 x 7` bottleneck. During training, Gaussian
//! noise is added to the latent code.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::attacks::{attack_batched, AttackConfig};
use crate::autograd::{loss_and_param_grads, Graph, Objective, Var};
use crate::classifier::{Classifier, EVAL_BATCH};
use crate::data::{batch_indices, Dataset, SIDE};
use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::optim::Sgd;
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use crate::tensor::{mse, Tensor};

pub const DEFAULT_BOTTLENECK: usize = 32;
/// Layers `0..ENCODER_LAYERS` form the encoder.
pub const ENCODER_LAYERS: usize = 4;
pub const LATENT_SIDE: usize = SIDE / 4;

pub fn autoencoder_topology(bottleneck: usize) -> Vec<Layer> {
    let down = |i, o| Layer::Conv2d { in_channels: i, out_channels: o, kernel: 4, stride: 2, padding: 1 };
    let up = |i, o| Layer::ConvTranspose2d {
        in_channels: i,
        out_channels: o,
        kernel: 4,
        stride: 2,
        padding: 1,
        output_padding: 0,
    };
    vec![
        down(1, 16),
        Layer::Gelu,
        down(16, bottleneck),
        Layer::Gelu,
        up(bottleneck, 16),
        Layer::Gelu,
        up(16, 1),
        Layer::Sigmoid,
    ]
}

/// Removes adversarial perturbations from a batch of images.
pub trait Purifier<T: Scalar>: Sync {
    fn purify(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Passes images through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T: Scalar> Purifier<T> for Identity {
    fn purify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T = f32> {
    net: Network<T>,
    bottleneck: usize,
    /// Training provenance as `key=value` pairs, stored in checkpoints.
    pub meta: Vec<(String, String)>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn init(seed: u64, bottleneck: usize) -> Result<Self> {
        if bottleneck == 0 {
            return Err(Error::invalid("bottleneck_channels must be at least 1"));
        }
        Ok(Self { net: Network::init(autoencoder_topology(bottleneck), seed), bottleneck, meta: Vec::new() })
    }

    pub fn from_network(net: Network<T>) -> Result<Self> {
        let bottleneck = match net.layers().get(2) {
            Some(Layer::Conv2d { out_channels, .. }) => *out_channels,
            _ => 0,
        };
        if bottleneck == 0 || net.layers() != autoencoder_topology(bottleneck).as_slice() {
            return Err(Error::TopologyMismatch {
                expected: crate::nn::topology_hash(&autoencoder_topology(DEFAULT_BOTTLENECK)),
                found: net.topology_hash(),
            });
        }
        Ok(Self { net, bottleneck, meta: Vec::new() })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn latent_shape(&self, n: usize) -> [usize; 4] {
        [n, self.bottleneck, LATENT_SIDE, LATENT_SIDE]
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 1, SIDE, SIDE] => Ok(()),
            _ => Err(Error::shape(&[0, 1, SIDE, SIDE], shape)),
        }
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(x.shape())?;
        self.net.forward_range(x, 0..ENCODER_LAYERS)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let n = z.shape().first().copied().unwrap_or(0);
        z.expect_shape(&self.latent_shape(n))?;
        self.net.forward_range(z, ENCODER_LAYERS..self.net.layers().len())
    }

    /// `decode(encode(x))` without latent noise, in parallel chunks.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(x.shape())?;
        let n = x.batch_size();
        let ranges: Vec<_> = (0..n).step_by(EVAL_BATCH).map(|s| s..(s + EVAL_BATCH).min(n)).collect();
        let parts = ranges.into_par_iter().map(|r| self.net.forward(&x.slice_batch(r)?)).collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Tensor::new(x.shape().to_vec(), Vec::new());
        }
        Tensor::concat(&parts)
    }

    pub fn cast<U: Scalar>(&self) -> Autoencoder<U> {
        Autoencoder { net: self.net.cast(), bottleneck: self.bottleneck, meta: self.meta.clone() }
    }
}

impl<T: Scalar> Purifier<T> for Autoencoder<T> {
    fn purify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.reconstruct(x)
    }
}

/// Per-example reconstruction MSE against a clean target, with optional
/// additive latent noise.
pub struct Reconstruction<'a, T: Scalar> {
    pub ae: &'a Autoencoder<T>,
    pub latent_noise: Option<Tensor<T>>,
}

impl<T: Scalar> Objective<T> for Reconstruction<'_, T> {
    type Target = Tensor<T>;

    fn record_losses(&self, g: &mut Graph<T>, x: Var, clean: &Tensor<T>) -> Result<Var> {
        let net = &self.ae.net;
        let vars = net.bind(g);
        let mut z = net.apply(g, &vars, x, 0..ENCODER_LAYERS)?;
        if let Some(noise) = &self.latent_noise {
            let nv = g.constant(noise.clone());
            z = g.add(z, nv)?;
        }
        let out = net.apply(g, &vars, z, ENCODER_LAYERS..net.layers().len())?;
        g.squared_error(out, clean)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        self.ae.check_images(shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseTrainConfig {
    /// Attack used to make training inputs; `None` trains a plain
    /// (denoising-free) autoencoder.
    pub recipe: Option<AttackConfig>,
    pub sigma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability that a batch is fed clean instead of attacked.
    pub clean_mix: f64,
}

impl Default for DefenseTrainConfig {
    fn default() -> Self {
        Self {
            recipe: Some(AttackConfig::fgsm(0.6)),
            sigma: 0.1,
            epochs: 10,
            lr: 1.0,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
            clean_mix: 0.25,
        }
    }
}

impl DefenseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.clean_mix) {
            return Err(Error::invalid("clean_mix must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if let Some(r) = &self.recipe {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseEpoch {
    pub epoch: usize,
    /// Mean training MSE over the epoch's batches.
    pub train_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DefenseReport {
    pub epochs: Vec<DefenseEpoch>,
    /// Seconds spent synthesising adversarial training inputs.
    pub attack_seconds: f64,
    pub seconds: f64,
}

pub fn train_defense(
    ae: Autoencoder<f32>,
    classifier: &Classifier<f32>,
    clean: &Dataset,
    cfg: &DefenseTrainConfig,
) -> Result<(Autoencoder<f32>, DefenseReport)> {
    train_defense_observed(ae, classifier, clean, cfg, |_| {})
}

/// [`train_defense`] calling `observe` after every epoch.
///
/// The classifier is fixed, so each training image is attacked once up front
/// and its adversarial version reused in every epoch.
pub fn train_defense_observed(
    mut ae: Autoencoder<f32>,
    classifier: &Classifier<f32>,
    clean: &Dataset,
    cfg: &DefenseTrainConfig,
    mut observe: impl FnMut(&DefenseEpoch),
) -> Result<(Autoencoder<f32>, DefenseReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = DefenseReport::default();
    let adversarial = match &cfg.recipe {
        Some(recipe) => {
            let recipe = recipe.clone().with_seed(rng::derive(cfg.seed, &[tag::ATTACK_BATCH]));
            Some(attack_batched(classifier, clean.images(), clean.labels(), &recipe, EVAL_BATCH)?.x_adv)
        }
        None => None,
    };
    report.attack_seconds = start.elapsed().as_secs_f64();

    let noise = Normal::new(0.0f32, cfg.sigma as f32).map_err(|e| Error::invalid(e.to_string()))?;
    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let order = batch_indices(clean.len(), cfg.batch_size, Some(rng::derive(cfg.seed, &[e])))?;
        let mut total = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let target = clean.images().select(idx)?;
            let feed_clean = rng::stream(cfg.seed, &[tag::CLEAN_MIX, e, b as u64]).gen::<f64>() < cfg.clean_mix;
            let input = match &adversarial {
                Some(adv) if !feed_clean => adv.select(idx)?,
                _ => target.clone(),
            };
            let latent_noise = (cfg.sigma > 0.0).then(|| {
                let mut r = rng::stream(cfg.seed, &[tag::LATENT_NOISE, e, b as u64]);
                Tensor::from_fn(ae.latent_shape(idx.len()).to_vec(), |_| noise.sample(&mut r))
            });
            let objective = Reconstruction { ae: &ae, latent_noise };
            let (loss, grad) = loss_and_param_grads(&objective, &input, &target)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: loss as f64 });
            }
            total += loss as f64;
            opt.step(ae.net.params_mut(), &grad)?;
        }
        let stats = DefenseEpoch { epoch, train_mse: total / order.len().max(1) as f64 };
        observe(&stats);
        report.epochs.push(stats);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((ae, report))
}

/// MSE between `purifier(x)` and `x`.
pub fn reconstruction_mse<P: Purifier<f32> + ?Sized>(purifier: &P, x: &Tensor<f32>) -> Result<f64> {
    Ok(mse(&purifier.purify(x)?, x)? as f64)
}
