//! Untargeted L-infinity attacks: FGSM, BIM and PGD with random restarts.
//!
//! Every attack ascends the per-example loss of the true label. Gradients
//! are taken of the summed per-example losses, so an image's perturbation
//! does not depend on which batch it was attacked in (PGD start noise
//! aside, which is drawn per batch from the configured seed).

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::autograd::{per_example_loss, per_example_loss_and_grad, Objective};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::Parse(format!("unknown attack kind {other:?} (expected fgsm, bim or pgd)"))),
        }
    }
}

/// Where PGD restarts begin. `Zero` starts at the clean image and exists so
/// PGD can be checked against BIM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StartNoise {
    #[default]
    Uniform,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub start_noise: StartNoise,
}

impl AttackConfig {
    pub const DEFAULT_STEPS: usize = 40;

    /// `kind` at budget `epsilon` with `alpha = epsilon / 10`, 40 steps, one
    /// restart, seed 0 and the `[0, 1]` pixel box.
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        Self {
            kind,
            epsilon,
            alpha: epsilon / 10.0,
            steps: Self::DEFAULT_STEPS,
            restarts: 1,
            seed: 0,
            clip_lo: 0.0,
            clip_hi: 1.0,
            start_noise: StartNoise::Uniform,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackKind::Fgsm, epsilon)
    }

    pub fn bim(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self { alpha, steps, ..Self::new(AttackKind::Bim, epsilon) }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, restarts: usize, seed: u64) -> Self {
        Self { alpha, steps, restarts, seed, ..Self::new(AttackKind::Pgd, epsilon) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Step size and step count only matter for the iterative kinds, and
    /// only when there is a budget to spend.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be finite and non-negative");
        }
        if !(self.clip_lo.is_finite() && self.clip_hi.is_finite() && self.clip_lo <= self.clip_hi) {
            return bad("clip bounds must be finite with clip_lo <= clip_hi");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if self.kind != AttackKind::Fgsm && self.epsilon > 0.0 {
            if !(self.alpha.is_finite() && self.alpha > 0.0) {
                return bad("alpha must be positive for iterative attacks");
            }
            if self.steps == 0 {
                return bad("steps must be at least 1 for iterative attacks");
            }
        }
        Ok(())
    }
}

/// Adversarial images with per-image perturbation norms and the loss the
/// attack reached.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch<T> {
    pub x_adv: Tensor<T>,
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
    pub loss: Vec<T>,
}

impl<T: Scalar> AdversarialBatch<T> {
    fn build<M: Objective<T> + ?Sized>(model: &M, x: &Tensor<T>, x_adv: Tensor<T>, target: &M::Target) -> Result<Self> {
        let loss = per_example_loss(model, &x_adv, target)?;
        Self::with_loss(x, x_adv, loss)
    }

    fn with_loss(x: &Tensor<T>, x_adv: Tensor<T>, loss: Vec<T>) -> Result<Self> {
        let (linf, l2) = perturbation_stats(x, &x_adv)?;
        Ok(Self { x_adv, linf, l2, loss })
    }

    /// `predicted != labels` per image.
    pub fn fooled(predicted: &[usize], labels: &[usize]) -> Vec<bool> {
        predicted.iter().zip(labels).map(|(p, l)| p != l).collect()
    }

    pub fn concat(parts: Vec<Self>) -> Result<Self> {
        let x_adv = Tensor::concat(&parts.iter().map(|p| p.x_adv.clone()).collect::<Vec<_>>())?;
        let mut out = Self { x_adv, linf: Vec::new(), l2: Vec::new(), loss: Vec::new() };
        for p in parts {
            out.linf.extend(p.linf);
            out.l2.extend(p.l2);
            out.loss.extend(p.loss);
        }
        Ok(out)
    }
}

/// Per-image L-infinity and L2 norms of `x_adv - x`.
pub fn perturbation_stats<T: Scalar>(x: &Tensor<T>, x_adv: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape(x.shape(), x_adv.shape()));
    }
    let (mut linf, mut l2) = (Vec::new(), Vec::new());
    for i in 0..x.batch_size() {
        let (mut m, mut s) = (0.0f64, 0.0f64);
        for (&a, &b) in x.example(i).iter().zip(x_adv.example(i)) {
            let d = (b.to_f64_lossy() - a.to_f64_lossy()).abs();
            m = m.max(d);
            s += d * d;
        }
        linf.push(m);
        l2.push(s.sqrt());
    }
    Ok((linf, l2))
}

/// Elementwise `clamp(cand, max(orig - eps, lo), min(orig + eps, hi))`.
pub fn project_linf<T: Scalar>(cand: &Tensor<T>, orig: &Tensor<T>, epsilon: T, lo: T, hi: T) -> Result<Tensor<T>> {
    cand.zip_map(orig, |c, o| project_one(c, o, epsilon, lo, hi))
}

#[inline]
fn project_one<T: Scalar>(c: T, o: T, eps: T, lo: T, hi: T) -> T {
    c.max((o - eps).max(lo)).min((o + eps).min(hi))
}

fn bounds<T: Scalar>(cfg: &AttackConfig) -> (T, T, T, T) {
    (T::lit(cfg.epsilon), T::lit(cfg.alpha), T::lit(cfg.clip_lo), T::lit(cfg.clip_hi))
}

/// `clamp(x + eps * sign(grad J), lo, hi)` from one gradient evaluation.
pub fn fgsm<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return AdversarialBatch::build(model, x, x.clone(), target);
    }
    let (eps, _, lo, hi) = bounds::<T>(cfg);
    let (_, grad) = per_example_loss_and_grad(model, x, target)?;
    let x_adv = x.zip_map(&grad, |v, g| (v + eps * crate::tensor::sign(g)).max(lo).min(hi))?;
    AdversarialBatch::build(model, x, x_adv, target)
}

/// Iterate `I <- project(I + alpha * sign(grad J(I)))` from `start`.
/// `observe(i, iterate, loss)` sees every iterate `0..=steps` with its
/// per-example loss. Returns the final iterate and its loss.
fn iterate<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    start: Tensor<T>,
    cfg: &AttackConfig,
    observe: &mut dyn FnMut(usize, &Tensor<T>, &[T]),
) -> Result<(Tensor<T>, Vec<T>)> {
    let (eps, alpha, lo, hi) = bounds::<T>(cfg);
    let mut cur = start;
    for i in 0..cfg.steps {
        let (loss, grad) = per_example_loss_and_grad(model, &cur, target)?;
        observe(i, &cur, &loss);
        let mut next = cur.clone();
        for ((n, &g), &o) in next.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            *n = project_one(*n + alpha * crate::tensor::sign(g), o, eps, lo, hi);
        }
        cur = next;
    }
    let loss = per_example_loss(model, &cur, target)?;
    observe(cfg.steps, &cur, &loss);
    Ok((cur, loss))
}

pub fn bim<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    bim_observed(model, x, target, cfg, |_, _, _| {})
}

/// [`bim`] reporting every iterate and its per-example loss.
pub fn bim_observed<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    cfg: &AttackConfig,
    mut observe: impl FnMut(usize, &Tensor<T>, &[T]),
) -> Result<AdversarialBatch<T>> {
    cfg.validate()?;
    model.check_input(x.shape())?;
    if cfg.epsilon == 0.0 {
        return AdversarialBatch::build(model, x, x.clone(), target);
    }
    let (x_adv, loss) = iterate(model, x, target, x.clone(), cfg, &mut observe)?;
    AdversarialBatch::with_loss(x, x_adv, loss)
}

pub fn pgd<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    pgd_restarts(model, x, target, cfg, |_, _| {})
}

/// [`pgd`] reporting each restart's final per-example loss.
pub fn pgd_restarts<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    cfg: &AttackConfig,
    mut on_restart: impl FnMut(usize, &[T]),
) -> Result<AdversarialBatch<T>> {
    cfg.validate()?;
    model.check_input(x.shape())?;
    if cfg.epsilon == 0.0 {
        return AdversarialBatch::build(model, x, x.clone(), target);
    }
    let (_, _, lo, hi) = bounds::<T>(cfg);
    let mut best: Option<(Tensor<T>, Vec<T>)> = None;
    for r in 0..cfg.restarts {
        let start = match cfg.start_noise {
            StartNoise::Zero => x.clone(),
            StartNoise::Uniform => {
                let mut rng = rng::stream(cfg.seed, &[tag::PGD_START, r as u64]);
                let mut start = x.clone();
                for v in start.data_mut() {
                    *v = (*v + T::lit(rng.gen_range(-cfg.epsilon..=cfg.epsilon))).max(lo).min(hi);
                }
                start
            }
        };
        let (cand, loss) = iterate(model, x, target, start, cfg, &mut |_, _, _| {})?;
        on_restart(r, &loss);
        best = Some(match best {
            None => (cand, loss),
            Some((mut bx, mut bl)) => {
                for i in 0..bl.len() {
                    // strictly greater, so ties keep the earliest restart
                    if loss[i] > bl[i] {
                        bl[i] = loss[i];
                        bx.example_mut(i).copy_from_slice(cand.example(i));
                    }
                }
                (bx, bl)
            }
        });
    }
    let (x_adv, loss) = best.expect("restarts >= 1");
    AdversarialBatch::with_loss(x, x_adv, loss)
}

/// Dispatches on `cfg.kind`.
pub fn attack<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, target, cfg),
        AttackKind::Bim => bim(model, x, target, cfg),
        AttackKind::Pgd => pgd(model, x, target, cfg),
    }
}

/// Attacks a labelled set in chunks of `batch_size`, in parallel. Chunk `b`
/// uses seed `derive(cfg.seed, [b])`, so the result does not depend on the
/// thread count.
pub fn attack_batched<T, M>(
    model: &M,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<AdversarialBatch<T>>
where
    T: Scalar,
    M: Objective<T, Target = [usize]> + Sync + ?Sized,
{
    cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if images.batch_size() != labels.len() {
        return Err(Error::invalid(format!("{} images but {} labels", images.batch_size(), labels.len())));
    }
    let n = labels.len();
    let ranges: Vec<_> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    let parts = ranges
        .into_par_iter()
        .enumerate()
        .map(|(b, r)| {
            let chunk_cfg = cfg.clone().with_seed(rng::derive(cfg.seed, &[tag::ATTACK_BATCH, b as u64]));
            attack(model, &images.slice_batch(r.clone())?, &labels[r], &chunk_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        let empty = Tensor::new(images.shape().to_vec(), Vec::new())?;
        return Ok(AdversarialBatch { x_adv: empty, linf: Vec::new(), l2: Vec::new(), loss: Vec::new() });
    }
    AdversarialBatch::concat(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let p = |c: f64, o: f64, e: f64| project_one(c, o, e, 0.0, 1.0);
        assert!((p(0.9, 0.5, 0.2) - 0.7).abs() < 1e-15);
        assert_eq!(p(0.55, 0.5, 0.2), 0.55);
        assert_eq!(p(1.25, 0.95, 0.3), 1.0);
        assert_eq!(p(-0.3, 0.1, 0.3), 0.0);
    }

    #[test]
    fn stats_examples() {
        let x = Tensor::new([2, 1, 1, 3], vec![0.2f64, 0.5, 0.5, 0.1, 0.1, 0.1]).unwrap();
        let mut y = x.clone();
        y.data_mut()[1] = 0.5 + 0.6;
        let (linf, l2) = perturbation_stats(&x, &y).unwrap();
        assert!((linf[0] - 0.6).abs() < 1e-12 && (l2[0] - 0.6).abs() < 1e-12);
        assert_eq!((linf[1], l2[1]), (0.0, 0.0));
        assert!(perturbation_stats(&x, &x.clone().reshape([6]).unwrap()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(0.3).validate().is_ok());
        assert!(AttackConfig::fgsm(-0.1).validate().is_err());
        assert!(AttackConfig::bim(0.3, 0.0, 10).validate().is_err());
        assert!(AttackConfig::bim(0.3, 0.1, 0).validate().is_err());
        assert!(AttackConfig::pgd(0.3, 0.1, 10, 0, 1).validate().is_err());
        // no budget, nothing to step
        assert!(AttackConfig::new(AttackKind::Pgd, 0.0).validate().is_ok());
        let mut c = AttackConfig::fgsm(0.1);
        c.clip_lo = 2.0;
        assert!(c.validate().is_err());
        assert_eq!("PGD".parse::<AttackKind>().unwrap(), AttackKind::Pgd);
        assert!("cw".parse::<AttackKind>().is_err());
        let d = AttackConfig::new(AttackKind::Pgd, 0.15);
        assert_eq!((d.steps, d.restarts), (40, 1));
        assert!((d.alpha - 0.015).abs() < 1e-15);
    }
}
