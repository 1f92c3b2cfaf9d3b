//! Evaluation protocol: epsilon sweeps, defended-vs-undefended accuracy,
//! purify+classify latency, CSV reports and image grids.

mod grid;
mod report;

use std::time::Instant;

use rayon::prelude::*;

use crate::attacks::{attack_batched, AttackConfig, AttackKind, StartNoise};
use crate::classifier::{accuracy, fraction_correct, Classifier};
use crate::data::Dataset;
use crate::defense::Purifier;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub use grid::{grid_pgm, render_grid};
pub use report::{EvalReport, EvalRow, CSV_HEADER};

pub const FGSM_GRID: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.0, 1.5];
pub const PGD_GRID: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.3];

/// Attack settings shared by every point of a sweep. The step size scales
/// with the budget: `alpha = alpha_ratio * epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepDefaults {
    pub alpha_ratio: f64,
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub start_noise: StartNoise,
}

impl Default for SweepDefaults {
    fn default() -> Self {
        Self {
            alpha_ratio: 0.1,
            steps: AttackConfig::DEFAULT_STEPS,
            restarts: 1,
            seed: 0,
            batch_size: 100,
            start_noise: StartNoise::Uniform,
        }
    }
}

impl SweepDefaults {
    /// The attack run at point `index` of a sweep.
    pub fn config(&self, kind: AttackKind, index: usize, epsilon: f64) -> AttackConfig {
        AttackConfig {
            alpha: self.alpha_ratio * epsilon,
            steps: self.steps,
            restarts: self.restarts,
            seed: rng::derive(self.seed, &[tag::SWEEP_POINT, index as u64]),
            start_noise: self.start_noise,
            ..AttackConfig::new(kind, epsilon)
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Attacks all of `data` once per budget in `eps_list`. The `epsilon = 0`
/// row skips the attack and reports clean accuracy.
pub fn epsilon_sweep(
    model: &Classifier<f32>,
    kind: AttackKind,
    eps_list: &[f64],
    data: &Dataset,
    defaults: &SweepDefaults,
) -> Result<EvalReport> {
    if eps_list.is_empty() {
        return Err(Error::invalid("eps_list must not be empty"));
    }
    let rows = eps_list
        .par_iter()
        .enumerate()
        .map(|(i, &eps)| {
            let cfg = defaults.config(kind, i, eps);
            cfg.validate()?;
            if eps == 0.0 {
                return Ok(EvalRow {
                    attack: kind.to_string(),
                    epsilon: 0.0,
                    acc_attacked: accuracy(model, data)?,
                    acc_defended: None,
                    linf_mean: 0.0,
                    l2_mean: 0.0,
                    n: data.len(),
                });
            }
            let adv = attack_batched(model, data.images(), data.labels(), &cfg, defaults.batch_size)?;
            let pred = model.predict_labels(&adv.x_adv)?;
            Ok(EvalRow {
                attack: kind.to_string(),
                epsilon: eps,
                acc_attacked: fraction_correct(&pred, data.labels()),
                acc_defended: None,
                linf_mean: mean(&adv.linf),
                l2_mean: mean(&adv.l2),
                n: data.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grid: Vec<String> = eps_list.iter().map(|e| e.to_string()).collect();
    let mut report = EvalReport { rows, metadata: Vec::new() }
        .with_metadata("attack", kind)
        .with_metadata("eps_grid", grid.join(" "))
        .with_metadata("alpha_ratio", defaults.alpha_ratio)
        .with_metadata("steps", defaults.steps)
        .with_metadata("restarts", defaults.restarts)
        .with_metadata("seed", defaults.seed)
        .with_metadata("attack_batch", defaults.batch_size)
        .with_metadata("classifier_hash", model.network().weights_hash());
    report.sort_rows();
    Ok(report)
}

/// Images produced by [`defended_evaluation`], kept for rendering.
#[derive(Clone, Debug)]
pub struct DefendedOutcome {
    pub row: EvalRow,
    pub x_adv: Tensor<f32>,
    pub purified: Tensor<f32>,
}

/// Accuracy on one adversarial batch, with and without purification. The
/// attack runs once; both numbers come from the same images.
pub fn defended_evaluation<P: Purifier<f32> + ?Sized>(
    model: &Classifier<f32>,
    purifier: &P,
    cfg: &AttackConfig,
    data: &Dataset,
    batch_size: usize,
) -> Result<DefendedOutcome> {
    cfg.validate()?;
    let (x_adv, linf, l2) = if cfg.epsilon == 0.0 {
        (data.images().clone(), vec![0.0; data.len()], vec![0.0; data.len()])
    } else {
        let adv = attack_batched(model, data.images(), data.labels(), cfg, batch_size)?;
        (adv.x_adv, adv.linf, adv.l2)
    };
    let attacked = model.predict_labels(&x_adv)?;
    let purified = purifier.purify(&x_adv)?;
    let defended = model.predict_labels(&purified)?;
    let row = EvalRow {
        attack: cfg.kind.to_string(),
        epsilon: cfg.epsilon,
        acc_attacked: fraction_correct(&attacked, data.labels()),
        acc_defended: Some(fraction_correct(&defended, data.labels())),
        linf_mean: mean(&linf),
        l2_mean: mean(&l2),
        n: data.len(),
    };
    Ok(DefendedOutcome { row, x_adv, purified })
}

pub fn defended_accuracy<P: Purifier<f32> + ?Sized>(
    model: &Classifier<f32>,
    purifier: &P,
    cfg: &AttackConfig,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalRow> {
    Ok(defended_evaluation(model, purifier, cfg, data, batch_size)?.row)
}

/// Per-image purify+classify wall time over several timed passes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub warmup: usize,
    pub trials: usize,
    /// Seconds per image.
    pub median: f64,
    pub mean: f64,
    pub p95: f64,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        format!(
            "batch_size,warmup,trials,median_s,mean_s,p95_s\n{},{},{},{:.6e},{:.6e},{:.6e}\n",
            self.batch_size, self.warmup, self.trials, self.median, self.mean, self.p95
        )
    }
}

/// Median (mean of the middle pair for even counts), mean and nearest-rank
/// 95th percentile.
pub fn summarize_times(times: &[f64]) -> (f64, f64, f64) {
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let median = if n % 2 == 1 { t[n / 2] } else { (t[n / 2 - 1] + t[n / 2]) / 2.0 };
    let p95 = t[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    (median, mean(&t), p95)
}

pub fn measure_latency<P: Purifier<f32> + ?Sized>(
    purifier: &P,
    model: &Classifier<f32>,
    batch: &Tensor<f32>,
    warmup: usize,
    trials: usize,
) -> Result<LatencyReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let n = batch.batch_size();
    if n == 0 {
        return Err(Error::invalid("latency batch is empty"));
    }
    let run = || -> Result<f64> {
        let start = Instant::now();
        let purified = purifier.purify(batch)?;
        std::hint::black_box(model.predict_labels(&purified)?);
        Ok(start.elapsed().as_secs_f64() / n as f64)
    };
    for _ in 0..warmup {
        run()?;
    }
    let times = (0..trials).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let (median, mean, p95) = summarize_times(&times);
    Ok(LatencyReport { batch_size: n, warmup, trials, median, mean, p95 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_summary() {
        assert_eq!(summarize_times(&[0.5]), (0.5, 0.5, 0.5));
        assert_eq!(summarize_times(&[3.0, 1.0]), (2.0, 2.0, 3.0));
        let t: Vec<f64> = (1..=20).map(f64::from).collect();
        let (median, _, p95) = summarize_times(&t);
        assert_eq!((median, p95), (10.5, 19.0));
    }

    #[test]
    fn sweep_configs() {
        let d = SweepDefaults { seed: 9, ..Default::default() };
        let c = d.config(AttackKind::Pgd, 3, 0.15);
        assert!((c.alpha - 0.015).abs() < 1e-15);
        assert_eq!(c.steps, 40);
        assert_ne!(c.seed, d.config(AttackKind::Pgd, 2, 0.15).seed);
        assert!(d.config(AttackKind::Bim, 0, 0.0).validate().is_ok());
    }
}
