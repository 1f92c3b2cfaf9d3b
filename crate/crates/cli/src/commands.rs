use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

use advshield::attacks::{attack_batched, AttackKind};
use advshield::checkpoint::{load_autoencoder, load_classifier, save_autoencoder, save_classifier};
use advshield::classifier::{accuracy, fraction_correct, train_classifier_observed, Classifier, TrainConfig};
use advshield::data::{synthetic_dataset, write_idx_images_in_ball, write_idx_labels, Dataset, Split};
use advshield::defense::{train_defense_observed, Autoencoder, DefenseTrainConfig};
use advshield::eval::{
    defended_evaluation, epsilon_sweep, measure_latency, render_grid, EvalReport, EvalRow, SweepDefaults,
};
use advshield::{rng, Tensor};

use crate::config::RunConfig;
use crate::Usage;

/// Creates the output directory and records the resolved config there, so
/// `--config OUT/COMMAND.cfg` replays the run.
fn setup(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    if cfg.threads > 0 {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(format!("{command}.cfg")), cfg.to_text())?;
    Ok(out)
}

fn data_dir(name: &str) -> PathBuf {
    match name {
        "mnist" | "fashion" => {
            let base = std::env::var_os("ADVSHIELD_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| "data".into());
            base.join(name)
        }
        path => PathBuf::from(path),
    }
}

fn load(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let data = if cfg.data == "synthetic" {
        let (path, per_class) = match split {
            Split::Train => (0, cfg.train_per_class),
            Split::Test => (1, cfg.test_per_class),
        };
        synthetic_dataset(rng::derive(cfg.data_seed, &[path]), per_class)?.with_split(split)
    } else {
        let dir = data_dir(&cfg.data);
        if !dir.is_dir() {
            return Err(Usage(format!("data directory {} does not exist", dir.display())).into());
        }
        Dataset::load_dir(&dir, split).with_context(|| format!("loading {split} split from {}", dir.display()))?
    };
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    };
    Ok(if limit > 0 { data.head(limit) } else { data })
}

fn load_model(cfg: &RunConfig) -> Result<Classifier<f32>> {
    let path = cfg.model_path();
    load_classifier(&path).with_context(|| format!("loading classifier {}", path.display()))
}

fn load_defense(cfg: &RunConfig) -> Result<Autoencoder<f32>> {
    let path = cfg.defense_path();
    load_autoencoder(&path).with_context(|| format!("loading defense {}", path.display()))
}

/// Run config as checkpoint metadata (no timestamp, so reruns match).
fn checkpoint_meta(cfg: &RunConfig, command: &str) -> BTreeMap<String, String> {
    let mut m: BTreeMap<String, String> = cfg.pairs().into_iter().map(|(k, v)| (format!("cfg.{k}"), v)).collect();
    m.insert("command".into(), command.into());
    m
}

fn report_meta(cfg: &RunConfig, command: &str) -> Vec<(String, String)> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut m = vec![
        ("command".to_string(), command.to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("created_unix".to_string(), created.to_string()),
    ];
    m.extend(cfg.pairs().into_iter().map(|(k, v)| (format!("cfg.{k}"), v)));
    m
}

fn comment_block(meta: &[(String, String)]) -> String {
    meta.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Stacks equal-length rows of images for a grid, `cols` images per row.
fn grid_rows(rows: &[&Tensor<f32>], cols: usize) -> Result<(Tensor<f32>, usize)> {
    let n = rows.iter().map(|t| t.batch_size()).min().unwrap_or(0).min(cols);
    let parts = rows.iter().map(|t| t.slice_batch(0..n)).collect::<advshield::Result<Vec<_>>>()?;
    Ok((Tensor::concat(&parts)?, n))
}

fn save_grid(path: &Path, rows: &[&Tensor<f32>], cols: usize) -> Result<()> {
    let (images, n) = grid_rows(rows, cols)?;
    if n > 0 {
        render_grid(&images, rows.len(), n, path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn train_classifier(cfg: &RunConfig) -> Result<()> {
    let out = setup(cfg, "train-classifier")?;
    let train = load(cfg, Split::Train)?;
    let test = load(cfg, Split::Test)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let (model, report) = train_classifier_observed(Classifier::init(cfg.seed), &train, &test, &tc, |e| {
        println!(
            "epoch {} train_loss={:.4} test_loss={:.4} test_accuracy={:.4}",
            e.epoch, e.train_loss, e.test_loss, e.test_accuracy
        )
    })?;
    let acc = match report.final_accuracy() {
        Some(a) => a,
        None => accuracy(&model, &test)?,
    };
    let path = cfg.model_path();
    save_classifier(&path, &model, &checkpoint_meta(cfg, "train-classifier"))
        .with_context(|| format!("saving {}", path.display()))?;

    let mut log = comment_block(&report_meta(cfg, "train-classifier"));
    log.push_str("epoch,train_loss,test_loss,test_accuracy\n");
    for e in &report.epochs {
        let _ = writeln!(log, "{},{:.6},{:.6},{:.6}", e.epoch, e.train_loss, e.test_loss, e.test_accuracy);
    }
    write(&out.join("train_classifier.csv"), log)?;
    println!("test_accuracy={acc:.4} seconds={:.1} checkpoint={}", report.seconds, path.display());
    Ok(())
}

pub fn attack(cfg: &RunConfig) -> Result<()> {
    let ac = cfg.attack();
    ac.validate()?;
    let out = setup(cfg, "attack")?;
    let model = load_model(cfg)?;
    let test = load(cfg, Split::Test)?;
    let adv = attack_batched(&model, test.images(), test.labels(), &ac, cfg.attack_batch)?;
    let clean_acc = accuracy(&model, &test)?;
    let adv_acc = fraction_correct(&model.predict_labels(&adv.x_adv)?, test.labels());

    let dir = out.join("adversarial");
    fs::create_dir_all(&dir)?;
    let prefix = Split::Test.file_prefix();
    write_idx_images_in_ball(dir.join(format!("{prefix}-images-idx3-ubyte")), &adv.x_adv, test.images(), ac.epsilon)?;
    write_idx_labels(dir.join(format!("{prefix}-labels-idx1-ubyte")), test.labels())?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut sidecar: Vec<(String, String)> = checkpoint_meta(cfg, "attack").into_iter().collect();
    sidecar.extend([
        ("attack.kind".to_string(), ac.kind.to_string()),
        ("attack.epsilon".to_string(), ac.epsilon.to_string()),
        ("attack.alpha".to_string(), ac.alpha.to_string()),
        ("attack.steps".to_string(), ac.steps.to_string()),
        ("attack.restarts".to_string(), ac.restarts.to_string()),
        ("attack.seed".to_string(), ac.seed.to_string()),
        ("attack.batch".to_string(), cfg.attack_batch.to_string()),
        ("classifier_hash".to_string(), model.network().weights_hash()),
        ("n".to_string(), test.len().to_string()),
        ("acc_clean".to_string(), format!("{clean_acc:.6}")),
        ("acc_attacked".to_string(), format!("{adv_acc:.6}")),
        ("linf_mean".to_string(), format!("{:.6}", mean(&adv.linf))),
        ("l2_mean".to_string(), format!("{:.6}", mean(&adv.l2))),
    ]);
    let text: String = sidecar.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write(&dir.join("attack.meta"), text)?;
    save_grid(&out.join("adversarial_grid.pgm"), &[&adv.x_adv, test.images()], cfg.grid_cols)?;
    println!(
        "{} eps={} n={} acc_clean={clean_acc:.4} acc_attacked={adv_acc:.4} output={}",
        ac.kind,
        ac.epsilon,
        test.len(),
        dir.display()
    );
    Ok(())
}

pub fn train_defense(cfg: &RunConfig) -> Result<()> {
    let dc = DefenseTrainConfig {
        recipe: cfg.recipe_attack(),
        sigma: cfg.sigma,
        epochs: cfg.defense_epochs,
        lr: cfg.defense_lr,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        clean_mix: cfg.clean_mix,
    };
    dc.validate()?;
    let out = setup(cfg, "train-defense")?;
    let model = load_model(cfg)?;
    let train = load(cfg, Split::Train)?;
    let ae = Autoencoder::init(cfg.seed, cfg.bottleneck)?;
    let (ae, report) = train_defense_observed(ae, &model, &train, &dc, |e| {
        println!("epoch {} train_mse={:.6}", e.epoch, e.train_mse)
    })?;
    let mut meta = checkpoint_meta(cfg, "train-defense");
    meta.insert("classifier_hash".into(), model.network().weights_hash());
    meta.insert("recipe".into(), cfg.recipe.to_string());
    if let Some(r) = &dc.recipe {
        meta.insert("recipe.epsilon".into(), r.epsilon.to_string());
        meta.insert("recipe.alpha".into(), r.alpha.to_string());
        meta.insert("recipe.steps".into(), r.steps.to_string());
    }
    meta.insert("sigma".into(), cfg.sigma.to_string());
    let path = cfg.defense_path();
    save_autoencoder(&path, &ae, cfg.seed, &meta).with_context(|| format!("saving {}", path.display()))?;

    let mut log = comment_block(&report_meta(cfg, "train-defense"));
    let _ = writeln!(log, "# attack_seconds={:.3}", report.attack_seconds);
    log.push_str("epoch,train_mse\n");
    for e in &report.epochs {
        let _ = writeln!(log, "{},{:.6}", e.epoch, e.train_mse);
    }
    write(&out.join("train_defense.csv"), log)?;
    let last = report.epochs.last().map_or(f64::NAN, |e| e.train_mse);
    println!("final_train_mse={last:.6} seconds={:.1} checkpoint={}", report.seconds, path.display());
    Ok(())
}

fn print_row(r: &EvalRow) {
    let defended = r.acc_defended.map(|d| format!(" acc_defended={d:.4}")).unwrap_or_default();
    println!("{} eps={} acc_attacked={:.4}{defended} n={}", r.attack, r.epsilon, r.acc_attacked, r.n);
}

pub fn evaluate(cfg: &RunConfig, sweep: Option<AttackKind>, defended: bool, latency: bool) -> Result<()> {
    let out = setup(cfg, "evaluate")?;
    let model = load_model(cfg)?;
    let test = load(cfg, Split::Test)?;
    let classifier_hash = model.network().weights_hash();

    if let Some(kind) = sweep {
        let defaults = SweepDefaults {
            alpha_ratio: match cfg.alpha {
                crate::config::Alpha::Ratio(r) => r,
                crate::config::Alpha::Fixed(_) => {
                    return Err(Usage("sweeps need a relative alpha such as 0.1eps".into()).into())
                }
            },
            steps: cfg.steps,
            restarts: cfg.restarts,
            seed: cfg.seed,
            batch_size: cfg.attack_batch,
            ..Default::default()
        };
        let mut report = epsilon_sweep(&model, kind, &cfg.eps_list(kind)?, &test, &defaults)?;
        report.metadata.splice(0..0, report_meta(cfg, "evaluate --sweep"));
        report.metadata.push(("dataset".into(), cfg.data.clone()));
        report.rows.iter().for_each(print_row);
        report.write_csv(out.join(format!("sweep_{kind}.csv")))?;
    }

    if defended || latency {
        let ae = load_defense(cfg)?;
        let defense_hash = ae.network().weights_hash();
        if defended {
            let ac = cfg.attack();
            let outcome = defended_evaluation(&model, &ae, &ac, &test, cfg.attack_batch)?;
            let clean_pass = fraction_correct(&model.predict_labels(&ae.reconstruct(test.images())?)?, test.labels());
            let clean = EvalRow {
                attack: "none".into(),
                epsilon: 0.0,
                acc_attacked: accuracy(&model, &test)?,
                acc_defended: Some(clean_pass),
                linf_mean: 0.0,
                l2_mean: 0.0,
                n: test.len(),
            };
            let mut report = EvalReport {
                rows: vec![clean, outcome.row.clone()],
                metadata: report_meta(cfg, "evaluate --defended"),
            }
            .with_metadata("dataset", &cfg.data)
            .with_metadata("classifier_hash", &classifier_hash)
            .with_metadata("defense_hash", &defense_hash)
            .with_metadata("attack.alpha", ac.alpha)
            .with_metadata("attack.seed", ac.seed);
            report.sort_rows();
            report.rows.iter().for_each(print_row);
            report.write_csv(out.join(format!("defended_{}.csv", ac.kind)))?;
            save_grid(
                &out.join(format!("defended_{}.pgm", ac.kind)),
                &[test.images(), &outcome.x_adv, &outcome.purified],
                cfg.grid_cols,
            )?;
        }
        if latency {
            let n = cfg.latency_batch.min(test.len());
            let batch = test.images().slice_batch(0..n)?;
            let lr = measure_latency(&ae, &model, &batch, cfg.warmup, cfg.trials)?;
            let mut meta = report_meta(cfg, "evaluate --latency");
            meta.push(("classifier_hash".into(), classifier_hash));
            meta.push(("defense_hash".into(), defense_hash));
            write(&out.join("latency.csv"), comment_block(&meta) + &lr.to_csv())?;
            println!(
                "latency per image: median={:.3}ms mean={:.3}ms p95={:.3}ms (batch {}, {} trials)",
                lr.median * 1e3,
                lr.mean * 1e3,
                lr.p95 * 1e3,
                lr.batch_size,
                lr.trials
            );
        }
    }
    Ok(())
}
