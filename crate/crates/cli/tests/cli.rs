use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use advshield::checkpoint::{load_autoencoder, Checkpoint};
use advshield::data::{load_idx_images, synthetic_dataset, Split};
use advshield::eval::EvalReport;

fn advshield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advshield")).args(args).env_remove("ADVSHIELD_DATA_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = advshield(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn field(stdout: &str, key: &str) -> f64 {
    let tok = stdout.split_whitespace().filter_map(|t| t.strip_prefix(&format!("{key}="))).next_back();
    tok.unwrap_or_else(|| panic!("{key} not in {stdout}")).parse().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = advshield(&["train-classifier", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    assert_eq!(advshield(&["train-classifier", "--bogus"]).status.code(), Some(2));
    assert_eq!(advshield(&["attack", "--set", "nokey=1"]).status.code(), Some(2));
    assert_eq!(advshield(&["attack", "--eps=-1", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(advshield(&["evaluate", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(advshield(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = advshield(&["attack", "--out", s(dir.path()), "--model", s(&dir.path().join("none.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "data=/definitely/not/here\n").unwrap();
    let out = advshield(&["train-classifier", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&cfg, "data = synthetic\nnot a pair\n").unwrap();
    assert_eq!(advshield(&["train-classifier", "--config", s(&cfg)]).status.code(), Some(2));
}

/// Train, attack, defend and evaluate on synthetic data end to end.
#[test]
fn synthetic_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let common = ["--data", "synthetic", "--out", s(out), "--set", "train_per_class=300", "--threads", "2"];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(&common).map(|a| a.to_string()).collect() };
    let run = |extra: &[&str]| ok(&with(extra).iter().map(String::as_str).collect::<Vec<_>>());

    let stdout = run(&["train-classifier", "--epochs", "3", "--seed", "1"]);
    assert!(field(&stdout, "test_accuracy") > 0.95, "{stdout}");
    let ckpt = out.join("classifier.ckpt");
    let first = fs::read(&ckpt).unwrap();
    run(&["train-classifier", "--epochs", "3", "--seed", "1"]);
    assert_eq!(fs::read(&ckpt).unwrap(), first, "retraining with the same flags changed the checkpoint");
    assert!(Checkpoint::from_bytes(&first).unwrap().meta.contains_key("cfg.seed"));
    assert!(fs::read_to_string(out.join("train_classifier.csv")).unwrap().contains("epoch,train_loss"));

    let test = synthetic_dataset(advshield::rng::derive(0, &[1]), 100).unwrap().with_split(Split::Test);
    let adv_path = out.join("adversarial").join("t10k-images-idx3-ubyte");

    run(&["attack", "--kind", "fgsm", "--eps", "0.6"]);
    let adv = load_idx_images(&adv_path).unwrap();
    assert_eq!(adv.shape(), test.images().shape());
    let worst = adv.data().iter().zip(test.images().data()).map(|(a, c)| (a - c).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 0.6 + 1e-6 && worst > 0.5, "max perturbation {worst}");
    assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let meta = fs::read_to_string(out.join("adversarial").join("attack.meta")).unwrap();
    assert!(meta.contains("attack.kind=fgsm") && meta.contains("attack.epsilon=0.6"));
    assert!(fs::read(out.join("adversarial_grid.pgm")).unwrap().starts_with(b"P5\n"));

    run(&["attack", "--kind", "fgsm", "--eps", "0"]);
    assert_eq!(load_idx_images(&adv_path).unwrap(), *test.images());

    let pgd = ["attack", "--kind", "pgd", "--eps", "0.15", "--steps", "40", "--alpha", "0.015", "--seed", "7"];
    run(&pgd);
    let once = fs::read(&adv_path).unwrap();
    run(&pgd);
    assert_eq!(fs::read(&adv_path).unwrap(), once);

    let stdout = run(&["train-defense", "--attack", "fgsm", "--eps", "0.6", "--sigma", "0.1", "--epochs", "3"]);
    let log = fs::read_to_string(out.join("train_defense.csv")).unwrap();
    let mse: Vec<f64> = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(mse.len(), 3);
    assert!(mse[2] < mse[0], "{mse:?}");
    assert!(field(&stdout, "final_train_mse") > 0.0);
    let ae = load_autoencoder(out.join("defense.ckpt")).unwrap();
    let recipe: Vec<_> = ["recipe", "recipe.epsilon", "sigma"]
        .iter()
        .map(|k| ae.meta.iter().find(|(m, _)| m == k).unwrap().1.clone())
        .collect();
    assert_eq!(recipe, ["fgsm", "0.6", "0.1"]);

    run(&["evaluate", "--sweep", "fgsm", "--eps-grid", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,1.0,1.5", "--limit", "200"]);
    let sweep = EvalReport::read_csv(out.join("sweep_fgsm.csv")).unwrap();
    assert_eq!(sweep.rows.len(), 10);
    let clf = advshield::checkpoint::load_classifier(&ckpt).unwrap();
    let clean = advshield::classifier::accuracy(&clf, &test.head(200)).unwrap();
    assert_eq!(sweep.rows[0].acc_attacked, clean);
    assert!(sweep.metadata.iter().any(|(k, _)| k == "classifier_hash"));

    run(&[
        "evaluate",
        "--defended",
        "--kind",
        "fgsm",
        "--eps",
        "0.6",
        "--latency",
        "--limit",
        "200",
        "--set",
        "trials=3",
    ]);
    let defended = EvalReport::read_csv(out.join("defended_fgsm.csv")).unwrap();
    assert_eq!(defended.rows.len(), 2);
    assert!(defended.rows.iter().all(|r| r.acc_defended.is_some()));
    let latency = fs::read_to_string(out.join("latency.csv")).unwrap();
    assert!(latency.contains("batch_size,warmup,trials,median_s,mean_s,p95_s\n100,2,3,"));
    assert!(out.join("defended_fgsm.pgm").exists());
}
