//! Classifier and autoencoder training on synthetic digits.

use advshield::attacks::AttackConfig;
use advshield::classifier::{accuracy, train_classifier, Classifier, TrainConfig};
use advshield::data::{synthetic_dataset, Split};
use advshield::defense::{reconstruction_mse, train_defense, Autoencoder, DefenseTrainConfig, Purifier};
use advshield::{rng, Tensor};

fn split(seed: u64, per_class: usize, which: Split) -> advshield::data::Dataset {
    synthetic_dataset(rng::derive(seed, &[which as u64]), per_class).unwrap().with_split(which)
}

#[test]
fn classifier_learns_synthetic_digits() {
    let train = split(0, 300, Split::Train);
    let test = split(0, 50, Split::Test);
    let untrained = Classifier::<f32>::init(1);
    let chance = accuracy(&untrained, &test).unwrap();
    assert!(chance < 0.3, "untrained accuracy {chance}");

    let cfg = TrainConfig { epochs: 3, seed: 1, ..Default::default() };
    let (model, report) = train_classifier(untrained.clone(), &train, &test, &cfg).unwrap();
    let acc = report.final_accuracy().unwrap();
    assert!(acc > 0.95, "accuracy after 3 epochs {acc}");
    assert_eq!(acc, accuracy(&model, &test).unwrap());
    assert!(report.epochs[2].train_loss < report.epochs[0].train_loss);

    let (zero, report) = train_classifier(untrained, &train, &test, &TrainConfig { epochs: 0, ..cfg }).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(accuracy(&zero, &test).unwrap(), chance);
}

#[test]
fn plain_autoencoder_overfits_a_small_set() {
    let data = split(4, 4, Split::Train);
    let cfg = DefenseTrainConfig {
        recipe: None,
        sigma: 0.0,
        epochs: 400,
        lr: 2.0,
        batch_size: 40,
        clean_mix: 0.0,
        seed: 4,
        ..Default::default()
    };
    let clf = Classifier::init(0);
    let (ae, report) = train_defense(Autoencoder::init(4, 32).unwrap(), &clf, &data, &cfg).unwrap();
    let mse = reconstruction_mse(&ae, data.images()).unwrap();
    assert!(mse < 0.01, "reconstruction mse {mse}, last train mse {:?}", report.epochs.last());
}

#[test]
fn defense_training_reduces_error_and_purify_is_deterministic() {
    let train = split(5, 30, Split::Train);
    let test = split(5, 10, Split::Test);
    let (clf, _) =
        train_classifier(Classifier::init(5), &train, &test, &TrainConfig { epochs: 1, seed: 5, ..Default::default() })
            .unwrap();
    let cfg = DefenseTrainConfig {
        recipe: Some(AttackConfig::fgsm(0.3)),
        epochs: 3,
        seed: 5,
        batch_size: 32,
        ..Default::default()
    };
    let (ae, report) = train_defense(Autoencoder::init(5, 16).unwrap(), &clf, &train, &cfg).unwrap();
    assert!(report.epochs[2].train_mse < report.epochs[0].train_mse, "{:?}", report.epochs);

    let x = test.images();
    let a = ae.purify(x).unwrap();
    assert_eq!(a, ae.purify(x).unwrap());
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(a.shape(), x.shape());
    assert!(ae
        .decode(&Tensor::from_fn(ae.latent_shape(2).to_vec(), |i| (i as f32 * 0.37).sin() * 50.0))
        .unwrap()
        .data()
        .iter()
        .all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn autoencoder_init_and_geometry() {
    let a = Autoencoder::<f32>::init(9, 32).unwrap();
    assert_eq!(a, Autoencoder::init(9, 32).unwrap());
    assert_ne!(a, Autoencoder::init(10, 32).unwrap());
    assert!(Autoencoder::<f32>::init(9, 0).is_err());
    let x = Tensor::full([2, 1, 28, 28], 0.5f32);
    assert_eq!(a.encode(&x).unwrap().shape(), &[2, 32, 7, 7]);
    assert!(a.encode(&Tensor::zeros([2, 1, 27, 28])).is_err());
}

#[test]
fn f64_and_f32_models_agree() {
    let m32 = Classifier::<f32>::init(2);
    let m64: Classifier<f64> = m32.cast();
    let x = split(2, 1, Split::Test).images().clone();
    let a = m32.logits(&x).unwrap();
    let b = m64.logits(&x.cast()).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((*p as f64 - q).abs() < 1e-4, "{p} vs {q}");
    }
}
