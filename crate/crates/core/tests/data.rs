use advshield::data::*;
use advshield::{Error, Tensor};
use proptest::prelude::*;

fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v
}

proptest! {
    #[test]
    fn image_bytes_round_trip(n in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let bytes: Vec<u8> = (0..n * h * w).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let mut file = header(IMAGES_MAGIC, &[n as u32, h as u32, w as u32]);
        file.extend_from_slice(&bytes);
        let images = decode_images(&file).unwrap();
        prop_assert_eq!(images.shape(), &[n, 1, h, w]);
        prop_assert_eq!(encode_images(&images).unwrap(), file);
    }

    #[test]
    fn label_bytes_round_trip(labels in prop::collection::vec(0usize..10, 0..50)) {
        let file = encode_labels(&labels).unwrap();
        prop_assert_eq!(decode_labels(&file).unwrap(), labels);
    }

    #[test]
    fn header_mutations_are_rejected(byte in 0usize..16, flip in 1u8..=255) {
        let mut file = header(IMAGES_MAGIC, &[2, 2, 3]);
        file.extend_from_slice(&[7; 12]);
        file[byte] ^= flip;
        prop_assert!(decode_images(&file).is_err());
    }

    #[test]
    fn ball_quantization_stays_in_ball(seed in any::<u64>(), eps in 0.0f64..0.7) {
        let clean = Tensor::from_fn([2, 1, 4, 4], |i| ((seed >> (i % 48)) & 0xff) as f32 / 255.0);
        let adv = Tensor::from_fn([2, 1, 4, 4], |i| {
            let c = clean.data()[i] as f64;
            let d = ((seed.rotate_left(i as u32) % 2001) as f64 / 1000.0 - 1.0) * eps;
            (c + d).clamp(0.0, 1.0) as f32
        });
        let back = decode_images(&encode_images_in_ball(&adv, &clean, eps).unwrap()).unwrap();
        for ((b, c), a) in back.data().iter().zip(clean.data()).zip(adv.data()) {
            prop_assert!(((*b as f64) - (*c as f64)).abs() <= eps + 1e-6);
            prop_assert!((b - a).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn zero_budget_quantization_returns_clean_bytes() {
    let clean = Tensor::from_fn([1, 1, 2, 3], |i| (i * 40) as f32 / 255.0);
    let adv = clean.map(|v| (v + 0.3).min(1.0));
    assert_eq!(encode_images_in_ball(&adv, &clean, 0.0).unwrap(), encode_images(&clean).unwrap());
}

#[test]
fn dataset_directory_round_trip_with_gzip() {
    use std::io::Write;
    let data = synthetic_dataset(3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write_dir(dir.path()).unwrap();
    let plain = dir.path().join("train-images-idx3-ubyte");
    let raw = std::fs::read(&plain).unwrap();
    let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    gz.write_all(&raw).unwrap();
    std::fs::remove_file(&plain).unwrap();
    std::fs::write(dir.path().join("train-images-idx3-ubyte.gz"), gz.finish().unwrap()).unwrap();
    let back = Dataset::load_dir(dir.path(), Split::Train).unwrap();
    assert_eq!(back.images(), data.images());
    assert_eq!(back.labels(), data.labels());
    assert!(Dataset::load_dir(dir.path(), Split::Test).is_err());
}

#[test]
fn bad_labels_are_rejected() {
    let mut file = header(LABELS_MAGIC, &[2]);
    file.extend_from_slice(&[3, 10]);
    assert!(matches!(decode_labels(&file), Err(Error::LabelOutOfRange { index: 1, label: 10, .. })));
    assert!(Dataset::new(Tensor::zeros([2, 1, 2, 2]), vec![1], Split::Test).is_err());
}

#[test]
fn synthetic_data_is_seeded() {
    let a = synthetic_dataset(11, 3).unwrap();
    assert_eq!(a.images(), synthetic_dataset(11, 3).unwrap().images());
    assert_ne!(a.images(), synthetic_dataset(12, 3).unwrap().images());
    assert_eq!(a.images().shape(), &[30, 1, 28, 28]);
}

#[test]
fn shuffled_batches_cover_every_index_once() {
    let batches = batch_indices(103, 10, Some(5)).unwrap();
    assert_eq!(batches.len(), 11);
    let mut all: Vec<usize> = batches.concat();
    assert_ne!(all, (0..103).collect::<Vec<_>>());
    all.sort_unstable();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
    assert_eq!(batch_indices(103, 10, Some(5)).unwrap(), batches);
}
