//! IDX container: big-endian `u32` magic, big-endian `u32` dims, row-major
//! unsigned bytes. Files may be raw or gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Reads a file, inflating it when it starts with the gzip signature.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("header ends at byte {}", bytes.len())))
}

/// Validates magic and dims, returning the dims and the payload.
fn parse<'a>(bytes: &'a [u8], magic: u32, what: &'static str, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::WrongMagic { what, expected: magic, found });
    }
    let raw_dims: Vec<u32> = (0..rank).map(|i| read_u32(bytes, 4 + 4 * i)).collect::<Result<_>>()?;
    let count = raw_dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::DimOverflow(raw_dims.clone()))?;
    let header = 4 + 4 * rank;
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(Error::Truncated(format!(
            "dims {raw_dims:?} require {count} bytes of data, file holds {}",
            payload.len()
        )));
    }
    Ok((raw_dims.into_iter().map(|d| d as usize).collect(), payload))
}

/// Decodes an images file into `N x 1 x H x W` pixels in `[0, 1]`.
pub fn decode_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, "images", 3)?;
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([dims[0], 1, dims[1], dims[2]], data)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, "labels", 1)?;
    payload
        .iter()
        .enumerate()
        .map(|(index, &b)| {
            let label = b as usize;
            if label >= NUM_CLASSES {
                Err(Error::LabelOutOfRange { index, label, classes: NUM_CLASSES })
            } else {
                Ok(label)
            }
        })
        .collect()
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_images(&read_maybe_gzip(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    decode_labels(&read_maybe_gzip(path.as_ref())?)
}

/// Nearest byte for a `[0, 1]` pixel.
pub fn pixel_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes a `N x 1 x H x W` (or `N x H x W`) batch, rounding each pixel to
/// the nearest byte. Pixels that came from `byte / 255` round-trip exactly.
pub fn encode_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    encode_image_bytes(images, images.data().iter().map(|&v| pixel_to_byte(v)))
}

/// Encodes adversarial images so every stored byte, read back as
/// `byte / 255`, stays within `epsilon` of `clean` and inside `[0, 1]`.
/// Each pixel takes the nearest byte, clamped to the bytes the ball allows.
/// The clean images must themselves be byte-valued.
pub fn encode_images_in_ball(x_adv: &Tensor<f32>, clean: &Tensor<f32>, epsilon: f64) -> Result<Vec<u8>> {
    if x_adv.shape() != clean.shape() {
        return Err(Error::shape(clean.shape(), x_adv.shape()));
    }
    let bytes = x_adv.data().iter().zip(clean.data()).map(|(&a, &c)| {
        let c = c as f64;
        let lo = ((c - epsilon) * 255.0 - 1e-9).ceil().clamp(0.0, 255.0);
        let hi = ((c + epsilon) * 255.0 + 1e-9).floor().clamp(0.0, 255.0);
        (pixel_to_byte(a) as f64).clamp(lo.min(hi), hi) as u8
    });
    encode_image_bytes(x_adv, bytes)
}

fn encode_image_bytes(images: &Tensor<f32>, bytes: impl Iterator<Item = u8>) -> Result<Vec<u8>> {
    let (n, h, w) = match *images.shape() {
        [n, 1, h, w] | [n, h, w] => (n, h, w),
        _ => return Err(Error::invalid(format!("cannot store {:?} as IDX images", images.shape()))),
    };
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend(bytes);
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let n = u32::try_from(labels.len()).map_err(|_| Error::invalid("too many labels"))?;
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    for (index, &l) in labels.iter().enumerate() {
        if l >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { index, label: l, classes: NUM_CLASSES });
        }
        out.push(l as u8);
    }
    Ok(out)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_images(images)?)?;
    Ok(())
}

pub fn write_idx_images_in_ball(
    path: impl AsRef<Path>,
    x_adv: &Tensor<f32>,
    clean: &Tensor<f32>,
    epsilon: f64,
) -> Result<()> {
    fs::write(path, encode_images_in_ball(x_adv, clean, epsilon)?)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    fs::write(path, encode_labels(labels)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn image_file(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn decodes_hand_built_image() {
        let t = decode_images(&image_file(1, 2, 2, &[0, 255, 128, 64])).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn rejects_label_magic_for_images() {
        let mut f = image_file(1, 2, 2, &[0, 0, 0, 0]);
        f[3] = 0x01;
        let err = decode_images(&f).unwrap_err();
        assert!(err.to_string().contains("wrong magic for images"), "{err}");
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let f = image_file(2, 2, 2, &[1, 2, 3, 4, 5, 6, 7]);
        assert!(matches!(decode_images(&f), Err(Error::Truncated(_))));
        let f = image_file(1, 2, 2, &[1, 2, 3, 4, 5]);
        assert!(matches!(decode_images(&f), Err(Error::Truncated(_))));
        assert!(matches!(decode_images(&[0, 0, 8]), Err(Error::Truncated(_))));
    }

    #[test]
    fn rejects_overflowing_dims() {
        let f = image_file(u32::MAX, u32::MAX, u32::MAX, &[]);
        assert!(matches!(decode_images(&f), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn labels() {
        let mut f = LABELS_MAGIC.to_be_bytes().to_vec();
        f.extend_from_slice(&3u32.to_be_bytes());
        f.extend_from_slice(&[7, 2, 1]);
        assert_eq!(decode_labels(&f).unwrap(), vec![7, 2, 1]);
        let last = f.len() - 1;
        f[last] = 12;
        assert!(matches!(decode_labels(&f), Err(Error::LabelOutOfRange { label: 12, index: 2, .. })));
    }

    #[test]
    fn gzip_is_autodetected() {
        let raw = image_file(1, 1, 3, &[0, 51, 255]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let t = load_idx_images(&path).unwrap();
        assert_eq!(t.data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn byte_rounding() {
        assert_eq!(pixel_to_byte(1.0), 255);
        assert_eq!(pixel_to_byte(0.0), 0);
        assert_eq!(pixel_to_byte(0.5), 128);
        for b in 0..=255u8 {
            assert_eq!(pixel_to_byte(b as f32 / 255.0), b);
        }
    }
}
