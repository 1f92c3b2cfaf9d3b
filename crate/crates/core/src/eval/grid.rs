//! Tiled grayscale image grids as binary PGM (P5).

use std::fs;
use std::path::Path;

use crate::data::pixel_to_byte;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tiles `images` (`N x 1 x H x W`) row-major into a `rows x cols` grid with
/// 1-pixel white separators. Cells past the last image stay black.
pub fn grid_pgm(images: &Tensor<f32>, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let &[n, 1, h, w] = images.shape() else {
        return Err(Error::invalid(format!("grid needs N x 1 x H x W images, got {:?}", images.shape())));
    };
    if rows == 0 || cols == 0 || rows * cols < n {
        return Err(Error::invalid(format!("{rows}x{cols} grid cannot hold {n} images")));
    }
    let width = cols * w + cols - 1;
    let height = rows * h + rows - 1;
    let mut pixels = vec![255u8; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            for y in 0..h {
                let dst = (r * (h + 1) + y) * width + c * (w + 1);
                let row = &mut pixels[dst..dst + w];
                if idx < n {
                    for (d, &v) in row.iter_mut().zip(&images.example(idx)[y * w..(y + 1) * w]) {
                        *d = pixel_to_byte(v);
                    }
                } else {
                    row.fill(0);
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn render_grid(images: &Tensor<f32>, rows: usize, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, grid_pgm(images, rows, cols)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_black_tile() {
        let out = grid_pgm(&Tensor::zeros([1, 1, 28, 28]), 1, 1).unwrap();
        let mut expected = b"P5\n28 28\n255\n".to_vec();
        expected.extend([0u8; 784]);
        assert_eq!(out, expected);
    }

    #[test]
    fn separators_and_size() {
        let imgs = Tensor::full([10, 1, 28, 28], 1.0f32);
        let out = grid_pgm(&imgs, 2, 5).unwrap();
        let header = format!("P5\n{} {}\n255\n", 5 * 28 + 4, 2 * 28 + 1);
        assert!(out.starts_with(header.as_bytes()));
        assert_eq!(out.len(), header.len() + (5 * 28 + 4) * (2 * 28 + 1));
        assert!(out[header.len()..].iter().all(|&b| b == 255));
        assert!(grid_pgm(&imgs, 3, 3).is_err());
    }

    #[test]
    fn white_separator_between_black_tiles() {
        let out = grid_pgm(&Tensor::zeros([2, 1, 2, 2]), 1, 2).unwrap();
        let body = &out[b"P5\n5 2\n255\n".len()..];
        assert_eq!(body, &[0, 0, 255, 0, 0, 0, 0, 255, 0, 0]);
    }
}
