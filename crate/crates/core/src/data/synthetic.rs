//! Procedural 28x28 ten-class glyph dataset for runs without downloads.
//!
//! Each class is a fixed set of strokes in a unit box; every sample applies a
//! seeded affine jitter, per-vertex noise, stroke width and ink level, then
//! rasterises with an anti-aliased distance falloff. Pixels are quantised to
//! bytes so the dataset round-trips through IDX exactly.

use rand::Rng;

use super::{Dataset, Split};
use crate::error::Result;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub const SIDE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let n = 20;
    (0..=n)
        .map(|i| {
            let t = from + (to - from) * i as f64 / n as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn templates(class: usize) -> Vec<Stroke> {
    use std::f64::consts::PI;
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.2, 0.3, 0.0, 2.0 * PI)],
        1 => vec![vec![(0.5, 0.2), (0.5, 0.8)], vec![(0.38, 0.32), (0.5, 0.2)]],
        2 => vec![vec![(0.3, 0.3), (0.4, 0.2), (0.6, 0.2), (0.7, 0.3), (0.7, 0.42), (0.3, 0.8), (0.72, 0.8)]],
        3 => vec![vec![(0.3, 0.2), (0.7, 0.2), (0.5, 0.45), (0.7, 0.58), (0.66, 0.76), (0.5, 0.82), (0.3, 0.76)]],
        4 => vec![vec![(0.62, 0.82), (0.62, 0.2), (0.28, 0.6), (0.76, 0.6)]],
        5 => vec![vec![(0.7, 0.2), (0.36, 0.2), (0.33, 0.46), (0.58, 0.44), (0.7, 0.6), (0.6, 0.8), (0.3, 0.78)]],
        6 => vec![vec![(0.66, 0.2), (0.42, 0.36), (0.33, 0.64)], ellipse(0.5, 0.64, 0.17, 0.16, 0.0, 2.0 * PI)],
        7 => vec![vec![(0.28, 0.2), (0.72, 0.2), (0.44, 0.82)], vec![(0.4, 0.5), (0.64, 0.5)]],
        8 => vec![ellipse(0.5, 0.33, 0.14, 0.13, 0.0, 2.0 * PI), ellipse(0.5, 0.65, 0.18, 0.17, 0.0, 2.0 * PI)],
        _ => vec![ellipse(0.5, 0.35, 0.16, 0.15, 0.0, 2.0 * PI), vec![(0.66, 0.35), (0.6, 0.82)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders one jittered sample of `class` into bytes.
fn render(class: usize, rng: &mut impl Rng) -> Vec<u8> {
    let scale = rng.gen_range(0.85..1.1);
    let angle: f64 = rng.gen_range(-0.2..0.2);
    let shear = rng.gen_range(-0.15..0.15);
    let (tx, ty) = (rng.gen_range(-0.07..0.07), rng.gen_range(-0.07..0.07));
    let width = rng.gen_range(1.4..2.6);
    let ink = rng.gen_range(0.75..1.0);
    let (sin, cos) = angle.sin_cos();

    let strokes: Vec<Stroke> = templates(class)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + rng.gen_range(-0.02..0.02) - 0.5, y + rng.gen_range(-0.02..0.02) - 0.5);
                    let x = x + shear * y;
                    let (x, y) = (scale * (cos * x - sin * y), scale * (sin * x + cos * y));
                    ((x + 0.5 + tx) * SIDE as f64, (y + 0.5 + ty) * SIDE as f64)
                })
                .collect()
        })
        .collect();

    let mut out = vec![0u8; SIDE * SIDE];
    for (i, px) in out.iter_mut().enumerate() {
        let p = ((i % SIDE) as f64 + 0.5, (i / SIDE) as f64 + 0.5);
        let d = strokes
            .iter()
            .flat_map(|s| s.windows(2).map(|w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let v = (1.0 - (d - width / 2.0)).clamp(0.0, 1.0) * ink;
        *px = (v * 255.0).round() as u8;
    }
    out
}

/// `n_per_class` samples of each class, interleaved (`label = i % 10`),
/// tagged as a training split. Use a different seed for a test split.
pub fn synthetic_dataset(seed: u64, n_per_class: usize) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(crate::Error::invalid("n_per_class must be at least 1"));
    }
    let n = n_per_class * 10;
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let mut rng = rng::stream(seed, &[tag::SYNTHETIC, i as u64]);
        pixels.extend(render(class, &mut rng).into_iter().map(|b| b as f32 / 255.0));
        labels.push(class);
    }
    Dataset::new(Tensor::new([n, 1, SIDE, SIDE], pixels)?, labels, Split::Train)
}
