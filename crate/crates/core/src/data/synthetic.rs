//! Procedural shapes dataset: class `k` is shape `k mod 4` painted with
//! palette colour `k / 4`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};

use super::{DatasetIndex, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Bar];

    /// Whether point `(x, y)` lies inside the shape of size `s` centred at `(cx, cy)`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, s: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= s && dy.abs() <= s,
            // apex at (cx, cy - s), base from (cx - s, cy + s) to (cx + s, cy + s)
            Shape::Triangle => dy <= s && dy >= -s && dx.abs() <= (dy + s) / 2.0,
            Shape::Bar => dx.abs() <= s && dy.abs() <= s / 3.0,
        }
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 60, 50],
    [60, 180, 75],
    [60, 100, 230],
    [240, 200, 40],
    [200, 70, 200],
    [70, 200, 210],
    [245, 130, 40],
    [240, 240, 240],
];

pub const MAX_CLASSES: usize = 4 * PALETTE.len();

pub fn class_shape(class: usize) -> Shape {
    Shape::ALL[class % 4]
}

pub fn class_color(class: usize) -> [f64; 3] {
    PALETTE[class / 4].map(|v| v as f64 / 255.0)
}

/// Pixel-centre rasterisation of one shape instance.
pub fn rasterize(shape: Shape, cx: f64, cy: f64, s: f64, h: usize, w: usize) -> BinaryMask {
    let data = (0..h * w)
        .map(|i| shape.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, cx, cy, s))
        .collect();
    BinaryMask::new(h, w, data)
}

fn paint(labels: &mut [Option<usize>], class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let side = h.min(w) as f64;
    let s = rng.random_range((side / 10.0).max(3.0)..=(side / 5.0).max(3.0));
    let cx = rng.random_range(s..=(w as f64 - s).max(s));
    let cy = rng.random_range(s..=(h as f64 - s).max(s));
    let m = rasterize(class_shape(class), cx, cy, s, h, w);
    for (l, &inside) in labels.iter_mut().zip(&m.data) {
        if inside {
            *l = Some(class);
        }
    }
}

/// Generates `images_per_class` images per class. Each holds 0–2 distractor
/// instances of other classes and then 1–3 instances of its own class on top.
/// Pixel values are multiples of 1/255 so the images survive PPM storage.
pub fn gen_synthetic(
    num_classes: usize,
    images_per_class: usize,
    (h, w): (usize, usize),
    seed: u64,
) -> Result<DatasetIndex> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::InvalidRange(format!("num_classes must lie in 1..={MAX_CLASSES}")));
    }
    if h % 4 != 0 || w % 4 != 0 || h < 16 || w < 16 {
        return Err(Error::NotDivisible { dim: if h % 4 != 0 { h } else { w }, factor: 4 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(num_classes * images_per_class);
    for class in 0..num_classes {
        for _ in 0..images_per_class {
            let mut labels = vec![None; h * w];
            let distractors = if num_classes > 1 { rng.random_range(0..=2) } else { 0 };
            for _ in 0..distractors {
                let other = (class + rng.random_range(1..num_classes)) % num_classes;
                paint(&mut labels, other, h, w, &mut rng);
            }
            for _ in 0..rng.random_range(1..=3) {
                paint(&mut labels, class, h, w, &mut rng);
            }
            let base: u8 = rng.random_range(40..=90);
            let mut data = Vec::with_capacity(h * w * 3);
            for l in &labels {
                match l {
                    Some(c) => data.extend(class_color(*c)),
                    None => {
                        let v = base + rng.random_range(0..=12u8);
                        data.extend([v as f64 / 255.0; 3]);
                    }
                }
            }
            let mut masks = BTreeMap::new();
            for c in 0..num_classes {
                let m = BinaryMask::new(h, w, labels.iter().map(|l| *l == Some(c)).collect());
                if !m.is_empty() {
                    masks.insert(c, m);
                }
            }
            records.push(Record { image: ImageTensor::new(h, w, data), masks });
        }
    }
    Ok(DatasetIndex { records })
}
