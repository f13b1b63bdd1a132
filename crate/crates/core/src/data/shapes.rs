use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Condition, Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Cross,
}

pub const SHAPE_CLASSES: [ShapeClass; 4] = [
    ShapeClass::Disk,
    ShapeClass::Square,
    ShapeClass::Triangle,
    ShapeClass::Cross,
];

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    /// Inside test in the shape's own frame, scaled so the shape fits in
    /// the unit disk.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            ShapeClass::Disk => x * x + y * y <= 0.85 * 0.85,
            ShapeClass::Square => x.abs() <= 0.68 && y.abs() <= 0.68,
            ShapeClass::Triangle => {
                // Equilateral, circumradius 1, apex up.
                let s3 = 3f64.sqrt();
                y >= -0.5 && s3 * x + y <= 1.0 && -s3 * x + y <= 1.0
            }
            ShapeClass::Cross => {
                let arm = 0.3;
                (x.abs() <= arm && y.abs() <= 0.95) || (y.abs() <= arm && x.abs() <= 0.95)
            }
        }
    }
}

const MIN_SIZE: usize = 16;

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Renders one image (CHW) of `class`, deterministic in `item_seed`.
fn render(class: ShapeClass, size: usize, item_seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let s = size as f64;

    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let grad_amp: f64 = rng.random_range(0.0..0.15);
    let stripe_freq: f64 = rng.random_range(0.2..0.8);
    let stripe_amp: f64 = rng.random_range(0.0..0.05);

    let mut fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    for _ in 0..16 {
        if (luminance(fg) - luminance(bg)).abs() >= 0.3 {
            break;
        }
        fg = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    }
    if (luminance(fg) - luminance(bg)).abs() < 0.3 {
        fg = if luminance(bg) > 0.5 {
            [0.05; 3]
        } else {
            [0.95; 3]
        };
    }

    let radius = rng.random_range(0.3 * s..0.42 * s);
    let margin = radius + 1.0;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let rot: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = rot.sin_cos();

    let hw = size * size;
    let mut img = vec![0f32; 3 * hw];
    let sub = [0.25, 0.75];
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0;
            for sy in sub {
                for sx in sub {
                    let dx = (px as f64 + sx - cx) / radius;
                    let dy = (py as f64 + sy - cy) / radius;
                    // Rotate into the shape frame; image y points down.
                    let x = cos * dx + sin * dy;
                    let y = -sin * dx + cos * dy;
                    if class.contains(x, -y) {
                        cover += 0.25;
                    }
                }
            }
            let u = px as f64 / s - 0.5;
            let v = py as f64 / s - 0.5;
            let shade = grad_amp * (u * grad_angle.cos() + v * grad_angle.sin())
                + stripe_amp * ((u + v) * s * stripe_freq).sin();
            for c in 0..3 {
                let noise = rng.random_range(-0.03..0.03);
                let back = bg[c] + shade + noise;
                let value = (1.0 - cover) * back + cover * (fg[c] + noise);
                img[c * hw + py * size + px] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Class-balanced shape images: item `i` has class `i % classes` and is
/// rendered from a seed derived from `(seed, i)`.
pub fn generate_shapes(
    num_per_class: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || classes > SHAPE_CLASSES.len() {
        return Err(Error::invalid(format!(
            "shape generator supports 1..={} classes, got {classes}",
            SHAPE_CLASSES.len()
        )));
    }
    if size < MIN_SIZE {
        return Err(Error::invalid(format!(
            "image size {size} too small for shapes (minimum {MIN_SIZE})"
        )));
    }
    let n = num_per_class * classes;
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        data.extend(render(
            SHAPE_CLASSES[label],
            size,
            seed::derive(seed, i as u64),
        ));
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, size, size], data)?,
        labels,
        num_classes: classes,
        condition: Condition::Clear,
        source: DatasetSource::Generated { seed },
    })
}
