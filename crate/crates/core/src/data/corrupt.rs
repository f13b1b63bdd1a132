//! Seeded weather-like corruptions on CHW images in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Condition, Dataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Fog airlight.
pub const FOG_AIRLIGHT: f32 = 0.9;

/// Corrupts one CHW image. Intensity 0 is the identity for every
/// condition; the result is clamped to `[0, 1]`.
pub fn corrupt(
    image: &[f32],
    shape: [usize; 3],
    condition: Condition,
    intensity: f64,
    seed: u64,
) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::invalid(format!(
            "intensity {intensity} outside [0, 1]"
        )));
    }
    if image.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("corrupt", &shape, &[image.len()]));
    }
    let mut out = image.to_vec();
    if intensity == 0.0 {
        return Ok(out);
    }
    let k = intensity as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match condition {
        Condition::Clear => {}
        Condition::Fog => fog(&mut out, shape, k),
        Condition::Rain => rain(&mut out, shape, k, &mut rng),
        Condition::Snow => snow(&mut out, shape, k, &mut rng),
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn fog(img: &mut [f32], [c, h, w]: [usize; 3], k: f32) {
    let t = 1.0 - 0.8 * k;
    for v in img.iter_mut() {
        *v = t * *v + (1.0 - t) * FOG_AIRLIGHT;
    }
    // 3x3 box blur with replicated borders, mixed in proportionally.
    let mix = 0.6 * k;
    let src = img.to_vec();
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += plane[yy * w + xx];
                    }
                }
                let i = ci * h * w + y * w + x;
                img[i] = (1.0 - mix) * plane[y * w + x] + mix * acc / 9.0;
            }
        }
    }
}

fn blend_pixel(
    img: &mut [f32],
    [c, h, w]: [usize; 3],
    x: isize,
    y: isize,
    target: f32,
    alpha: f32,
) {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        return;
    }
    let (x, y) = (x as usize, y as usize);
    for ci in 0..c {
        let i = ci * h * w + y * w + x;
        img[i] = (1.0 - alpha) * img[i] + alpha * target;
    }
}

fn rain(img: &mut [f32], shape: [usize; 3], k: f32, rng: &mut ChaCha8Rng) {
    let [_, h, w] = shape;
    let dark = 1.0 - 0.35 * k;
    img.iter_mut().for_each(|v| *v *= dark);
    let area = (h * w) as f32 / 1024.0;
    let streaks = (110.0 * k * area).round() as usize;
    let slant: f32 = rng.random_range(-0.35..-0.1);
    for _ in 0..streaks {
        let x0 = rng.random_range(0.0..w as f32);
        let y0 = rng.random_range(-4.0..h as f32);
        let len = rng.random_range(4..10);
        let alpha = rng.random_range(0.45..0.75);
        for s in 0..len {
            let y = y0 + s as f32;
            let x = x0 + slant * s as f32;
            blend_pixel(
                img,
                shape,
                x.round() as isize,
                y.round() as isize,
                0.85,
                alpha,
            );
        }
    }
}

fn snow(img: &mut [f32], shape: [usize; 3], k: f32, rng: &mut ChaCha8Rng) {
    let [_, h, w] = shape;
    let white = 0.45 * k;
    img.iter_mut()
        .for_each(|v| *v = (1.0 - white) * *v + white * 0.95);
    let area = (h * w) as f32 / 1024.0;
    let flakes = (140.0 * k * area).round() as usize;
    for _ in 0..flakes {
        let x = rng.random_range(0..w) as isize;
        let y = rng.random_range(0..h) as isize;
        let alpha = rng.random_range(0.6..1.0);
        blend_pixel(img, shape, x, y, 1.0, alpha);
        if rng.random_bool(0.35) {
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                blend_pixel(img, shape, x + dx, y + dy, 1.0, alpha * 0.6);
            }
        }
    }
}

/// Applies `condition` to every image, each with its own derived seed.
pub fn corrupt_dataset(
    base: &Dataset,
    condition: Condition,
    intensity: f64,
    seed: u64,
) -> Result<Dataset> {
    let shape = base.image_shape();
    let mut data = Vec::with_capacity(base.images.len());
    for i in 0..base.len() {
        data.extend(corrupt(
            base.image(i),
            shape,
            condition,
            intensity,
            seed::derive(seed, i as u64),
        )?);
    }
    Ok(Dataset {
        images: Tensor::new(base.images.shape().to_vec(), data)?,
        labels: base.labels.clone(),
        num_classes: base.num_classes,
        condition,
        source: base.source.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes;

    const SHAPE: [usize; 3] = [3, 32, 32];

    fn sample() -> Vec<f32> {
        generate_shapes(1, 1, 32, 3).unwrap().images.into_data()
    }

    #[test]
    fn zero_intensity_is_identity() {
        let img = sample();
        for c in Condition::ALL {
            assert_eq!(corrupt(&img, SHAPE, c, 0.0, 1).unwrap(), img);
        }
        assert_eq!(corrupt(&img, SHAPE, Condition::Clear, 0.9, 1).unwrap(), img);
    }

    #[test]
    fn full_fog_on_constant_image() {
        for c in [0.0f32, 0.3, 1.0] {
            let img = vec![c; 3 * 32 * 32];
            let out = corrupt(&img, SHAPE, Condition::Fog, 1.0, 0).unwrap();
            let expected = 0.2 * c + 0.72;
            assert!(out.iter().all(|&v| (v - expected).abs() < 1e-6), "c = {c}");
        }
    }

    #[test]
    fn intensity_out_of_range() {
        let img = sample();
        assert!(corrupt(&img, SHAPE, Condition::Rain, 1.5, 0).is_err());
        assert!(corrupt(&img, SHAPE, Condition::Rain, -0.1, 0).is_err());
    }

    #[test]
    fn stochastic_conditions_depend_on_seed() {
        let img = sample();
        for c in [Condition::Rain, Condition::Snow] {
            let a = corrupt(&img, SHAPE, c, 0.6, 1).unwrap();
            let b = corrupt(&img, SHAPE, c, 0.6, 1).unwrap();
            let d = corrupt(&img, SHAPE, c, 0.6, 2).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, d);
        }
    }

    #[test]
    fn output_stays_in_unit_range() {
        let img = sample();
        for c in Condition::ALL {
            for k in [0.3, 0.7, 1.0] {
                let out = corrupt(&img, SHAPE, c, k, 4).unwrap();
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
