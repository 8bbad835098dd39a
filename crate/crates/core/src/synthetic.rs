//! Procedural test images: a few flat-colored layouts with mild noise, and
//! fully random images for graph tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// Number of distinct layouts [`scene`] cycles through.
pub const LAYOUTS: usize = 5;

type Rgb = [f64; 3];

fn palette(rng: &mut ChaCha8Rng, n: usize) -> Vec<Rgb> {
    // well separated hues at random brightness
    let offset: f64 = rng.random_range(0.0..1.0);
    (0..n)
        .map(|i| {
            let hue = (offset + i as f64 / n as f64).fract() * 6.0;
            let value: f64 = rng.random_range(0.55..0.95);
            let x = 1.0 - ((hue % 2.0) - 1.0).abs();
            let (r, g, b) = match hue as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r * value, g * value, b * value]
        })
        .collect()
}

/// Region index of pixel `(u, v)` in unit coordinates for each layout.
fn region(layout: usize, u: f64, v: f64) -> usize {
    let circle = |cx: f64, cy: f64, r: f64| (u - cx).powi(2) + (v - cy).powi(2) < r * r;
    match layout {
        // diagonal split with a disk
        0 => {
            if circle(0.62, 0.38, 0.2) {
                2
            } else {
                usize::from(u + v > 1.0)
            }
        }
        // vertical bands with a square
        1 => {
            if (0.35..0.65).contains(&u) && (0.55..0.85).contains(&v) {
                3
            } else {
                (u * 3.0).min(2.0) as usize
            }
        }
        // concentric rings
        2 => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            (r / 0.17).min(3.0) as usize
        }
        // quadrants with an ellipse
        3 => {
            if ((u - 0.5) / 0.3).powi(2) + ((v - 0.5) / 0.15).powi(2) < 1.0 {
                4
            } else {
                usize::from(u > 0.5) + 2 * usize::from(v > 0.5)
            }
        }
        // horizon with a sun
        _ => {
            if circle(0.25, 0.25, 0.12) {
                2
            } else if v > 0.6 + 0.08 * (u * 9.0).sin() {
                1
            } else {
                0
            }
        }
    }
}

/// Scene `index` (layout `index % LAYOUTS`) as a `[3, h, w]` image in `[0, 1]`.
pub fn scene<T: Real>(index: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let colors = palette(&mut rng, 5);
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let c = colors[region(index % LAYOUTS, u, v)];
            for ch in 0..3 {
                let noise: f64 = rng.random_range(-0.02..0.02);
                data[ch * plane + y * w + x] = T::of((c[ch] + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec([3, h, w], data).expect("sized from shape")
}

/// `count` scenes of one size.
pub fn scenes<T: Real>(count: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<T>> {
    (0..count).map(|i| scene(i, h, w, seed)).collect()
}

/// Independent uniform pixels.
pub fn random_image<T: Real>(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::rand_uniform([3, h, w], 0.0, 1.0, rng)
}

/// Flat blocks of random color, some repeated, so graphs often split into
/// several components.
pub fn blocky_image<T: Real>(h: usize, w: usize, blocks: usize, rng: &mut impl Rng) -> Tensor<T> {
    let colors: Vec<Rgb> = (0..blocks)
        .map(|_| {
            let bits: u8 = rng.random_range(0..8);
            [0, 1, 2].map(|c| f64::from((bits >> c) & 1))
        })
        .collect();
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let c = colors[(x * blocks / w).min(blocks - 1)];
            for ch in 0..3 {
                data[ch * plane + y * w + x] = T::of(c[ch]);
            }
        }
    }
    Tensor::from_vec([3, h, w], data).expect("sized from shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = scene::<f32>(3, 20, 24, 1);
        assert_eq!(a, scene::<f32>(3, 20, 24, 1));
        assert_ne!(a, scene::<f32>(3, 20, 24, 2));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.shape(), &[3, 20, 24]);
    }

    #[test]
    fn every_layout_has_several_regions() {
        for layout in 0..LAYOUTS {
            let mut seen = std::collections::BTreeSet::new();
            for y in 0..32 {
                for x in 0..32 {
                    seen.insert(region(layout, (x as f64 + 0.5) / 32.0, (y as f64 + 0.5) / 32.0));
                }
            }
            assert!(seen.len() >= 3, "layout {layout}: {seen:?}");
        }
    }
}
