//! Procedural HR images with edges, flat regions and oriented texture, for
//! runs that have no image folder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::Image;

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { cy: f64, cx: f64, hh: f64, hw: f64, cos: f64, sin: f64 },
    Grating { fy: f64, fx: f64, phase: f64 },
}

impl Shape {
    /// Coverage in [0, 1] with a one-pixel soft edge.
    fn coverage(&self, y: f64, x: f64) -> f64 {
        let edge = |d: f64| (0.5 - d).clamp(0.0, 1.0);
        match *self {
            Shape::Disc { cy, cx, r } => edge(((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r),
            Shape::Rect { cy, cx, hh, hw, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                edge((u.abs() - hw).max(v.abs() - hh))
            }
            Shape::Grating { fy, fx, phase } => 0.5 + 0.5 * (fy * y + fx * x + phase).sin(),
        }
    }
}

/// One RGB image in `[0, 1]`, a pure function of `(height, width, seed)`.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let (h, w) = (height as f64, width as f64);
    let corner = [color(&mut rng), color(&mut rng), color(&mut rng)];
    let mut layers = Vec::new();
    let count = 6 + rng.random_range(0..6);
    for _ in 0..count {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc { cy: rng.random::<f64>() * h, cx: rng.random::<f64>() * w, r: (0.05 + 0.25 * rng.random::<f64>()) * h.min(w) },
            1 => {
                let a = rng.random::<f64>() * std::f64::consts::PI;
                Shape::Rect {
                    cy: rng.random::<f64>() * h,
                    cx: rng.random::<f64>() * w,
                    hh: (0.05 + 0.2 * rng.random::<f64>()) * h,
                    hw: (0.05 + 0.2 * rng.random::<f64>()) * w,
                    cos: a.cos(),
                    sin: a.sin(),
                }
            }
            _ => {
                let a = rng.random::<f64>() * std::f64::consts::PI;
                let period = 3.0 + 9.0 * rng.random::<f64>();
                let f = std::f64::consts::TAU / period;
                Shape::Grating { fy: f * a.sin(), fx: f * a.cos(), phase: rng.random::<f64>() * std::f64::consts::TAU }
            }
        };
        let alpha = if matches!(shape, Shape::Grating { .. }) { 0.2 + 0.3 * rng.random::<f64>() } else { 0.6 + 0.4 * rng.random::<f64>() };
        layers.push((shape, color(&mut rng), alpha));
    }
    let mut img = Image::filled(3, height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64 / h.max(1.0), x as f64 / w.max(1.0));
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = corner[0][c] * (1.0 - fy) * (1.0 - fx) + corner[1][c] * fy + corner[2][c] * fx * (1.0 - fy);
            }
            for (shape, col, alpha) in &layers {
                let a = alpha * shape.coverage(y as f64 + 0.5, x as f64 + 0.5);
                for c in 0..3 {
                    px[c] = (1.0 - a) * px[c] + a * col[c];
                }
            }
            for (c, p) in px.iter().enumerate() {
                img.set(c, y, x, p.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// `n` images with seeds derived from `seed`.
pub fn synthetic_pool(n: usize, height: usize, width: usize, seed: u64) -> Vec<Image> {
    (0..n as u64).map(|i| synthetic_image(height, width, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_range_and_textured() {
        let a = synthetic_image(40, 48, 3);
        assert_eq!(a, synthetic_image(40, 48, 3));
        assert_ne!(a, synthetic_image(40, 48, 4));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let m = a.mean();
        let var = a.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.data().len() as f64;
        assert!(var > 1e-3);
    }
}
