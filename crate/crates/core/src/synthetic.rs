//! Seeded procedural color images with edges and texture, for tests and
//! demos.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{ColorSpace, PlanarImage};

type Rgb = [f64; 3];

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Box { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Box { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= hw && (-dx * sin + dy * cos).abs() <= hh
            }
            Shape::Triangle { pts } => {
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

enum Fill {
    Flat(Rgb),
    Grating { a: Rgb, b: Rgb, kx: f64, ky: f64, phase: f64 },
    Checker { a: Rgb, b: Rgb, period: f64, cos: f64, sin: f64 },
}

impl Fill {
    fn color(&self, x: f64, y: f64) -> Rgb {
        match *self {
            Fill::Flat(c) => c,
            Fill::Grating { a, b, kx, ky, phase } => {
                let t = 0.5 + 0.5 * (kx * x + ky * y + phase).sin();
                mix(a, b, t)
            }
            Fill::Checker { a, b, period, cos, sin } => {
                let (u, v) = (x * cos + y * sin, -x * sin + y * cos);
                let parity = ((u / period).floor() + (v / period).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random_range(20.0..235.0), rng.random_range(20.0..235.0), rng.random_range(20.0..235.0)]
}

/// Smooth value noise on a coarse lattice, bilinearly interpolated.
struct ValueNoise {
    lattice: Array2<f64>,
    cell: f64,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: f64) -> Self {
        let nx = (width as f64 / cell).ceil() as usize + 2;
        let ny = (height as f64 / cell).ceil() as usize + 2;
        Self { lattice: Array2::from_shape_fn((ny, nx), |_| rng.random_range(-1.0..1.0)), cell }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x / self.cell, y / self.cell);
        let (i, j) = (u.floor().max(0.0) as usize, v.floor().max(0.0) as usize);
        let (fu, fv) = (u - i as f64, v - j as f64);
        let (su, sv) = (fu * fu * (3.0 - 2.0 * fu), fv * fv * (3.0 - 2.0 * fv));
        let l = &self.lattice;
        let top = l[[j, i]] + su * (l[[j, i + 1]] - l[[j, i]]);
        let bottom = l[[j + 1, i]] + su * (l[[j + 1, i + 1]] - l[[j + 1, i]]);
        top + sv * (bottom - top)
    }
}

/// A `width × height` RGB scene: a shaded background with colored flat,
/// striped and checkered shapes plus a mild multi-octave texture. Values lie
/// in `[0, 255]`; the same seed always produces the same image.
pub fn textured_image(width: usize, height: usize, seed: u64) -> Result<PlanarImage> {
    if width == 0 || height == 0 {
        return Err(Error::dim("synthetic image must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let extent = w.min(h);

    let bg = (random_color(&mut rng), random_color(&mut rng));
    let bg_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let count = 6 + (width * height / 1500).min(18);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let size = rng.random_range(0.08..0.3) * extent;
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc { cx, cy, r: size },
            1 => {
                let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Box { cx, cy, hw: size, hh: size * rng.random_range(0.3..1.0), cos: a.cos(), sin: a.sin() }
            }
            _ => {
                let mut pt = || (cx + rng.random_range(-1.5..1.5) * size, cy + rng.random_range(-1.5..1.5) * size);
                Shape::Triangle { pts: [pt(), pt(), pt()] }
            }
        };
        let fill = match rng.random_range(0..4) {
            0 | 1 => Fill::Flat(random_color(&mut rng)),
            2 => {
                let period = rng.random_range(4.0..14.0);
                let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                Fill::Grating {
                    a: random_color(&mut rng),
                    b: random_color(&mut rng),
                    kx: k * a.cos(),
                    ky: k * a.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            }
            _ => {
                let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Fill::Checker {
                    a: random_color(&mut rng),
                    b: random_color(&mut rng),
                    period: rng.random_range(4.0..10.0),
                    cos: a.cos(),
                    sin: a.sin(),
                }
            }
        };
        layers.push((shape, fill));
    }
    let noise: Vec<(ValueNoise, f64)> = [(12.0, 10.0), (5.0, 6.0), (2.5, 3.0)]
        .iter()
        .map(|&(cell, amp)| (ValueNoise::new(&mut rng, width, height, cell), amp))
        .collect();
    let tint = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)];

    // 3×3 supersampling keeps the edges from aliasing.
    const SUB: usize = 3;
    let mut planes = vec![Array2::zeros((height, width)); 3];
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let fx = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let fy = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    let t = ((fx * bg_angle.cos() + fy * bg_angle.sin()) / extent).rem_euclid(1.0);
                    let mut c = mix(bg.0, bg.1, t);
                    for (shape, fill) in &layers {
                        if shape.contains(fx, fy) {
                            c = fill.color(fx, fy);
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let grain: f64 = noise.iter().map(|(n, amp)| amp * n.at(x as f64, y as f64)).sum();
            for k in 0..3 {
                let v = acc[k] / (SUB * SUB) as f64 + tint[k] * grain;
                planes[k][[y, x]] = v.clamp(0.0, 255.0);
            }
        }
    }
    PlanarImage::new(ColorSpace::Rgb, planes)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` to every sample,
/// clamping to `[0, 255]`.
pub fn add_gaussian_noise(img: &PlanarImage, sigma: f64, seed: u64) -> Result<PlanarImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("noise σ must be ≥ 0, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for c in 0..out.channels() {
        out.plane_mut(c).mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 255.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = textured_image(40, 30, 5).unwrap();
        let b = textured_image(40, 30, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height(), a.channels()), (40, 30, 3));
        assert!(a.planes().iter().all(|p| p.iter().all(|&v| (0.0..=255.0).contains(&v))));
        assert_ne!(a, textured_image(40, 30, 6).unwrap());
    }

    #[test]
    fn has_texture() {
        let img = textured_image(64, 64, 1).unwrap();
        for p in img.planes() {
            let mean = p.mean().unwrap();
            let var = p.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(var > 50.0, "variance {var}");
        }
    }

    #[test]
    fn noise_is_seeded() {
        let img = textured_image(16, 16, 2).unwrap();
        let a = add_gaussian_noise(&img, 4.0, 1).unwrap();
        assert_eq!(a, add_gaussian_noise(&img, 4.0, 1).unwrap());
        assert_ne!(a, img);
        assert_eq!(add_gaussian_noise(&img, 0.0, 1).unwrap(), img);
        assert!(add_gaussian_noise(&img, -1.0, 1).is_err());
    }
}
