//! PSNR, SSIM and S-CIELAB.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::image::{luma, ColorSpace, PlanarImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub scielab_total: f64,
}

pub const DEFAULT_SAMPLES_PER_DEGREE: f64 = 23.0;

fn check_pair(a: &PlanarImage, b: &PlanarImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

fn require_rgb(img: &PlanarImage) -> Result<()> {
    if img.space() != ColorSpace::Rgb {
        return Err(Error::ColorSpace { expected: ColorSpace::Rgb, found: img.space() });
    }
    Ok(())
}

/// Mean squared error pooled over every channel.
pub fn mse(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    check_pair(a, b)?;
    let mut total = 0.0;
    for (pa, pb) in a.planes().iter().zip(b.planes()) {
        total += Zip::from(pa).and(pb).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    }
    Ok(total / (a.width() * a.height() * a.channels()) as f64)
}

/// `10·log10(255² / MSE)`; `+∞` for identical images.
pub fn psnr(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / e).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable correlation keeping only fully covered positions.
fn filter_valid(plane: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, x)| (0..n).map(|k| taps[k] * plane[[y, x + k]]).sum());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..n).map(|k| taps[k] * rows[[y + k, x]]).sum())
}

fn ssim_planes(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&(a * a), &taps);
    let bb = filter_valid(&(b * b), &taps);
    let ab = filter_valid(&(a * b), &taps);
    let mut total = 0.0;
    Zip::from(&mu_a).and(&mu_b).and(&aa).and(&bb).and(&ab).for_each(|&ma, &mb, &xx, &yy, &xy| {
        let (va, vb, cov) = (xx - ma * ma, yy - mb * mb, xy - ma * mb);
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    });
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM of the luma planes (or the single plane of a gray image).
pub fn ssim(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    check_pair(a, b)?;
    let plane = |img: &PlanarImage| -> Result<Array2<f64>> {
        match img.space() {
            ColorSpace::Rgb => luma(img),
            _ => Ok(img.plane(0).clone()),
        }
    };
    ssim_planes(&plane(a)?, &plane(b)?)
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_OPP: [[f64; 3]; 3] = [[0.279, 0.72, -0.107], [-0.449, 0.29, -0.077], [0.086, -0.59, 0.501]];
const D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

/// Spreads (degrees of visual angle) and weights of the three opponent
/// channel filters.
const FILTERS: [&[(f64, f64)]; 3] = [
    &[(0.05, 0.921), (0.225, 0.105), (7.0, -0.108)],
    &[(0.0685, 0.531), (0.826, 0.330)],
    &[(0.0920, 0.488), (0.6451, 0.371)],
];

fn srgb_to_linear(v: f64) -> f64 {
    let c = (v / 255.0).clamp(0.0, 1.0);
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn opp_to_xyz() -> [[f64; 3]; 3] {
    let m = nalgebra::Matrix3::from_fn(|i, j| XYZ_TO_OPP[i][j]);
    let inv = m.try_inverse().expect("opponent transform is invertible");
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = inv[(i, j)];
        }
    }
    out
}

fn opponent_planes(img: &PlanarImage) -> [Array2<f64>; 3] {
    let (h, w) = (img.height(), img.width());
    let mut out = [Array2::zeros((h, w)), Array2::zeros((h, w)), Array2::zeros((h, w))];
    for y in 0..h {
        for x in 0..w {
            let rgb = [0, 1, 2].map(|c| srgb_to_linear(img.plane(c)[[y, x]]));
            let opp = mat3(&XYZ_TO_OPP, mat3(&RGB_TO_XYZ, rgb));
            for c in 0..3 {
                out[c][[y, x]] = opp[c];
            }
        }
    }
    out
}

/// Same-size separable correlation with replicated borders.
fn filter_same(plane: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let half = (taps.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let rows: Array2<f64> = Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter().enumerate().map(|(k, t)| t * plane[[y, clampi(x as i64 + k as i64 - half, w)]]).sum()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter().enumerate().map(|(k, t)| t * rows[[clampi(y as i64 + k as i64 - half, h), x]]).sum()
    })
}

fn spatial_filter(plane: &Array2<f64>, filters: &[(f64, f64)], spd: f64) -> Array2<f64> {
    let half = (spd / 2.0).ceil() as usize;
    let len = 2 * half + 1;
    let total: f64 = filters.iter().map(|f| f.1).sum();
    let mut out = Array2::zeros(plane.dim());
    for &(spread, weight) in filters {
        let s = spread * spd;
        let c = half as f64;
        // exp(−x²/s²), normalized to unit sum.
        let taps: Vec<f64> = (0..len).map(|i| (-((i as f64 - c) / s).powi(2)).exp()).collect();
        let norm: f64 = taps.iter().sum();
        let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
        out.scaled_add(weight / total, &filter_same(plane, &taps));
    }
    out
}

fn lab_f(t: f64) -> f64 {
    const E: f64 = 216.0 / 24389.0;
    const K: f64 = 24389.0 / 27.0;
    if t > E {
        t.cbrt()
    } else {
        (K * t + 16.0) / 116.0
    }
}

fn xyz_to_lab(xyz: [f64; 3]) -> [f64; 3] {
    let f = [lab_f(xyz[0] / D65[0]), lab_f(xyz[1] / D65[1]), lab_f(xyz[2] / D65[2])];
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

fn scielab_lab(img: &PlanarImage, spd: f64) -> Vec<[f64; 3]> {
    let inv = opp_to_xyz();
    let filtered: Vec<Array2<f64>> =
        opponent_planes(img).iter().zip(FILTERS.iter()).map(|(p, f)| spatial_filter(p, f, spd)).collect();
    let mut out = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let opp = [filtered[0][[y, x]], filtered[1][[y, x]], filtered[2][[y, x]]];
            out.push(xyz_to_lab(mat3(&inv, opp)));
        }
    }
    out
}

/// Spatial CIELAB error: per-pixel ΔE*ab after opponent-space filtering,
/// summed over the image.
pub fn scielab(a: &PlanarImage, b: &PlanarImage, samples_per_degree: f64) -> Result<f64> {
    check_pair(a, b)?;
    require_rgb(a)?;
    require_rgb(b)?;
    if !(samples_per_degree > 0.0) || !samples_per_degree.is_finite() {
        return Err(Error::param(format!("samples per degree must be > 0, got {samples_per_degree}")));
    }
    if a == b {
        return Ok(0.0);
    }
    let la = scielab_lab(a, samples_per_degree);
    let lb = scielab_lab(b, samples_per_degree);
    Ok(la
        .iter()
        .zip(&lb)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum())
}

/// Plain CIELAB ΔE*ab between two sRGB colors.
pub fn delta_e(a: [f64; 3], b: [f64; 3]) -> f64 {
    let lab = |c: [f64; 3]| xyz_to_lab(mat3(&RGB_TO_XYZ, c.map(srgb_to_linear)));
    let (p, q) = (lab(a), lab(b));
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

pub fn evaluate(reference: &PlanarImage, test: &PlanarImage, samples_per_degree: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(reference, test)?,
        ssim: ssim(reference, test)?,
        scielab_total: scielab(reference, test, samples_per_degree)?,
    })
}
