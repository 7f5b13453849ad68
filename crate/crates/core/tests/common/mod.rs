#![allow(dead_code)]

use ndarray::{s, Array1};

use mccsr::dictionary::DictionaryPair;
use mccsr::image::{extract_feature_maps, plane_patch, resize_to, ColorSpace, PatchAccumulator, PatchGrid, PlanarImage};
use mccsr::solver::{lasso_solve, SolverConfig};

/// Reconstruction with every channel coded on its own, each patch a cold
/// LASSO solve. Matches the residual, jointly normalized patch model.
pub fn per_channel_baseline(lr: &PlanarImage, dict: &DictionaryPair, scale: usize, lambda: f64) -> PlanarImage {
    let side = dict.patch_side;
    let p = side * side;
    let q = dict.features * p;
    let up = resize_to(lr, lr.width() * scale, lr.height() * scale).unwrap();
    let features: Vec<_> = up.planes().iter().map(extract_feature_maps).collect();
    let grid = PatchGrid::new(up.width(), up.height(), side, side - 1).unwrap();
    let cfg = SolverConfig { max_iterations: 5000, tolerance: 1e-12, ..Default::default() };
    let mut acc = PatchAccumulator::new(3, up.width(), up.height(), side);
    for (row, col) in grid.origins() {
        let mut y = Vec::new();
        for f in &features {
            f.patch_into(row, col, side, &mut y);
        }
        let y = Array1::from_vec(y);
        let norm = y.dot(&y).sqrt();
        let mut patch = Vec::with_capacity(3 * p);
        for c in 0..3 {
            let bic = plane_patch(up.plane(c), row, col, side);
            if norm <= 1e-6 {
                patch.extend(bic);
                continue;
            }
            let yc = y.slice(s![c * q..(c + 1) * q]).to_owned() / norm;
            let x = lasso_solve(dict.lr.block(c).view(), yc.view(), lambda, &cfg).unwrap().x;
            let hr = dict.hr.block(c).dot(&x) * norm;
            patch.extend(bic.iter().zip(hr.iter()).map(|(b, h)| b + h));
        }
        acc.add(row, col, &patch);
    }
    acc.finish(ColorSpace::Rgb).unwrap().clamped()
}

pub fn max_abs_diff(a: &PlanarImage, b: &PlanarImage) -> f64 {
    a.planes()
        .iter()
        .zip(b.planes())
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}
