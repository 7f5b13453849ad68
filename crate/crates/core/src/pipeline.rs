//! Color super-resolution: color-variance driven τ, joint coding per patch
//! and overlap averaging, plus training pair generation.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dictionary::{DictionaryPair, TrainingSet};
use crate::error::{Error, Result};
use crate::image::{
    extract_feature_maps, plane_patch, resize_to, rgb_to_ycbcr, ColorSpace, FeatureStack, PatchAccumulator, PatchGrid,
    PlanarImage, FEATURE_MAPS,
};
use crate::operators::{build_edge_operator, edge_discrepancy, EdgeOperator, JointCurvature, JointQuadratic};
use crate::solver::{fista_solve_with_lipschitz, largest_eigenvalue, SolverConfig};
use crate::synthetic::add_gaussian_noise;

pub const DEFAULT_PATCH_SIDE: usize = 5;
pub const DEFAULT_OVERLAP: usize = 4;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 10.0;

/// Feature vectors shorter than this are treated as flat: their code is zero.
const FLAT_FEATURE_NORM: f64 = 1e-6;

/// What the HR dictionary models. Dictionaries must be used with the target
/// they were trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HrTarget {
    /// HR patch minus its bicubic estimate; reconstruction adds the code's
    /// output to the bicubic patch.
    #[default]
    Residual,
    /// HR patch minus its per-channel mean; reconstruction adds the code's
    /// output to the bicubic patch mean.
    MeanSubtracted,
}

/// How LR features and HR targets are expressed for coding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchModel {
    pub target: HrTarget,
    /// Scale each pair by the norm of its LR features before coding.
    pub normalize: bool,
}

impl Default for PatchModel {
    fn default() -> Self {
        Self { target: HrTarget::Residual, normalize: true }
    }
}

/// Logistic map from color variance `β` to the edge weight `τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauMap {
    pub tau_max: f64,
    pub steepness: f64,
    pub midpoint: f64,
}

impl Default for TauMap {
    fn default() -> Self {
        Self { tau_max: 0.1, steepness: 10.0, midpoint: 0.5 }
    }
}

impl TauMap {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_max >= 0.0) || !(self.steepness >= 0.0) || !self.midpoint.is_finite() {
            return Err(Error::param("τ map needs τ_max ≥ 0, steepness ≥ 0 and a finite midpoint"));
        }
        Ok(())
    }
}

/// `τ_max / (1 + exp(−k(β − β₀)))`
pub fn beta_to_tau(beta: f64, map: &TauMap) -> f64 {
    map.tau_max / (1.0 + (-map.steepness * (beta - map.midpoint)).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrConfig {
    pub scale: usize,
    /// Patch side on the upscaled grid.
    pub patch_side: usize,
    pub overlap: usize,
    pub lambda: f64,
    pub tau_map: TauMap,
    /// Normalizer `s` of the color variance measure.
    pub beta_normalizer: f64,
    /// When set, `λ = σ/10` and `τ` is multiplied by `noise_tau_factor`.
    pub noise_sigma: Option<f64>,
    pub noise_tau_factor: f64,
    /// Use this `τ` for every patch instead of the color-variance map.
    pub tau_override: Option<f64>,
    pub model: PatchModel,
    pub solver: SolverConfig,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            patch_side: DEFAULT_PATCH_SIDE,
            overlap: DEFAULT_OVERLAP,
            lambda: 0.1,
            tau_map: TauMap::default(),
            beta_normalizer: 1.0,
            noise_sigma: None,
            noise_tau_factor: 0.5,
            tau_override: None,
            model: PatchModel::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::param(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.patch_side == 0 || self.overlap >= self.patch_side {
            return Err(Error::param(format!("overlap {} must be below patch side {}", self.overlap, self.patch_side)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::param(format!("λ must be > 0, got {}", self.lambda)));
        }
        if !(self.beta_normalizer > 0.0) {
            return Err(Error::param("color variance normalizer must be > 0"));
        }
        if let Some(sigma) = self.noise_sigma {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::param(format!("noise σ must be > 0, got {sigma}")));
            }
        }
        if !(self.noise_tau_factor >= 0.0) {
            return Err(Error::param("noise τ factor must be ≥ 0"));
        }
        if let Some(t) = self.tau_override {
            if !(t >= 0.0) {
                return Err(Error::param(format!("τ must be ≥ 0, got {t}")));
            }
        }
        self.tau_map.validate()?;
        self.solver.validate()
    }

    pub fn effective_lambda(&self) -> f64 {
        match self.noise_sigma {
            Some(sigma) => sigma / 10.0,
            None => self.lambda,
        }
    }

    pub fn tau_for(&self, beta: f64) -> f64 {
        let tau = self.tau_override.unwrap_or_else(|| beta_to_tau(beta, &self.tau_map));
        match self.noise_sigma {
            Some(_) => tau * self.noise_tau_factor,
            None => tau,
        }
    }
}

const SCHARR: [[f64; 3]; 3] = [[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]];

/// `‖H ∗ plane‖₂` for the Scharr kernel (or its transpose), evaluated at every
/// patch pixel with the border replicated.
fn scharr_norm(plane: ArrayView2<f64>, transpose: bool) -> f64 {
    let (h, w) = plane.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in SCHARR.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    let k = if transpose { SCHARR[j][i] } else { k };
                    let yy = (y as i64 + i as i64 - 1).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + j as i64 - 1).clamp(0, w as i64 - 1) as usize;
                    acc += k * plane[[yy, xx]];
                }
            }
            acc /= 16.0;
            total += acc * acc;
        }
    }
    total.sqrt()
}

const BETA_GUARD: f64 = 1e-8;

fn beta_of_planes(y: ArrayView2<f64>, cb: ArrayView2<f64>, cr: ArrayView2<f64>, s: f64) -> f64 {
    let mut beta = 0.0;
    for transpose in [false, true] {
        let denom = scharr_norm(y, transpose);
        if denom >= BETA_GUARD {
            beta += (scharr_norm(cb, transpose) + scharr_norm(cr, transpose)) / denom;
        }
    }
    beta / (2.0 * s)
}

/// Color variance `β` of a YCbCr patch: chroma gradient energy relative to
/// luma gradient energy, in both directions. A direction with a vanishing
/// luma response contributes nothing.
pub fn color_variance_beta(patch: &PlanarImage, s: f64) -> Result<f64> {
    if patch.space() != ColorSpace::YCbCr {
        return Err(Error::ColorSpace { expected: ColorSpace::YCbCr, found: patch.space() });
    }
    if !(s > 0.0) {
        return Err(Error::param(format!("normalizer must be > 0, got {s}")));
    }
    Ok(beta_of_planes(patch.plane(0).view(), patch.plane(1).view(), patch.plane(2).view(), s))
}

/// Bicubic downsampling by an integer factor.
pub fn degrade(hr: &PlanarImage, scale: usize) -> Result<PlanarImage> {
    if scale == 0 {
        return Err(Error::param("scale must be ≥ 1"));
    }
    if !hr.width().is_multiple_of(scale) || !hr.height().is_multiple_of(scale) {
        return Err(Error::dim(format!("{}x{} is not divisible by {scale}", hr.width(), hr.height())));
    }
    let (w, h) = (hr.width() / scale, hr.height() / scale);
    if w < DEFAULT_PATCH_SIDE || h < DEFAULT_PATCH_SIDE {
        return Err(Error::dim(format!("degraded image {w}x{h} is smaller than a patch")));
    }
    resize_to(hr, w, h)
}

/// Crops to the largest size divisible by `scale`.
pub fn crop_to_multiple(img: &PlanarImage, scale: usize) -> Result<PlanarImage> {
    let (w, h) = (img.width() / scale * scale, img.height() / scale * scale);
    if w == img.width() && h == img.height() {
        return Ok(img.clone());
    }
    let planes = img.planes().iter().map(|p| p.slice(s![..h, ..w]).to_owned()).collect();
    PlanarImage::new(img.space(), planes)
}

fn check_dictionary(dict: &DictionaryPair, patch_side: usize) -> Result<()> {
    if dict.patch_side != patch_side {
        return Err(Error::dim(format!("dictionary patch side {} vs configured {patch_side}", dict.patch_side)));
    }
    if dict.features != FEATURE_MAPS {
        return Err(Error::dim(format!("dictionary uses {} feature maps, expected {FEATURE_MAPS}", dict.features)));
    }
    Ok(())
}

fn lr_vector(features: &[FeatureStack], row: usize, col: usize, side: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * FEATURE_MAPS * side * side);
    for f in features {
        f.patch_into(row, col, side, &mut v);
    }
    v
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Everything computed while super-resolving one image.
#[derive(Debug, Clone)]
pub struct SrReport {
    pub image: PlanarImage,
    /// The bicubic upscale the reconstruction starts from.
    pub bicubic: PlanarImage,
    pub grid: PatchGrid,
    /// Per grid patch, row-major.
    pub betas: Vec<f64>,
    pub taus: Vec<f64>,
    /// Reconstructed channel-stacked HR patches.
    pub patches: Vec<Vec<f64>>,
    pub converged: usize,
}

impl SrReport {
    /// Mean cross-channel edge discrepancy of the reconstructed patches.
    pub fn mean_edge_discrepancy(&self) -> Result<f64> {
        let s = build_edge_operator(self.grid.side)?;
        let total: f64 = self.patches.iter().map(|p| edge_discrepancy(&s, Array1::from_vec(p.clone()).view())).sum();
        Ok(total / self.patches.len() as f64)
    }
}

struct PatchOutcome {
    patch: Vec<f64>,
    beta: f64,
    tau: f64,
    converged: bool,
}

pub fn super_resolve(lr: &PlanarImage, dict: &DictionaryPair, cfg: &SrConfig) -> Result<PlanarImage> {
    Ok(super_resolve_detailed(lr, dict, cfg)?.image)
}

/// Upscales `lr` by `cfg.scale`, codes every grid patch jointly across the
/// three channels and averages the overlapping HR estimates. Patches along a
/// grid row are solved in order, each warm-started from its left neighbour;
/// rows run in parallel.
pub fn super_resolve_detailed(lr: &PlanarImage, dict: &DictionaryPair, cfg: &SrConfig) -> Result<SrReport> {
    cfg.validate()?;
    if lr.space() != ColorSpace::Rgb {
        return Err(Error::ColorSpace { expected: ColorSpace::Rgb, found: lr.space() });
    }
    check_dictionary(dict, cfg.patch_side)?;
    let side = cfg.patch_side;
    let p = side * side;
    let m = dict.atoms();
    let up = resize_to(lr, lr.width() * cfg.scale, lr.height() * cfg.scale)?;
    let grid = PatchGrid::new(up.width(), up.height(), side, cfg.overlap)?;
    let features: Vec<FeatureStack> = up.planes().iter().map(extract_feature_maps).collect();
    let ycc = rgb_to_ycbcr(&up)?;
    let s_op: EdgeOperator = build_edge_operator(side)?;
    let curvature = JointCurvature::new(&dict.lr, &dict.hr, &s_op)?;
    let data_eig = largest_eigenvalue(curvature.data().view())?;
    let edge_eig = largest_eigenvalue(curvature.edge().view())?;
    let lambda = cfg.effective_lambda();

    let solve_patch = |row: usize, col: usize, warm: &mut Array1<f64>| -> Result<PatchOutcome> {
        let planes: Vec<ArrayView2<f64>> =
            (0..3).map(|c| ycc.plane(c).slice(s![row..row + side, col..col + side])).collect();
        let beta = beta_of_planes(planes[0], planes[1], planes[2], cfg.beta_normalizer);
        let tau = cfg.tau_for(beta);
        let y = Array1::from_vec(lr_vector(&features, row, col, side));
        let norm = if cfg.model.normalize { y.dot(&y).sqrt() } else { 1.0 };
        let mut converged = true;
        let hr = if y.dot(&y).sqrt() <= FLAT_FEATURE_NORM {
            warm.fill(0.0);
            Array1::zeros(3 * p)
        } else {
            let y = y / norm;
            let problem = JointQuadratic {
                curvature: Arc::new(curvature.at(tau)),
                linear: dict.lr.apply_transpose(y.view()),
                constant: 0.5 * y.dot(&y),
                lambda,
            };
            // Weyl: λ_max(A + 2τB) ≤ λ_max(A) + 2τ λ_max(B).
            let lipschitz = cfg.solver.lipschitz_safety * 2.0 * (data_eig + 2.0 * tau * edge_eig);
            let r = fista_solve_with_lipschitz(&problem, &cfg.solver, Some(warm.view()), lipschitz)?;
            converged = r.converged;
            *warm = r.x;
            dict.hr.apply(warm.view()) * norm
        };
        let mut patch = Vec::with_capacity(3 * p);
        for c in 0..3 {
            let bic = plane_patch(up.plane(c), row, col, side);
            let base = mean(&bic);
            let block = hr.slice(s![c * p..(c + 1) * p]);
            match cfg.model.target {
                HrTarget::Residual => patch.extend(bic.iter().zip(block.iter()).map(|(b, h)| b + h)),
                HrTarget::MeanSubtracted => patch.extend(block.iter().map(|h| base + h)),
            }
        }
        Ok(PatchOutcome { patch, beta, tau, converged })
    };

    let rows: Vec<Vec<PatchOutcome>> = grid
        .row_origins()
        .par_iter()
        .map(|&row| {
            let mut warm = Array1::zeros(3 * m);
            grid.col_origins().iter().map(|&col| solve_patch(row, col, &mut warm)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut acc = PatchAccumulator::new(3, up.width(), up.height(), side);
    let mut report = SrReport {
        image: up.clone(),
        bicubic: up.clone(),
        grid: grid.clone(),
        betas: Vec::with_capacity(grid.len()),
        taus: Vec::with_capacity(grid.len()),
        patches: Vec::with_capacity(grid.len()),
        converged: 0,
    };
    for (outcomes, &row) in rows.into_iter().zip(grid.row_origins()) {
        for (o, &col) in outcomes.into_iter().zip(grid.col_origins()) {
            acc.add(row, col, &o.patch);
            report.betas.push(o.beta);
            report.taus.push(o.tau);
            report.converged += usize::from(o.converged);
            report.patches.push(o.patch);
        }
    }
    report.image = acc.finish(ColorSpace::Rgb)?.clamped();
    Ok(report)
}

/// What to sample from the training images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetConfig {
    pub scale: usize,
    pub patch_side: usize,
    pub samples: usize,
    pub seed: u64,
    /// Minimum mean per-channel variance of an HR patch, in 8-bit units.
    pub variance_threshold: f64,
    pub model: PatchModel,
    /// Gaussian noise added to the degraded images before upscaling, so the
    /// dictionaries learn to reconstruct from noisy inputs.
    pub noise_sigma: Option<f64>,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            patch_side: DEFAULT_PATCH_SIDE,
            samples: 100_000,
            seed: 0,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            model: PatchModel::default(),
            noise_sigma: None,
        }
    }
}

struct PreparedImage {
    hr: PlanarImage,
    up: PlanarImage,
    features: Vec<FeatureStack>,
}

fn patch_variance(img: &PlanarImage, row: usize, col: usize, side: usize) -> f64 {
    let total: f64 = img
        .planes()
        .iter()
        .map(|plane| {
            let v = plane_patch(plane, row, col, side);
            let mu = mean(&v);
            v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / v.len() as f64
        })
        .sum();
    total / img.channels() as f64
}

/// Aligned (LR feature, HR target) pairs sampled uniformly, without
/// replacement, from the textured locations of the training images. Each HR
/// image is cropped to a multiple of the scale, degraded and upscaled back.
pub fn build_training_set(hr_images: &[PlanarImage], cfg: &TrainingSetConfig) -> Result<TrainingSet> {
    if cfg.samples == 0 {
        return Err(Error::param("sample count must be ≥ 1"));
    }
    if !(2..=4).contains(&cfg.scale) {
        return Err(Error::param(format!("scale must be 2, 3 or 4, got {}", cfg.scale)));
    }
    let side = cfg.patch_side;
    let prepared: Vec<PreparedImage> = hr_images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            if img.space() != ColorSpace::Rgb {
                return Err(Error::ColorSpace { expected: ColorSpace::Rgb, found: img.space() });
            }
            let hr = crop_to_multiple(img, cfg.scale)?;
            let mut lr = degrade(&hr, cfg.scale)?;
            if let Some(sigma) = cfg.noise_sigma {
                lr = add_gaussian_noise(&lr, sigma, cfg.seed.wrapping_add(1 + k as u64))?;
            }
            let up = resize_to(&lr, hr.width(), hr.height())?;
            let features = up.planes().iter().map(extract_feature_maps).collect();
            Ok(PreparedImage { hr, up, features })
        })
        .collect::<Result<_>>()?;

    let mut candidates = Vec::new();
    for (k, img) in prepared.iter().enumerate() {
        if img.hr.width() < side || img.hr.height() < side {
            continue;
        }
        for row in 0..=img.hr.height() - side {
            for col in 0..=img.hr.width() - side {
                if patch_variance(&img.hr, row, col, side) < cfg.variance_threshold {
                    continue;
                }
                let y = lr_vector(&img.features, row, col, side);
                if y.iter().map(|v| v * v).sum::<f64>().sqrt() <= FLAT_FEATURE_NORM {
                    continue;
                }
                candidates.push((k, row, col));
            }
        }
    }
    if candidates.len() < cfg.samples {
        return Err(Error::InsufficientPatches { needed: cfg.samples, found: candidates.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = index::sample(&mut rng, candidates.len(), cfg.samples).into_vec();

    let p = side * side;
    let q = FEATURE_MAPS * p;
    let mut y_l = Array2::zeros((3 * q, cfg.samples));
    let mut y_h = Array2::zeros((3 * p, cfg.samples));
    for (i, &pick) in picks.iter().enumerate() {
        let (k, row, col) = candidates[pick];
        let img = &prepared[k];
        let mut l = Array1::from_vec(lr_vector(&img.features, row, col, side));
        let mut h = Array1::zeros(3 * p);
        for c in 0..3 {
            let hr = plane_patch(img.hr.plane(c), row, col, side);
            let target: Vec<f64> = match cfg.model.target {
                HrTarget::Residual => {
                    let bic = plane_patch(img.up.plane(c), row, col, side);
                    hr.iter().zip(&bic).map(|(a, b)| a - b).collect()
                }
                HrTarget::MeanSubtracted => hr,
            };
            let mu = mean(&target);
            for (j, v) in target.iter().enumerate() {
                h[c * p + j] = v - mu;
            }
        }
        if cfg.model.normalize {
            let norm = l.dot(&l).sqrt();
            l /= norm;
            h /= norm;
        }
        y_l.column_mut(i).assign(&l);
        y_h.column_mut(i).assign(&h);
    }
    TrainingSet::new(y_l, y_h)
}
