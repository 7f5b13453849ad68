//! Planar floating-point images and the patch machinery built on them.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Color space tag carried by every [`PlanarImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    Gray,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
        }
    }
}

/// A raster of one or three planes with samples nominally in `[0, 255]`.
///
/// Samples are kept unclamped; [`PlanarImage::to_rgb8`] clamps on export.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    space: ColorSpace,
    planes: Vec<Array2<f64>>,
}

impl PlanarImage {
    pub fn new(space: ColorSpace, planes: Vec<Array2<f64>>) -> Result<Self> {
        if planes.len() != space.channels() {
            return Err(Error::dim(format!(
                "{:?} needs {} planes, got {}",
                space,
                space.channels(),
                planes.len()
            )));
        }
        let dim = planes[0].dim();
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::dim("empty image"));
        }
        if planes.iter().any(|p| p.dim() != dim) {
            return Err(Error::dim("planes differ in size"));
        }
        if planes.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::param("non-finite sample"));
        }
        Ok(Self { space, planes })
    }

    /// An image whose every plane holds `value`.
    pub fn filled(space: ColorSpace, width: usize, height: usize, value: f64) -> Self {
        let planes = (0..space.channels())
            .map(|_| Array2::from_elem((height, width), value))
            .collect();
        Self { space, planes }
    }

    /// Build an image from a per-pixel closure returning one value per channel.
    pub fn from_fn(
        space: ColorSpace,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let planes = (0..space.channels())
            .map(|c| Array2::from_shape_fn((height, width), |(y, x)| f(c, x, y)))
            .collect();
        Self { space, planes }
    }

    pub fn width(&self) -> usize {
        self.planes[0].ncols()
    }

    pub fn height(&self) -> usize {
        self.planes[0].nrows()
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn plane(&self, c: usize) -> &Array2<f64> {
        &self.planes[c]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut Array2<f64> {
        &mut self.planes[c]
    }

    pub fn planes(&self) -> &[Array2<f64>] {
        &self.planes
    }

    pub fn into_planes(self) -> Vec<Array2<f64>> {
        self.planes
    }

    /// Same pixels, different tag. Callers are responsible for the meaning.
    pub fn retag(mut self, space: ColorSpace) -> Result<Self> {
        if space.channels() != self.channels() {
            return Err(Error::dim("channel count does not match new tag"));
        }
        self.space = space;
        Ok(self)
    }

    pub fn clamped(&self) -> Self {
        let planes = self
            .planes
            .iter()
            .map(|p| p.mapv(|v| v.clamp(0.0, 255.0)))
            .collect();
        Self { space: self.space, planes }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels() == other.channels()
            && self.width() == other.width()
            && self.height() == other.height()
    }

    fn expect_space(&self, expected: ColorSpace) -> Result<()> {
        if self.space != expected {
            return Err(Error::ColorSpace { expected, found: self.space });
        }
        Ok(())
    }

    /// Import 8-bit interleaved RGB.
    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{}x{} RGB needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Self::new(
            ColorSpace::Rgb,
            (0..3)
                .map(|c| {
                    Array2::from_shape_fn((height, width), |(y, x)| {
                        f64::from(data[(y * width + x) * 3 + c])
                    })
                })
                .collect(),
        )
    }

    /// Export as 8-bit interleaved RGB, rounding and clamping to `[0, 255]`.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        self.expect_space(ColorSpace::Rgb)?;
        let (w, h) = (self.width(), self.height());
        let mut out = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] = self.planes[c][[y, x]].round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(out)
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = ::image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_rgb8()?;
        let buf = ::image::RgbImage::from_raw(self.width() as u32, self.height() as u32, bytes)
            .ok_or_else(|| Error::dim("buffer size"))?;
        buf.save_with_format(path.as_ref(), ::image::ImageFormat::Png)?;
        Ok(())
    }
}

const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

/// Full-range BT.601 RGB → YCbCr, no rounding.
pub fn rgb_to_ycbcr(img: &PlanarImage) -> Result<PlanarImage> {
    img.expect_space(ColorSpace::Rgb)?;
    let (r, g, b) = (&img.planes[0], &img.planes[1], &img.planes[2]);
    let luma = KR * r + KG * g + KB * b;
    let cb = (b - &luma).mapv(|v| 128.0 + 0.5 * v / (1.0 - KB));
    let cr = (r - &luma).mapv(|v| 128.0 + 0.5 * v / (1.0 - KR));
    Ok(PlanarImage { space: ColorSpace::YCbCr, planes: vec![luma, cb, cr] })
}

/// Algebraic inverse of [`rgb_to_ycbcr`].
pub fn ycbcr_to_rgb(img: &PlanarImage) -> Result<PlanarImage> {
    img.expect_space(ColorSpace::YCbCr)?;
    let (luma, cb, cr) = (&img.planes[0], &img.planes[1], &img.planes[2]);
    let r = luma + &cr.mapv(|v| 2.0 * (1.0 - KR) * (v - 128.0));
    let b = luma + &cb.mapv(|v| 2.0 * (1.0 - KB) * (v - 128.0));
    let g = (luma - &(KR * &r) - &(KB * &b)) / KG;
    Ok(PlanarImage { space: ColorSpace::Rgb, planes: vec![r, g, b] })
}

/// Luma of an RGB image (or the plane itself for gray).
pub fn luma(img: &PlanarImage) -> Result<Array2<f64>> {
    match img.space {
        ColorSpace::Gray => Ok(img.planes[0].clone()),
        ColorSpace::YCbCr => Ok(img.planes[0].clone()),
        ColorSpace::Rgb => Ok(KR * &img.planes[0] + KG * &img.planes[1] + KB * &img.planes[2]),
    }
}

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output sample: the clamped source taps and their normalized weights.
fn resample_taps(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src_len as f64 / dst_len as f64;
    // Widen the kernel when shrinking so the filter also band-limits.
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..dst_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            let mut total = 0.0;
            for j in lo..=hi {
                let w = cubic_kernel((center - j as f64) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, src_len as i64 - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

fn resample_plane(plane: &Array2<f64>, width: usize, height: usize) -> Array2<f64> {
    let (h0, w0) = plane.dim();
    let xt = resample_taps(w0, width);
    let yt = resample_taps(h0, height);
    let mut horizontal = Array2::<f64>::zeros((h0, width));
    for y in 0..h0 {
        for (x, taps) in xt.iter().enumerate() {
            horizontal[[y, x]] = taps.iter().map(|&(k, w)| w * plane[[y, k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((height, width));
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..width {
            out[[y, x]] = taps.iter().map(|&(k, w)| w * horizontal[[k, x]]).sum();
        }
    }
    out
}

/// Separable bicubic resampling to `round(scale · dims)`.
pub fn bicubic_resize(img: &PlanarImage, scale: f64) -> Result<PlanarImage> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::param(format!("scale must be positive, got {scale}")));
    }
    let width = (img.width() as f64 * scale).round() as usize;
    let height = (img.height() as f64 * scale).round() as usize;
    resize_to(img, width, height)
}

/// Bicubic resampling to explicit output dimensions.
pub fn resize_to(img: &PlanarImage, width: usize, height: usize) -> Result<PlanarImage> {
    if width == 0 || height == 0 {
        return Err(Error::dim("resize produces an empty image"));
    }
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    let planes = img.planes.iter().map(|p| resample_plane(p, width, height)).collect();
    Ok(PlanarImage { space: img.space, planes })
}

/// Correlate each row (`horizontal`) or column with a 1-D kernel centred on
/// its middle tap, replicating the border.
pub(crate) fn correlate_1d(plane: &Array2<f64>, kernel: &[f64], horizontal: bool) -> Array2<f64> {
    let (h, w) = plane.dim();
    let half = (kernel.len() / 2) as i64;
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let off = k as i64 - half;
                let (yy, xx) = if horizontal {
                    (y as i64, (x as i64 + off).clamp(0, w as i64 - 1))
                } else {
                    ((y as i64 + off).clamp(0, h as i64 - 1), x as i64)
                };
                c * plane[[yy as usize, xx as usize]]
            })
            .sum()
    })
}

/// First- and second-order gradient kernels used for the LR features.
pub const GRADIENT_KERNEL: [f64; 3] = [-1.0, 0.0, 1.0];
pub const LAPLACE_KERNEL: [f64; 5] = [1.0, 0.0, -2.0, 0.0, 1.0];

/// Number of gradient maps produced per channel.
pub const FEATURE_MAPS: usize = 4;

/// The four signed gradient maps of one channel, in the order
/// horizontal first-order, vertical first-order, horizontal second-order,
/// vertical second-order.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub maps: [Array2<f64>; FEATURE_MAPS],
}

impl FeatureStack {
    /// Features of the `side × side` patch at `(row, col)`, appended to `out`:
    /// map by map, each map vectorized column-major.
    pub fn patch_into(&self, row: usize, col: usize, side: usize, out: &mut Vec<f64>) {
        for map in &self.maps {
            for x in col..col + side {
                for y in row..row + side {
                    out.push(map[[y, x]]);
                }
            }
        }
    }
}

pub fn extract_feature_maps(plane: &Array2<f64>) -> FeatureStack {
    FeatureStack {
        maps: [
            correlate_1d(plane, &GRADIENT_KERNEL, true),
            correlate_1d(plane, &GRADIENT_KERNEL, false),
            correlate_1d(plane, &LAPLACE_KERNEL, true),
            correlate_1d(plane, &LAPLACE_KERNEL, false),
        ],
    }
}

/// Geometry of a square, overlapping patch tiling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub side: usize,
    pub overlap: usize,
    pub width: usize,
    pub height: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn grid_offsets(len: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - side).step_by(stride).collect();
    if *v.last().unwrap() + side < len {
        v.push(len - side);
    }
    v
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, side: usize, overlap: usize) -> Result<Self> {
        if side == 0 || overlap >= side {
            return Err(Error::param(format!("patch side {side} with overlap {overlap}")));
        }
        if side > width || side > height {
            return Err(Error::dim(format!(
                "patch side {side} exceeds image {width}x{height}"
            )));
        }
        let stride = side - overlap;
        Ok(Self {
            side,
            overlap,
            width,
            height,
            rows: grid_offsets(height, side, stride),
            cols: grid_offsets(width, side, stride),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn grid_cols(&self) -> usize {
        self.cols.len()
    }

    /// `(row, col)` origin of every patch, row-major.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }

    pub fn row_origins(&self) -> &[usize] {
        &self.rows
    }

    pub fn col_origins(&self) -> &[usize] {
        &self.cols
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.side * self.side
    }
}

/// Column-major vector of one plane's `side × side` block.
pub fn plane_patch(plane: &Array2<f64>, row: usize, col: usize, side: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(side * side);
    for x in col..col + side {
        for y in row..row + side {
            v.push(plane[[y, x]]);
        }
    }
    v
}

/// Vectorize every grid patch, channels concatenated in plane order.
pub fn extract_patches(img: &PlanarImage, side: usize, overlap: usize) -> Result<(Vec<Vec<f64>>, PatchGrid)> {
    let grid = PatchGrid::new(img.width(), img.height(), side, overlap)?;
    let patches = grid
        .origins()
        .map(|(r, c)| {
            let mut v = Vec::with_capacity(side * side * img.channels());
            for p in &img.planes {
                v.extend(plane_patch(p, r, c, side));
            }
            v
        })
        .collect();
    Ok((patches, grid))
}

/// Accumulates overlapping patch estimates and averages them per pixel.
#[derive(Debug, Clone)]
pub struct PatchAccumulator {
    sums: Vec<Array2<f64>>,
    counts: Array2<f64>,
    side: usize,
}

impl PatchAccumulator {
    pub fn new(channels: usize, width: usize, height: usize, side: usize) -> Self {
        Self {
            sums: (0..channels).map(|_| Array2::zeros((height, width))).collect(),
            counts: Array2::zeros((height, width)),
            side,
        }
    }

    /// Add one channel-concatenated, column-major patch at `(row, col)`.
    pub fn add(&mut self, row: usize, col: usize, patch: &[f64]) {
        let s = self.side;
        for (c, sum) in self.sums.iter_mut().enumerate() {
            let block = &patch[c * s * s..(c + 1) * s * s];
            for dx in 0..s {
                for dy in 0..s {
                    sum[[row + dy, col + dx]] += block[dx * s + dy];
                }
            }
        }
        for dx in 0..s {
            for dy in 0..s {
                self.counts[[row + dy, col + dx]] += 1.0;
            }
        }
    }

    pub fn finish(self, space: ColorSpace) -> Result<PlanarImage> {
        if self.counts.iter().any(|&n| n == 0.0) {
            return Err(Error::dim("patches leave pixels uncovered"));
        }
        let planes = self.sums.into_iter().map(|s| s / &self.counts).collect();
        PlanarImage::new(space, planes)
    }
}

/// Inverse of [`extract_patches`]: average every patch estimate per pixel.
pub fn assemble_patches(patches: &[Vec<f64>], grid: &PatchGrid, space: ColorSpace) -> Result<PlanarImage> {
    if patches.len() != grid.len() {
        return Err(Error::dim(format!(
            "grid holds {} patches, got {}",
            grid.len(),
            patches.len()
        )));
    }
    let want = grid.pixels_per_patch() * space.channels();
    let mut acc = PatchAccumulator::new(space.channels(), grid.width, grid.height, grid.side);
    for (patch, (r, c)) in patches.iter().zip(grid.origins()) {
        if patch.len() != want {
            return Err(Error::dim(format!("patch length {} != {}", patch.len(), want)));
        }
        acc.add(r, c, patch);
    }
    acc.finish(space)
}
