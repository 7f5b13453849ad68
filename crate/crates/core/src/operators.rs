//! Block-structured linear algebra for joint RGB sparse coding.
//!
//! Codes are stacked `x = [x_r; x_g; x_b]` and every dictionary acts
//! block-diagonally on them. The cross-channel edge penalty
//!
//! ```text
//! τ · Σ_{(μ,ν) ∈ {(r,g),(g,b),(b,r)}} ‖S D_μ x_μ − S D_ν x_ν‖²
//! ```
//!
//! equals `2τ · xᵀ D_hᵀ Sᵀ (I − P_sᵀ) S D_h x`, where `P_s` cyclically shifts
//! the channel blocks. Everything here is immutable once built and can be
//! shared between worker threads.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Sparse `p × p` high-pass operator acting on a column-major vectorized
/// square patch.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeOperator {
    side: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

/// 3×3 discrete Laplacian `[0,−1,0; −1,4,−1; 0,−1,0]` with replicated patch
/// borders.
pub fn build_edge_operator(patch_side: usize) -> Result<EdgeOperator> {
    if patch_side < 2 {
        return Err(Error::param(format!("edge operator needs side ≥ 2, got {patch_side}")));
    }
    let n = patch_side;
    let idx = |x: usize, y: usize| x * n + y;
    let mut rows = Vec::with_capacity(n * n);
    for x in 0..n {
        for y in 0..n {
            let mut row: Vec<(usize, f64)> = vec![(idx(x, y), 4.0)];
            let neighbours = [
                (x, y.saturating_sub(1)),
                (x, (y + 1).min(n - 1)),
                (x.saturating_sub(1), y),
                ((x + 1).min(n - 1), y),
            ];
            for (nx, ny) in neighbours {
                let j = idx(nx, ny);
                match row.iter_mut().find(|(k, _)| *k == j) {
                    Some(e) => e.1 -= 1.0,
                    None => row.push((j, -1.0)),
                }
            }
            row.retain(|&(_, v)| v != 0.0);
            row.sort_by_key(|&(k, _)| k);
            rows.push(row);
        }
    }
    Ok(EdgeOperator { side: n, rows })
}

impl EdgeOperator {
    pub fn side(&self) -> usize {
        self.side
    }

    /// Patch length `p = side²`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(self.rows.iter().map(|row| row.iter().map(|&(j, w)| w * v[j]).sum()))
    }

    /// `S · M` for a dense `p × k` matrix.
    pub fn apply_matrix(&self, m: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), m.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, w) in row {
                o.scaled_add(w, &m.row(j));
            }
        }
        out
    }

    /// `Sᵀ · M` for a dense `p × k` matrix.
    pub fn apply_transpose_matrix(&self, m: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), m.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &m.row(i));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.len(), self.len()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                d[[i, j]] = w;
            }
        }
        d
    }
}

/// Block-cyclic permutation `(r, g, b) → (b, r, g)` on three blocks of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelShift {
    pub block: usize,
}

impl ChannelShift {
    pub fn new(block: usize) -> Self {
        Self { block }
    }

    /// Output block `k` takes input block `(k + 2) % 3`.
    pub fn apply_rows(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.block;
        if m.nrows() != 3 * n {
            return Err(Error::dim(format!("{} rows, expected {}", m.nrows(), 3 * n)));
        }
        let mut out = Array2::zeros(m.raw_dim());
        for k in 0..3 {
            let src = (k + 2) % 3;
            out.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&m.slice(s![src * n..(src + 1) * n, ..]));
        }
        Ok(out)
    }

    /// Inverse (= transpose) shift `(r, g, b) → (g, b, r)`.
    pub fn apply_transpose_rows(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        let once = self.apply_rows(m)?;
        self.apply_rows(once.view())
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        let m = v.insert_axis(Axis(1));
        Ok(self.apply_rows(m)?.remove_axis(Axis(1)))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let eye = Array2::eye(3 * self.block);
        self.apply_rows(eye.view()).expect("square by construction")
    }
}

/// Shift a channel-stacked vector `[x_r; x_g; x_b] → [x_b; x_r; x_g]`.
pub fn apply_channel_shift(v: &[f64]) -> Result<Vec<f64>> {
    if !v.len().is_multiple_of(3) {
        return Err(Error::dim(format!("length {} not divisible by 3", v.len())));
    }
    let n = v.len() / 3;
    let shifted = ChannelShift::new(n).apply(ArrayView1::from(v))?;
    Ok(shifted.to_vec())
}

/// Three per-channel dictionaries of equal shape, standing for the
/// block-diagonal `diag(D_r, D_g, D_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonalDictionary {
    blocks: [Array2<f64>; 3],
}

impl BlockDiagonalDictionary {
    pub fn new(blocks: [Array2<f64>; 3]) -> Result<Self> {
        let d = blocks[0].dim();
        if blocks.iter().any(|b| b.dim() != d) {
            return Err(Error::dim("channel dictionaries differ in shape"));
        }
        if d.0 == 0 || d.1 == 0 {
            return Err(Error::dim("empty dictionary"));
        }
        Ok(Self { blocks })
    }

    /// Rows per channel (`p` or `q`).
    pub fn rows(&self) -> usize {
        self.blocks[0].nrows()
    }

    /// Atoms per channel (`m`).
    pub fn atoms(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn block(&self, c: usize) -> &Array2<f64> {
        &self.blocks[c]
    }

    pub fn block_mut(&mut self, c: usize) -> &mut Array2<f64> {
        &mut self.blocks[c]
    }

    pub fn blocks(&self) -> &[Array2<f64>; 3] {
        &self.blocks
    }

    pub fn into_blocks(self) -> [Array2<f64>; 3] {
        self.blocks
    }

    /// `D x` for a stacked code of length `3m`.
    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let (p, m) = (self.rows(), self.atoms());
        let mut out = Array1::zeros(3 * p);
        for c in 0..3 {
            out.slice_mut(s![c * p..(c + 1) * p]).assign(&self.blocks[c].dot(&x.slice(s![c * m..(c + 1) * m])));
        }
        out
    }

    /// `Dᵀ y` for a stacked signal of length `3 · rows`.
    pub fn apply_transpose(&self, y: ArrayView1<f64>) -> Array1<f64> {
        let (p, m) = (self.rows(), self.atoms());
        let mut out = Array1::zeros(3 * m);
        for c in 0..3 {
            out.slice_mut(s![c * m..(c + 1) * m]).assign(&self.blocks[c].t().dot(&y.slice(s![c * p..(c + 1) * p])));
        }
        out
    }

    /// `D X` for a stacked code matrix `3m × N`.
    pub fn apply_matrix(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (p, m) = (self.rows(), self.atoms());
        let mut out = Array2::zeros((3 * p, x.ncols()));
        for c in 0..3 {
            out.slice_mut(s![c * p..(c + 1) * p, ..])
                .assign(&self.blocks[c].dot(&x.slice(s![c * m..(c + 1) * m, ..])));
        }
        out
    }

    /// `Dᵀ Y` for stacked signals `3·rows × N`.
    pub fn apply_transpose_matrix(&self, y: ArrayView2<f64>) -> Array2<f64> {
        let (p, m) = (self.rows(), self.atoms());
        let mut out = Array2::zeros((3 * m, y.ncols()));
        for c in 0..3 {
            out.slice_mut(s![c * m..(c + 1) * m, ..])
                .assign(&self.blocks[c].t().dot(&y.slice(s![c * p..(c + 1) * p, ..])));
        }
        out
    }

    /// `DᵀD`, block-diagonal `3m × 3m`.
    pub fn gram(&self) -> Array2<f64> {
        let m = self.atoms();
        let mut g = Array2::zeros((3 * m, 3 * m));
        for c in 0..3 {
            g.slice_mut(s![c * m..(c + 1) * m, c * m..(c + 1) * m]).assign(&self.blocks[c].t().dot(&self.blocks[c]));
        }
        g
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let (p, m) = (self.rows(), self.atoms());
        let mut d = Array2::zeros((3 * p, 3 * m));
        for c in 0..3 {
            d.slice_mut(s![c * p..(c + 1) * p, c * m..(c + 1) * m]).assign(&self.blocks[c]);
        }
        d
    }

    /// Keep only the diagonal blocks of a dense `3·rows × 3m` matrix.
    pub fn from_dense_diagonal(d: ArrayView2<f64>, rows: usize, atoms: usize) -> Result<Self> {
        if d.dim() != (3 * rows, 3 * atoms) {
            return Err(Error::dim("dense matrix does not match block sizes"));
        }
        let blocks = [0, 1, 2].map(|c| d.slice(s![c * rows..(c + 1) * rows, c * atoms..(c + 1) * atoms]).to_owned());
        Self::new(blocks)
    }

    pub fn max_column_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

/// The convex objective `xᵀ Q x − bᵀ x + c + λ‖x‖₁` with symmetric PSD `Q`.
#[derive(Debug, Clone)]
pub struct JointQuadratic {
    pub curvature: Arc<Array2<f64>>,
    pub linear: Array1<f64>,
    pub constant: f64,
    pub lambda: f64,
}

impl JointQuadratic {
    pub fn new(curvature: Arc<Array2<f64>>, linear: Array1<f64>, constant: f64, lambda: f64) -> Result<Self> {
        let n = linear.len();
        if curvature.dim() != (n, n) {
            return Err(Error::dim(format!(
                "curvature {:?} vs linear term of length {n}",
                curvature.dim()
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::param(format!("λ must be ≥ 0, got {lambda}")));
        }
        Ok(Self { curvature, linear, constant, lambda })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// `xᵀQx − bᵀx + c`
    pub fn smooth_value(&self, x: ArrayView1<f64>) -> f64 {
        x.dot(&self.curvature.dot(&x)) - self.linear.dot(&x) + self.constant
    }

    pub fn objective(&self, x: ArrayView1<f64>) -> f64 {
        self.smooth_value(x) + self.lambda * x.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// `2Qx − b`
    pub fn gradient(&self, x: ArrayView1<f64>) -> Array1<f64> {
        2.0 * self.curvature.dot(&x) - &self.linear
    }
}

fn symmetrize(m: &mut Array2<f64>) {
    let t = m.t().to_owned();
    *m += &t;
    *m *= 0.5;
}

/// Symmetric part of `D_hᵀ Sᵀ (I − P_sᵀ) S D_h`, the operator behind the
/// edge penalty (before the factor `2τ`).
pub fn edge_coupling(dh: &BlockDiagonalDictionary, s: &EdgeOperator) -> Result<Array2<f64>> {
    if s.len() != dh.rows() {
        return Err(Error::dim(format!(
            "edge operator is {}×{0}, HR dictionary has {} rows",
            s.len(),
            dh.rows()
        )));
    }
    let m = dh.atoms();
    let filtered: Vec<Array2<f64>> = dh.blocks().iter().map(|b| s.apply_matrix(b.view())).collect();
    let mut g = Array2::zeros((3 * m, 3 * m));
    for a in 0..3 {
        for b in 0..3 {
            let block = filtered[a].t().dot(&filtered[b]);
            let scale = if a == b { 1.0 } else { -0.5 };
            g.slice_mut(s![a * m..(a + 1) * m, b * m..(b + 1) * m]).assign(&(block * scale));
        }
    }
    symmetrize(&mut g);
    Ok(g)
}

/// Precomputed pieces of the reconstruction-time curvature
/// `Q(τ) = ½ D_lᵀD_l + 2τ · edge_coupling`.
#[derive(Debug, Clone)]
pub struct JointCurvature {
    data: Array2<f64>,
    edge: Array2<f64>,
}

impl JointCurvature {
    pub fn new(dl: &BlockDiagonalDictionary, dh: &BlockDiagonalDictionary, s: &EdgeOperator) -> Result<Self> {
        if dl.atoms() != dh.atoms() {
            return Err(Error::dim("LR and HR dictionaries differ in atom count"));
        }
        let mut data = dl.gram();
        data *= 0.5;
        symmetrize(&mut data);
        Ok(Self { data, edge: edge_coupling(dh, s)? })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// `½ D_lᵀD_l`
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// The edge coupling, without the factor `2τ`.
    pub fn edge(&self) -> &Array2<f64> {
        &self.edge
    }

    pub fn at(&self, tau: f64) -> Array2<f64> {
        if tau == 0.0 {
            return self.data.clone();
        }
        let mut q = self.data.clone();
        q.scaled_add(2.0 * tau, &self.edge);
        symmetrize(&mut q);
        q
    }
}

fn check_signal(d: &BlockDiagonalDictionary, y: ArrayView1<f64>, what: &str) -> Result<()> {
    if y.len() != 3 * d.rows() {
        return Err(Error::dim(format!("{what} has length {}, expected {}", y.len(), 3 * d.rows())));
    }
    Ok(())
}

/// Objective of the joint color coding problem for one patch with LR
/// features `y_l`.
pub fn build_joint_quadratic(
    dl: &BlockDiagonalDictionary,
    dh: &BlockDiagonalDictionary,
    s: &EdgeOperator,
    tau: f64,
    lambda: f64,
    y_l: ArrayView1<f64>,
) -> Result<JointQuadratic> {
    check_signal(dl, y_l, "y_l")?;
    if !(tau >= 0.0) {
        return Err(Error::param(format!("τ must be ≥ 0, got {tau}")));
    }
    let q = JointCurvature::new(dl, dh, s)?.at(tau);
    JointQuadratic::new(Arc::new(q), dl.apply_transpose(y_l), 0.5 * y_l.dot(&y_l), lambda)
}

/// Curvature of the per-sample training problem:
/// `γ/2 D_lᵀD_l + (1−γ)/2 D_hᵀD_h + 2τ D_hᵀSᵀ(I − P_sᵀ)S D_h`, symmetrized.
pub fn training_curvature(
    dl: &BlockDiagonalDictionary,
    dh: &BlockDiagonalDictionary,
    s: &EdgeOperator,
    tau: f64,
    gamma: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param(format!("γ must lie in [0, 1], got {gamma}")));
    }
    if !(tau >= 0.0) {
        return Err(Error::param(format!("τ must be ≥ 0, got {tau}")));
    }
    if dl.atoms() != dh.atoms() {
        return Err(Error::dim("LR and HR dictionaries differ in atom count"));
    }
    let mut a = dl.gram() * (0.5 * gamma);
    a.scaled_add(0.5 * (1.0 - gamma), &dh.gram());
    if tau != 0.0 {
        a.scaled_add(2.0 * tau, &edge_coupling(dh, s)?);
    }
    symmetrize(&mut a);
    Ok(a)
}

/// Per-sample training objective with linear term
/// `b = γ D_lᵀ y_l + (1−γ) D_hᵀ y_h`.
#[allow(clippy::too_many_arguments)]
pub fn build_training_quadratic(
    dl: &BlockDiagonalDictionary,
    dh: &BlockDiagonalDictionary,
    s: &EdgeOperator,
    tau: f64,
    gamma: f64,
    lambda: f64,
    y_l: ArrayView1<f64>,
    y_h: ArrayView1<f64>,
) -> Result<JointQuadratic> {
    check_signal(dl, y_l, "y_l")?;
    check_signal(dh, y_h, "y_h")?;
    let a = training_curvature(dl, dh, s, tau, gamma)?;
    let b = gamma * dl.apply_transpose(y_l) + (1.0 - gamma) * dh.apply_transpose(y_h);
    let c = 0.5 * gamma * y_l.dot(&y_l) + 0.5 * (1.0 - gamma) * y_h.dot(&y_h);
    JointQuadratic::new(Arc::new(a), b, c, lambda)
}

/// Direct evaluation of the joint color cost: per-channel reconstruction
/// and sparsity plus the three pairwise edge differences weighted by `τ`.
#[allow(clippy::too_many_arguments)]
pub fn eval_color_cost(
    x: ArrayView1<f64>,
    y_l: ArrayView1<f64>,
    dl: &BlockDiagonalDictionary,
    dh: &BlockDiagonalDictionary,
    s: &EdgeOperator,
    lambda: f64,
    tau: f64,
) -> Result<f64> {
    check_signal(dl, y_l, "y_l")?;
    let m = dl.atoms();
    if x.len() != 3 * m || dh.atoms() != m {
        return Err(Error::dim("code length does not match dictionaries"));
    }
    if s.len() != dh.rows() {
        return Err(Error::dim("edge operator does not match HR patch size"));
    }
    let q = dl.rows();
    let mut cost = 0.0;
    let mut edges = Vec::with_capacity(3);
    for c in 0..3 {
        let xc = x.slice(s![c * m..(c + 1) * m]);
        let r = &y_l.slice(s![c * q..(c + 1) * q]) - &dl.block(c).dot(&xc);
        cost += 0.5 * r.dot(&r) + lambda * xc.iter().map(|v| v.abs()).sum::<f64>();
        edges.push(s.apply(dh.block(c).dot(&xc).view()));
    }
    for (a, b) in [(0, 1), (1, 2), (2, 0)] {
        let d = &edges[a] - &edges[b];
        cost += tau * d.dot(&d);
    }
    Ok(cost)
}

/// Cross-channel edge discrepancy `Σ_pairs ‖S(patch_μ − patch_ν)‖²` of a
/// stacked `3p` HR patch.
pub fn edge_discrepancy(s: &EdgeOperator, patch: ArrayView1<f64>) -> f64 {
    let p = s.len();
    let edges: Vec<Array1<f64>> = (0..3).map(|c| s.apply(patch.slice(s![c * p..(c + 1) * p]))).collect();
    [(0, 1), (1, 2), (2, 0)]
        .iter()
        .map(|&(a, b)| {
            let d = &edges[a] - &edges[b];
            d.dot(&d)
        })
        .sum()
}
