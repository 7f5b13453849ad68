//! Joint color dictionary learning and the dictionary file format.
//!
//! Training alternates between batch joint sparse coding, a per-channel LR
//! dictionary update by column-wise block coordinate descent and an ADMM
//! solve for the HR dictionaries, whose edge penalty couples the channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::{training_curvature, BlockDiagonalDictionary, ChannelShift, EdgeOperator, JointQuadratic};
use crate::solver::{estimate_lipschitz, fista_solve_with_lipschitz, largest_eigenvalue, SolverConfig};

/// Channel-stacked training pairs, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// `3q × N` LR feature vectors.
    pub y_l: Array2<f64>,
    /// `3p × N` HR targets.
    pub y_h: Array2<f64>,
}

impl TrainingSet {
    pub fn new(y_l: Array2<f64>, y_h: Array2<f64>) -> Result<Self> {
        if y_l.ncols() != y_h.ncols() {
            return Err(Error::dim(format!("{} LR samples vs {} HR samples", y_l.ncols(), y_h.ncols())));
        }
        if !y_l.nrows().is_multiple_of(3) || !y_h.nrows().is_multiple_of(3) || y_l.nrows() == 0 || y_h.nrows() == 0 {
            return Err(Error::dim("sample rows must be three stacked channels"));
        }
        Ok(Self { y_l, y_h })
    }

    pub fn len(&self) -> usize {
        self.y_l.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-channel LR dimension `q`.
    pub fn lr_dim(&self) -> usize {
        self.y_l.nrows() / 3
    }

    /// Per-channel HR dimension `p`.
    pub fn hr_dim(&self) -> usize {
        self.y_h.nrows() / 3
    }

    pub fn lr_channel(&self, c: usize) -> ArrayView2<'_, f64> {
        let q = self.lr_dim();
        self.y_l.slice(s![c * q..(c + 1) * q, ..])
    }

    pub fn hr_channel(&self, c: usize) -> ArrayView2<'_, f64> {
        let p = self.hr_dim();
        self.y_h.slice(s![c * p..(c + 1) * p, ..])
    }
}

/// `3m × N` codes with the solver's convergence flag per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodeMatrix {
    pub x: Array2<f64>,
    pub converged: Vec<bool>,
}

impl SparseCodeMatrix {
    pub fn zeros(atoms: usize, samples: usize) -> Self {
        Self { x: Array2::zeros((3 * atoms, samples)), converged: vec![true; samples] }
    }

    pub fn atoms(&self) -> usize {
        self.x.nrows() / 3
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        let m = self.atoms();
        self.x.slice(s![c * m..(c + 1) * m, ..])
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Iterates of the HR dictionary ADMM.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub dh: BlockDiagonalDictionary,
    /// Dense `3p × 3m` slack.
    pub z: Array2<f64>,
    /// Scaled dual, same shape as `z`.
    pub u: Array2<f64>,
    pub rho: f64,
    pub iteration: usize,
}

impl AdmmState {
    /// Starts with `Z = D_h` and `U = 0`.
    pub fn new(dh: BlockDiagonalDictionary, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::param(format!("ρ must be > 0, got {rho}")));
        }
        let z = dh.to_dense();
        let u = Array2::zeros(z.dim());
        Ok(Self { dh, z, u, rho, iteration: 0 })
    }

    /// `‖D_h − Z‖_F`
    pub fn primal_residual(&self) -> f64 {
        frobenius(&(&self.dh.to_dense() - &self.z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Atoms per channel.
    pub atoms: usize,
    pub lambda: f64,
    pub tau: f64,
    /// Weight of the LR term; the HR term gets `1 − γ`.
    pub gamma: f64,
    pub rho: f64,
    pub outer_iterations: usize,
    pub admm_tolerance: f64,
    pub admm_max_iterations: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            atoms: 512,
            lambda: 0.1,
            tau: 0.01,
            gamma: 0.5,
            rho: 1.0,
            outer_iterations: 20,
            admm_tolerance: 1e-4,
            admm_max_iterations: 100,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms == 0 {
            return Err(Error::param("atom count must be ≥ 1"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::param(format!("λ must be > 0, got {}", self.lambda)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::param(format!("τ must be ≥ 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::param(format!("γ must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::param(format!("ρ must be > 0, got {}", self.rho)));
        }
        if self.outer_iterations == 0 || self.admm_max_iterations == 0 {
            return Err(Error::param("iteration counts must be ≥ 1"));
        }
        if !(self.admm_tolerance > 0.0) {
            return Err(Error::param("ADMM tolerance must be > 0"));
        }
        self.solver.validate()
    }
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_dicts(ts: &TrainingSet, dl: &BlockDiagonalDictionary, dh: &BlockDiagonalDictionary) -> Result<()> {
    if dl.rows() != ts.lr_dim() || dh.rows() != ts.hr_dim() {
        return Err(Error::dim(format!(
            "dictionaries have {}/{} rows, samples have {}/{}",
            dl.rows(),
            dh.rows(),
            ts.lr_dim(),
            ts.hr_dim()
        )));
    }
    if dl.atoms() != dh.atoms() {
        return Err(Error::dim("LR and HR dictionaries differ in atom count"));
    }
    Ok(())
}

/// Codes every training column against the current dictionaries. The
/// curvature and its Lipschitz constant are shared by all columns; `warm`
/// supplies starting points.
#[allow(clippy::too_many_arguments)]
pub fn sparse_code_batch(
    ts: &TrainingSet,
    dl: &BlockDiagonalDictionary,
    dh: &BlockDiagonalDictionary,
    s: &EdgeOperator,
    tau: f64,
    gamma: f64,
    lambda: f64,
    solver: &SolverConfig,
    warm: Option<&SparseCodeMatrix>,
) -> Result<SparseCodeMatrix> {
    check_dicts(ts, dl, dh)?;
    if s.len() != dh.rows() {
        return Err(Error::dim("edge operator does not match HR patch size"));
    }
    let m = dl.atoms();
    if let Some(w) = warm {
        if w.x.dim() != (3 * m, ts.len()) {
            return Err(Error::dim("warm-start codes have the wrong shape"));
        }
    }
    let a = Arc::new(training_curvature(dl, dh, s, tau, gamma)?);
    let lipschitz = estimate_lipschitz(a.view(), solver)?;
    let mut b = dl.apply_transpose_matrix(ts.y_l.view()) * gamma;
    b.scaled_add(1.0 - gamma, &dh.apply_transpose_matrix(ts.y_h.view()));

    let columns: Vec<(Array1<f64>, bool)> = (0..ts.len())
        .into_par_iter()
        .map(|i| {
            let yl = ts.y_l.column(i);
            let yh = ts.y_h.column(i);
            let problem = JointQuadratic {
                curvature: Arc::clone(&a),
                linear: b.column(i).to_owned(),
                constant: 0.5 * gamma * yl.dot(&yl) + 0.5 * (1.0 - gamma) * yh.dot(&yh),
                lambda,
            };
            let x0 = warm.map(|w| w.x.column(i));
            let r = fista_solve_with_lipschitz(&problem, solver, x0, lipschitz)?;
            Ok((r.x, r.converged))
        })
        .collect::<Result<_>>()?;

    let mut x = Array2::zeros((3 * m, ts.len()));
    let mut converged = Vec::with_capacity(ts.len());
    for (i, (col, ok)) in columns.into_iter().enumerate() {
        x.column_mut(i).assign(&col);
        converged.push(ok);
    }
    Ok(SparseCodeMatrix { x, converged })
}

const BCD_MAX_SWEEPS: usize = 50;
const BCD_TOLERANCE: f64 = 1e-8;

/// `Tr(D C Dᵀ) − 2 Tr(B Dᵀ)`
fn trace_objective(d: ArrayView2<f64>, c: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let dc = d.dot(&c);
    Zip::from(&dc).and(&b).and(d).fold(0.0, |acc, &p, &q, &r| acc + (p - 2.0 * q) * r)
}

/// Minimizes `Tr(D C Dᵀ) − 2 Tr(B Dᵀ)` over `D` with columns in the unit
/// ball, one column at a time, starting from `d`. Columns with `C_kk = 0`
/// are left untouched. Returns the number of sweeps.
pub fn column_bcd(d: &mut Array2<f64>, c: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<usize> {
    let m = d.ncols();
    if c.dim() != (m, m) || b.dim() != d.dim() {
        return Err(Error::dim("column update shapes disagree"));
    }
    let scale = c.diag().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut obj = trace_objective(d.view(), c, b);
    let mut sweeps = 0;
    while sweeps < BCD_MAX_SWEEPS {
        sweeps += 1;
        for k in 0..m {
            let ckk = c[[k, k]];
            if ckk <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                continue;
            }
            let mut u = (&b.column(k) - &d.dot(&c.column(k))) / ckk;
            u += &d.column(k);
            let norm = u.dot(&u).sqrt();
            if norm > 1.0 {
                u /= norm;
            }
            d.column_mut(k).assign(&u);
        }
        let next = trace_objective(d.view(), c, b);
        let change = (obj - next).abs();
        obj = next;
        if change <= BCD_TOLERANCE * obj.abs().max(1.0) {
            break;
        }
    }
    Ok(sweeps)
}

/// LR dictionary of one channel: `min ‖Y − D X‖_F²` with `‖d_k‖ ≤ 1`,
/// refining `init`.
pub fn learn_lr_dictionary(y: ArrayView2<f64>, x: ArrayView2<f64>, init: ArrayView2<f64>) -> Result<Array2<f64>> {
    if y.ncols() != x.ncols() || init.dim() != (y.nrows(), x.nrows()) {
        return Err(Error::dim(format!(
            "signals {:?}, codes {:?}, dictionary {:?}",
            y.dim(),
            x.dim(),
            init.dim()
        )));
    }
    let c = x.dot(&x.t());
    let b = y.dot(&x.t());
    let mut d = init.to_owned();
    column_bcd(&mut d, c.view(), b.view())?;
    Ok(d)
}

/// Applies `Sᵀ(I − P_sᵀ)S` (or its transpose `Sᵀ(I − P_s)S` when
/// `transpose`) to a channel-stacked matrix.
pub fn apply_edge_form(s: &EdgeOperator, a: ArrayView2<f64>, transpose: bool) -> Result<Array2<f64>> {
    let p = s.len();
    if a.nrows() != 3 * p {
        return Err(Error::dim(format!("edge form needs {} rows, got {}", 3 * p, a.nrows())));
    }
    let mut filtered = Array2::zeros(a.dim());
    for c in 0..3 {
        let block = s.apply_matrix(a.slice(s![c * p..(c + 1) * p, ..]));
        filtered.slice_mut(s![c * p..(c + 1) * p, ..]).assign(&block);
    }
    let shift = ChannelShift::new(p);
    let shifted = if transpose { shift.apply_rows(filtered.view())? } else { shift.apply_transpose_rows(filtered.view())? };
    let mixed = &filtered - &shifted;
    let mut out = Array2::zeros(a.dim());
    for c in 0..3 {
        let block = s.apply_transpose_matrix(mixed.slice(s![c * p..(c + 1) * p, ..]));
        out.slice_mut(s![c * p..(c + 1) * p, ..]).assign(&block);
    }
    Ok(out)
}

/// Products of the fixed codes reused by every ADMM iteration.
#[derive(Debug, Clone)]
pub struct CodeProducts {
    /// `XXᵀ`
    pub xxt: Array2<f64>,
    /// `Y_h Xᵀ`
    pub yxt: Array2<f64>,
    /// `‖Y_h‖_F²`
    pub y_energy: f64,
    pub samples: usize,
}

impl CodeProducts {
    pub fn new(y_h: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Self> {
        if y_h.ncols() != x.ncols() {
            return Err(Error::dim("targets and codes differ in sample count"));
        }
        if x.ncols() == 0 {
            return Err(Error::param("no training samples"));
        }
        Ok(Self {
            xxt: x.dot(&x.t()),
            yxt: y_h.dot(&x.t()),
            y_energy: y_h.iter().map(|v| v * v).sum(),
            samples: x.ncols(),
        })
    }
}

/// `(E, F)` of the step-1 trace problem `Tr(D_h F D_hᵀ) − 2 Tr(E D_hᵀ)`:
/// `F = (1−γ)/(2N) XXᵀ + ρ/2 I` and
/// `E = (1−γ)/(2N) Y_hXᵀ + ρ/2 (Z − U) − τ/N Sᵀ(I − P_sᵀ)S Z XXᵀ`.
pub fn compute_ef(
    products: &CodeProducts,
    z: ArrayView2<f64>,
    u: ArrayView2<f64>,
    s: &EdgeOperator,
    cfg: &TrainConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = products.samples as f64;
    let dim = products.xxt.nrows();
    if z.dim() != u.dim() || z.ncols() != dim || products.yxt.dim() != z.dim() {
        return Err(Error::dim("E/F operands disagree in shape"));
    }
    let w = (1.0 - cfg.gamma) / (2.0 * n);
    let mut f = &products.xxt * w;
    for i in 0..dim {
        f[[i, i]] += 0.5 * cfg.rho;
    }
    let mut e = &products.yxt * w;
    e.scaled_add(0.5 * cfg.rho, &(&z - &u));
    if cfg.tau != 0.0 {
        let zx = z.dot(&products.xxt);
        e.scaled_add(-cfg.tau / n, &apply_edge_form(s, zx.view(), false)?);
    }
    Ok((e, f))
}

/// Step 1: per-channel column descent on the diagonal blocks of `(E, F)`,
/// starting from `current`.
pub fn admm_step1(e: ArrayView2<f64>, f: ArrayView2<f64>, current: &BlockDiagonalDictionary) -> Result<BlockDiagonalDictionary> {
    let (p, m) = (current.rows(), current.atoms());
    if e.dim() != (3 * p, 3 * m) || f.dim() != (3 * m, 3 * m) {
        return Err(Error::dim("E/F do not match the dictionary"));
    }
    let mut blocks = current.blocks().clone();
    for (c, block) in blocks.iter_mut().enumerate() {
        let fcc = f.slice(s![c * m..(c + 1) * m, c * m..(c + 1) * m]);
        let ecc = e.slice(s![c * p..(c + 1) * p, c * m..(c + 1) * m]);
        column_bcd(block, fcc, ecc)?;
    }
    BlockDiagonalDictionary::new(blocks)
}

/// Step 2: `Z = D_h + U − 2τ/(Nρ) Sᵀ(I − P_s)S D_h XXᵀ`.
pub fn admm_step2(
    dh: &BlockDiagonalDictionary,
    u: ArrayView2<f64>,
    xxt: ArrayView2<f64>,
    s: &EdgeOperator,
    tau: f64,
    rho: f64,
    samples: usize,
) -> Result<Array2<f64>> {
    let dense = dh.to_dense();
    if u.dim() != dense.dim() || xxt.dim() != (dense.ncols(), dense.ncols()) {
        return Err(Error::dim("step-2 operands disagree in shape"));
    }
    if !(rho > 0.0) || samples == 0 {
        return Err(Error::param("step 2 needs ρ > 0 and N ≥ 1"));
    }
    let mut z = &dense + &u;
    if tau != 0.0 {
        let dx = dense.dot(&xxt);
        z.scaled_add(-2.0 * tau / (samples as f64 * rho), &apply_edge_form(s, dx.view(), true)?);
    }
    Ok(z)
}

/// Step 3: `U + D_h − Z`.
pub fn admm_step3(u: ArrayView2<f64>, dh: &BlockDiagonalDictionary, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let dense = dh.to_dense();
    if u.dim() != dense.dim() || z.dim() != dense.dim() {
        return Err(Error::dim("step-3 operands disagree in shape"));
    }
    Ok(&(&u + &dense) - &z)
}

/// HR part of the training objective:
/// `(1−γ)/(2N) ‖Y_h − D_h X‖_F² + 2τ/N Tr(D_hᵀ Sᵀ(I − P_sᵀ)S D_h XXᵀ)`.
pub fn hr_objective(products: &CodeProducts, dh: &BlockDiagonalDictionary, s: &EdgeOperator, cfg: &TrainConfig) -> Result<f64> {
    let d = dh.to_dense();
    let n = products.samples as f64;
    let fit = trace_objective(d.view(), products.xxt.view(), products.yxt.view()) + products.y_energy;
    let mut value = (1.0 - cfg.gamma) / (2.0 * n) * fit;
    if cfg.tau != 0.0 {
        let md = apply_edge_form(s, d.view(), false)?;
        let dx = d.dot(&products.xxt);
        value += 2.0 * cfg.tau / n * (&md * &dx).sum();
    }
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct HrUpdate {
    pub dh: BlockDiagonalDictionary,
    pub iterations: usize,
    /// `‖D_h − Z‖_F` at the last iterate.
    pub primal_residual: f64,
    /// `‖D_h^{t+1} − D_h^t‖_F` at the last iterate.
    pub change: f64,
    pub converged: bool,
    /// Penalty actually used, `max(ρ, 2L)`.
    pub rho: f64,
}

/// Lipschitz constant `2τ/N ‖Sᵀ(I − P_sᵀ)S‖₂ ‖XXᵀ‖₂` of the gradient of the
/// edge coupling in either dictionary argument.
pub fn coupling_lipschitz(products: &CodeProducts, s: &EdgeOperator, tau: f64) -> Result<f64> {
    if tau == 0.0 {
        return Ok(0.0);
    }
    let dim = 3 * s.len();
    let m = apply_edge_form(s, Array2::eye(dim).view(), false)?;
    let edge_norm = largest_eigenvalue(m.t().dot(&m).view())?.max(0.0).sqrt();
    let code_norm = largest_eigenvalue(products.xxt.view())?;
    Ok(2.0 * tau.abs() / products.samples as f64 * edge_norm * code_norm)
}

/// ADMM for the HR dictionaries with the codes fixed. Stops once both the
/// dictionary change and the primal residual fall below the tolerance; on
/// exhaustion returns the iterate with the lowest HR objective.
pub fn learn_hr_dictionary(
    ts: &TrainingSet,
    x: ArrayView2<f64>,
    s: &EdgeOperator,
    cfg: &TrainConfig,
    init: &BlockDiagonalDictionary,
) -> Result<HrUpdate> {
    if ts.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if init.rows() != ts.hr_dim() || x.nrows() != 3 * init.atoms() {
        return Err(Error::dim("HR dictionary does not match samples or codes"));
    }
    let products = CodeProducts::new(ts.y_h.view(), x)?;
    let rho = cfg.rho.max(2.0 * coupling_lipschitz(&products, s, cfg.tau)?);
    let cfg = &TrainConfig { rho, ..cfg.clone() };
    let mut state = AdmmState::new(init.clone(), rho)?;
    let mut best = (hr_objective(&products, init, s, cfg)?, init.clone());
    let mut change = f64::INFINITY;
    let mut residual = 0.0;
    while state.iteration < cfg.admm_max_iterations {
        state.iteration += 1;
        let (e, f) = compute_ef(&products, state.z.view(), state.u.view(), s, cfg)?;
        let next = admm_step1(e.view(), f.view(), &state.dh)?;
        change = frobenius(&(&next.to_dense() - &state.dh.to_dense()));
        state.dh = next;
        state.z = admm_step2(&state.dh, state.u.view(), products.xxt.view(), s, cfg.tau, cfg.rho, products.samples)?;
        state.u = admm_step3(state.u.view(), &state.dh, state.z.view())?;
        residual = state.primal_residual();
        let value = hr_objective(&products, &state.dh, s, cfg)?;
        if value <= best.0 {
            best = (value, state.dh.clone());
        }
        if change < cfg.admm_tolerance && residual < cfg.admm_tolerance {
            return Ok(HrUpdate { dh: state.dh, iterations: state.iteration, primal_residual: residual, change, converged: true, rho });
        }
    }
    Ok(HrUpdate { dh: best.1, iterations: state.iteration, primal_residual: residual, change, converged: false, rho })
}

/// Training objective averaged over samples:
/// `γ/2‖y_l − D_l x‖² + (1−γ)/2‖y_h − D_h x‖² + λ‖x‖₁ + 2τ xᵀD_hᵀSᵀ(I − P_sᵀ)S D_h x`.
pub fn l2_objective(
    ts: &TrainingSet,
    x: ArrayView2<f64>,
    dl: &BlockDiagonalDictionary,
    dh: &BlockDiagonalDictionary,
    s: &EdgeOperator,
    cfg: &TrainConfig,
) -> Result<f64> {
    check_dicts(ts, dl, dh)?;
    if x.dim() != (3 * dl.atoms(), ts.len()) || ts.is_empty() {
        return Err(Error::dim("codes do not match the training set"));
    }
    let sq = |m: Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let rl = sq(&ts.y_l - &dl.apply_matrix(x));
    let hx = dh.apply_matrix(x);
    let rh = sq(&ts.y_h - &hx);
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    let mut edge = 0.0;
    if cfg.tau != 0.0 {
        edge = (&hx * &apply_edge_form(s, hx.view(), false)?).sum();
    }
    let n = ts.len() as f64;
    Ok((0.5 * cfg.gamma * rl + 0.5 * (1.0 - cfg.gamma) * rh + cfg.lambda * l1 + 2.0 * cfg.tau * edge) / n)
}

/// Objective values recorded during one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub iteration: usize,
    pub after_coding: f64,
    pub after_lr: f64,
    pub after_hr: f64,
    pub replaced_atoms: usize,
    pub admm_iterations: usize,
    pub admm_residual: f64,
    pub admm_converged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dl: BlockDiagonalDictionary,
    pub dh: BlockDiagonalDictionary,
    pub codes: SparseCodeMatrix,
    /// Objective at the initial dictionaries with zero codes.
    pub initial_objective: f64,
    pub history: Vec<OuterRecord>,
}

const INIT_EPS: f64 = 1e-12;

/// Writes sample `i`, channel `c` into column `k`, scaled so the larger of
/// its LR and HR parts has unit norm.
fn seed_atom(
    ts: &TrainingSet,
    i: usize,
    c: usize,
    k: usize,
    dl: &mut BlockDiagonalDictionary,
    dh: &mut BlockDiagonalDictionary,
    rng: &mut ChaCha8Rng,
) {
    let l = ts.lr_channel(c).column(i).to_owned();
    let h = ts.hr_channel(c).column(i).to_owned();
    let norm = l.dot(&l).sqrt().max(h.dot(&h).sqrt());
    if norm > INIT_EPS {
        dl.block_mut(c).column_mut(k).assign(&(l / norm));
        dh.block_mut(c).column_mut(k).assign(&(h / norm));
    } else {
        use rand_distr::{Distribution, StandardNormal};
        let mut draw = |len: usize| Array1::from_shape_simple_fn(len, || -> f64 { StandardNormal.sample(&mut *rng) });
        let (l, h) = (draw(ts.lr_dim()), draw(ts.hr_dim()));
        let norm = l.dot(&l).sqrt().max(h.dot(&h).sqrt());
        dl.block_mut(c).column_mut(k).assign(&(l / norm));
        dh.block_mut(c).column_mut(k).assign(&(h / norm));
    }
}

/// Initial dictionaries from `K` distinct random samples, shared across
/// channels.
pub fn initial_dictionaries(ts: &TrainingSet, atoms: usize, seed: u64) -> Result<(BlockDiagonalDictionary, BlockDiagonalDictionary)> {
    if ts.len() < atoms {
        return Err(Error::InsufficientPatches { needed: atoms, found: ts.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, ts.len(), atoms).into_vec();
    let zeros = |r: usize| [Array2::zeros((r, atoms)), Array2::zeros((r, atoms)), Array2::zeros((r, atoms))];
    let mut dl = BlockDiagonalDictionary::new(zeros(ts.lr_dim()))?;
    let mut dh = BlockDiagonalDictionary::new(zeros(ts.hr_dim()))?;
    for (k, &i) in picks.iter().enumerate() {
        for c in 0..3 {
            seed_atom(ts, i, c, k, &mut dl, &mut dh, &mut rng);
        }
    }
    Ok((dl, dh))
}

/// Re-seeds atoms whose code rows are all zero with the worst reconstructed
/// samples of that channel. Leaves the objective unchanged.
fn replace_unused_atoms(
    ts: &TrainingSet,
    codes: &SparseCodeMatrix,
    dl: &mut BlockDiagonalDictionary,
    dh: &mut BlockDiagonalDictionary,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mut replaced = 0;
    for c in 0..3 {
        let xc = codes.channel(c);
        let unused: Vec<usize> = (0..xc.nrows()).filter(|&k| xc.row(k).iter().all(|&v| v == 0.0)).collect();
        if unused.is_empty() {
            continue;
        }
        let rl = &ts.lr_channel(c) - &dl.block(c).dot(&xc);
        let rh = &ts.hr_channel(c) - &dh.block(c).dot(&xc);
        let err: Vec<f64> = (0..ts.len())
            .map(|i| {
                let (a, b) = (rl.column(i), rh.column(i));
                gamma * a.dot(&a) + (1.0 - gamma) * b.dot(&b)
            })
            .collect();
        let mut order: Vec<usize> = (0..ts.len()).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        for (&k, &i) in unused.iter().zip(order.iter()) {
            seed_atom(ts, i, c, k, dl, dh, rng);
            replaced += 1;
        }
    }
    replaced
}

/// Alternates batch coding, LR and HR dictionary updates for
/// `cfg.outer_iterations` rounds.
pub fn joint_dictionary_learning(ts: &TrainingSet, s: &EdgeOperator, cfg: &TrainConfig) -> Result<TrainOutcome> {
    joint_dictionary_learning_with(ts, s, cfg, |_| Ok(()))
}

/// [`joint_dictionary_learning`] that hands each outer record to `observe`
/// as soon as it is available. An error from `observe` stops training.
pub fn joint_dictionary_learning_with(
    ts: &TrainingSet,
    s: &EdgeOperator,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&OuterRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if s.len() != ts.hr_dim() {
        return Err(Error::dim("edge operator does not match HR patch size"));
    }
    let (mut dl, mut dh) = initial_dictionaries(ts, cfg.atoms, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a70d);
    let mut codes = SparseCodeMatrix::zeros(cfg.atoms, ts.len());
    let initial_objective = l2_objective(ts, codes.x.view(), &dl, &dh, s, cfg)?;
    let mut history = Vec::with_capacity(cfg.outer_iterations);

    for iteration in 1..=cfg.outer_iterations {
        codes = sparse_code_batch(ts, &dl, &dh, s, cfg.tau, cfg.gamma, cfg.lambda, &cfg.solver, Some(&codes))?;
        let after_coding = l2_objective(ts, codes.x.view(), &dl, &dh, s, cfg)?;
        let replaced = if iteration < cfg.outer_iterations {
            replace_unused_atoms(ts, &codes, &mut dl, &mut dh, cfg.gamma, &mut rng)
        } else {
            0
        };

        let blocks: Vec<Array2<f64>> = (0..3)
            .into_par_iter()
            .map(|c| learn_lr_dictionary(ts.lr_channel(c), codes.channel(c), dl.block(c).view()))
            .collect::<Result<_>>()?;
        let [r, g, b]: [Array2<f64>; 3] = blocks.try_into().expect("three channels");
        dl = BlockDiagonalDictionary::new([r, g, b])?;
        let after_lr = l2_objective(ts, codes.x.view(), &dl, &dh, s, cfg)?;

        let hr = learn_hr_dictionary(ts, codes.x.view(), s, cfg, &dh)?;
        dh = hr.dh;
        let after_hr = l2_objective(ts, codes.x.view(), &dl, &dh, s, cfg)?;

        history.push(OuterRecord {
            iteration,
            after_coding,
            after_lr,
            after_hr,
            replaced_atoms: replaced,
            admm_iterations: hr.iterations,
            admm_residual: hr.primal_residual,
            admm_converged: hr.converged,
        });
        observe(history.last().expect("just pushed"))?;
    }
    Ok(TrainOutcome { dl, dh, codes, initial_objective, history })
}

const MAGIC: &[u8; 4] = b"MCSR";
pub const FORMAT_VERSION: u32 = 1;

/// Trained LR/HR dictionaries plus the geometry they were trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryPair {
    pub lr: BlockDiagonalDictionary,
    pub hr: BlockDiagonalDictionary,
    pub patch_side: usize,
    pub scale: usize,
    pub features: usize,
}

impl DictionaryPair {
    pub fn new(lr: BlockDiagonalDictionary, hr: BlockDiagonalDictionary, patch_side: usize, scale: usize, features: usize) -> Result<Self> {
        let p = patch_side * patch_side;
        if patch_side == 0 || scale == 0 || features == 0 {
            return Err(Error::param("patch side, scale and feature count must be ≥ 1"));
        }
        if hr.rows() != p || lr.rows() != features * p {
            return Err(Error::dim(format!(
                "dictionary rows {}/{} do not match patch side {patch_side} with {features} features",
                lr.rows(),
                hr.rows()
            )));
        }
        if lr.atoms() != hr.atoms() {
            return Err(Error::dim("LR and HR dictionaries differ in atom count"));
        }
        Ok(Self { lr, hr, patch_side, scale, features })
    }

    pub fn atoms(&self) -> usize {
        self.lr.atoms()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for dict in [&self.lr, &self.hr] {
            for block in dict.blocks() {
                w.write_all(&to_u32(block.nrows())?.to_le_bytes())?;
                w.write_all(&to_u32(block.ncols())?.to_le_bytes())?;
                for row in block.rows() {
                    for v in row {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        for meta in [self.patch_side, self.scale, self.features] {
            w.write_all(&to_u32(meta)?.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dictionary file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dictionary version {version}")));
        }
        let read_dict = |r: &mut dyn Read| -> Result<BlockDiagonalDictionary> {
            let mut blocks = Vec::with_capacity(3);
            for _ in 0..3 {
                let rows = read_u32(r)? as usize;
                let cols = read_u32(r)? as usize;
                let len = rows.checked_mul(cols).filter(|&n| n <= 1 << 28).ok_or_else(|| Error::Format("dictionary block too large".into()))?;
                let mut bytes = vec![0u8; len * 8];
                read_exact(r, &mut bytes)?;
                let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                let block = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
                if block.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format("dictionary contains non-finite values".into()));
                }
                blocks.push(block);
            }
            let [a, b, c]: [Array2<f64>; 3] = blocks.try_into().expect("three blocks");
            BlockDiagonalDictionary::new([a, b, c]).map_err(|e| Error::Format(e.to_string()))
        };
        let lr = read_dict(&mut r)?;
        let hr = read_dict(&mut r)?;
        let patch_side = read_u32(&mut r)? as usize;
        let scale = read_u32(&mut r)? as usize;
        let features = read_u32(&mut r)? as usize;
        Self::new(lr, hr, patch_side, scale, features).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

fn read_exact(r: &mut dyn Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated dictionary file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Column norms of every block, for checking the unit-ball constraint.
pub fn column_norms(d: &BlockDiagonalDictionary) -> Vec<f64> {
    d.blocks()
        .iter()
        .flat_map(|b| b.map_axis(Axis(0), |c| c.dot(&c).sqrt()).to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::build_edge_operator;
    use crate::solver::{fista_solve, lasso_solve};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn unit_columns(mut m: Array2<f64>) -> Array2<f64> {
        for mut col in m.columns_mut() {
            let n = col.dot(&col).sqrt();
            col /= n;
        }
        m
    }

    fn rand_dict(rng: &mut ChaCha8Rng, rows: usize, atoms: usize) -> BlockDiagonalDictionary {
        BlockDiagonalDictionary::new([
            unit_columns(rand_matrix(rng, rows, atoms)),
            unit_columns(rand_matrix(rng, rows, atoms)),
            unit_columns(rand_matrix(rng, rows, atoms)),
        ])
        .unwrap()
    }

    fn sparse_codes(rng: &mut ChaCha8Rng, atoms: usize, n: usize, active: usize) -> Array2<f64> {
        let mut x = Array2::zeros((3 * atoms, n));
        for i in 0..n {
            for c in 0..3 {
                for k in index::sample(rng, atoms, active) {
                    x[[c * atoms + k, i]] = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                }
            }
        }
        x
    }

    fn cfg(tau: f64) -> TrainConfig {
        TrainConfig { atoms: 4, tau, ..Default::default() }
    }

    #[test]
    fn zero_signals_give_zero_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (dl, dh) = (rand_dict(&mut rng, 8, 4), rand_dict(&mut rng, 4, 4));
        let s = build_edge_operator(2).unwrap();
        let ts = TrainingSet::new(Array2::zeros((24, 5)), Array2::zeros((12, 5))).unwrap();
        let x = sparse_code_batch(&ts, &dl, &dh, &s, 0.1, 0.5, 0.1, &SolverConfig::default(), None).unwrap();
        assert!(x.x.iter().all(|&v| v == 0.0));
        assert!(x.all_converged());
    }

    #[test]
    fn batch_of_one_matches_single_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (dl, dh) = (rand_dict(&mut rng, 8, 4), rand_dict(&mut rng, 4, 4));
        let s = build_edge_operator(2).unwrap();
        let ts = TrainingSet::new(rand_matrix(&mut rng, 24, 1), rand_matrix(&mut rng, 12, 1)).unwrap();
        let solver = SolverConfig::default();
        let batch = sparse_code_batch(&ts, &dl, &dh, &s, 0.2, 0.3, 0.05, &solver, None).unwrap();
        let q = crate::operators::build_training_quadratic(&dl, &dh, &s, 0.2, 0.3, 0.05, ts.y_l.column(0), ts.y_h.column(0)).unwrap();
        let single = fista_solve(&q, &solver, None).unwrap();
        for i in 0..12 {
            assert_abs_diff_eq!(batch.x[[i, 0]], single.x[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_tau_full_lr_weight_is_per_channel_lasso() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (dl, dh) = (rand_dict(&mut rng, 8, 4), rand_dict(&mut rng, 4, 4));
        let s = build_edge_operator(2).unwrap();
        let ts = TrainingSet::new(rand_matrix(&mut rng, 24, 6), rand_matrix(&mut rng, 12, 6)).unwrap();
        let solver = SolverConfig { max_iterations: 20_000, tolerance: 1e-15, ..Default::default() };
        let batch = sparse_code_batch(&ts, &dl, &dh, &s, 0.0, 1.0, 0.1, &solver, None).unwrap();
        for i in 0..6 {
            for c in 0..3 {
                let r = lasso_solve(dl.block(c).view(), ts.lr_channel(c).column(i), 0.1, &solver).unwrap();
                for k in 0..4 {
                    assert_abs_diff_eq!(batch.x[[c * 4 + k, i]], r.x[k], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn lr_update_with_identity_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = rand_matrix(&mut rng, 5, 3) * 2.0;
        let d = learn_lr_dictionary(y.view(), Array2::eye(3).view(), rand_matrix(&mut rng, 5, 3).view()).unwrap();
        for k in 0..3 {
            let col = y.column(k);
            let n = col.dot(&col).sqrt();
            let expect = if n > 1.0 { &col / n } else { col.to_owned() };
            for r in 0..5 {
                assert_abs_diff_eq!(d[[r, k]], expect[r], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn lr_update_recovers_planted_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d0 = unit_columns(rand_matrix(&mut rng, 6, 4));
        let x = rand_matrix(&mut rng, 4, 200);
        let y = d0.dot(&x);
        let mut d = unit_columns(rand_matrix(&mut rng, 6, 4));
        let fit = |d: &Array2<f64>| (&y - &d.dot(&x)).iter().map(|v| v * v).sum::<f64>();
        let mut before = fit(&d);
        for _ in 0..200 {
            d = learn_lr_dictionary(y.view(), x.view(), d.view()).unwrap();
            let after = fit(&d);
            assert!(after <= before + 1e-9);
            before = after;
        }
        assert!(before <= 1e-10, "residual {before}");
    }

    #[test]
    fn unused_atoms_are_left_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = rand_matrix(&mut rng, 3, 10);
        x.row_mut(1).fill(0.0);
        let init = unit_columns(rand_matrix(&mut rng, 4, 3));
        let d = learn_lr_dictionary(rand_matrix(&mut rng, 4, 10).view(), x.view(), init.view()).unwrap();
        assert_eq!(d.column(1), init.column(1));
    }

    fn ef_fixture(rng: &mut ChaCha8Rng, side: usize, atoms: usize, n: usize) -> (CodeProducts, Array2<f64>, Array2<f64>, Array2<f64>, EdgeOperator) {
        let p = side * side;
        let s = build_edge_operator(side).unwrap();
        let x = rand_matrix(rng, 3 * atoms, n);
        let y = rand_matrix(rng, 3 * p, n);
        let z = rand_matrix(rng, 3 * p, 3 * atoms);
        let u = rand_matrix(rng, 3 * p, 3 * atoms) * 0.1;
        (CodeProducts::new(y.view(), x.view()).unwrap(), x, z, u, s)
    }

    #[test]
    fn ef_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_, _, z, u, s) = ef_fixture(&mut rng, 2, 3, 5);
        let y = rand_matrix(&mut rng, 12, 5);
        let zero = CodeProducts::new(y.view(), Array2::zeros((9, 5)).view()).unwrap();
        let c = TrainConfig { tau: 0.3, ..cfg(0.3) };
        let (e, f) = compute_ef(&zero, z.view(), u.view(), &s, &c).unwrap();
        assert_abs_diff_eq!(f, Array2::eye(9) * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e, (&z - &u) * 0.5, epsilon = 1e-15);

        let (prod, _, z, _, s) = ef_fixture(&mut rng, 2, 3, 5);
        let (e, _) = compute_ef(&prod, z.view(), z.view(), &s, &cfg(0.0)).unwrap();
        assert_abs_diff_eq!(e, &prod.yxt * (0.5 / 10.0), epsilon = 1e-14);
    }

    #[test]
    fn step1_objective_matches_direct_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (atoms, side, n) = (3, 2, 7);
        let p = side * side;
        let (_, x, z, u, s) = ef_fixture(&mut rng, side, atoms, n);
        let y = rand_matrix(&mut rng, 3 * p, n);
        let prod = CodeProducts::new(y.view(), x.view()).unwrap();
        let c = TrainConfig { gamma: 0.4, rho: 0.7, tau: 0.25, ..cfg(0.25) };
        let (e, f) = compute_ef(&prod, z.view(), u.view(), &s, &c).unwrap();
        let direct = |d: &Array2<f64>| {
            let nn = n as f64;
            let fit = (&y - &d.dot(&x)).iter().map(|v| v * v).sum::<f64>();
            let mz = apply_edge_form(&s, z.view(), false).unwrap();
            let edge = (&d.dot(&x) * &mz.dot(&x)).sum();
            let prox = (d - &z + &u).iter().map(|v| v * v).sum::<f64>();
            (1.0 - c.gamma) / (2.0 * nn) * fit + 2.0 * c.tau / nn * edge + 0.5 * c.rho * prox
        };
        let traced = |d: &Array2<f64>| trace_objective(d.view(), f.view(), e.view());
        let d1 = rand_dict(&mut rng, p, atoms).to_dense();
        let d2 = rand_dict(&mut rng, p, atoms).to_dense();
        let gap1 = direct(&d1) - traced(&d1);
        let gap2 = direct(&d2) - traced(&d2);
        assert!((gap1 - gap2).abs() <= 1e-9 * direct(&d1).abs().max(1.0));
    }

    #[test]
    fn step1_identity_f_projects_e() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, m) = (4, 3);
        let e = rand_matrix(&mut rng, 3 * p, 3 * m) * 1.5;
        let init = rand_dict(&mut rng, p, m);
        let d = admm_step1(e.view(), Array2::eye(3 * m).view(), &init).unwrap();
        for c in 0..3 {
            for k in 0..m {
                let col = e.slice(s![c * p..(c + 1) * p, c * m + k]).to_owned();
                let n = col.dot(&col).sqrt();
                let expect = if n > 1.0 { &col / n } else { col };
                for r in 0..p {
                    assert_abs_diff_eq!(d.block(c)[[r, k]], expect[r], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn step1_fixed_point_and_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (p, m) = (4, 3);
        let d0 = rand_dict(&mut rng, p, m);
        let g = rand_matrix(&mut rng, 3 * m, 3 * m + 2);
        let f = g.dot(&g.t()) + Array2::<f64>::eye(3 * m) * 0.1;
        let e = d0.to_dense().dot(&f);
        let d = admm_step1(e.view(), f.view(), &d0).unwrap();
        assert_abs_diff_eq!(d.to_dense(), d0.to_dense(), epsilon = 1e-10);

        let e = rand_matrix(&mut rng, 3 * p, 3 * m);
        let start = rand_dict(&mut rng, p, m);
        let d = admm_step1(e.view(), f.view(), &start).unwrap();
        let obj = |d: &BlockDiagonalDictionary| trace_objective(d.to_dense().view(), f.view(), e.view());
        assert!(obj(&d) <= obj(&start) + 1e-12);
    }

    #[test]
    fn trace_splitting_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, m) = (4, 5);
        let d = rand_dict(&mut rng, p, m);
        let dense = d.to_dense();
        let e = rand_matrix(&mut rng, 3 * p, 3 * m);
        let g = rand_matrix(&mut rng, 3 * m, 3 * m);
        let f = g.dot(&g.t());
        let full_e = (&e * &dense).sum();
        let full_f = (&dense.dot(&f) * &dense).sum();
        let (mut split_e, mut split_f) = (0.0, 0.0);
        for c in 0..3 {
            let ecc = e.slice(s![c * p..(c + 1) * p, c * m..(c + 1) * m]);
            let fcc = f.slice(s![c * m..(c + 1) * m, c * m..(c + 1) * m]);
            split_e += (&ecc * d.block(c)).sum();
            split_f += (&d.block(c).dot(&fcc) * d.block(c)).sum();
        }
        assert!((full_e - split_e).abs() <= 1e-10 * full_e.abs().max(1.0));
        assert!((full_f - split_f).abs() <= 1e-10 * full_f.abs().max(1.0));
    }

    #[test]
    fn step2_special_cases_and_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (side, m, n) = (3, 2, 6);
        let (prod, _, _, u, s) = ef_fixture(&mut rng, side, m, n);
        let d = rand_dict(&mut rng, side * side, m);
        let plain = &d.to_dense() + &u;
        let z0 = admm_step2(&d, u.view(), prod.xxt.view(), &s, 0.0, 1.0, n).unwrap();
        assert_abs_diff_eq!(z0, plain, epsilon = 1e-15);
        let zx = admm_step2(&d, u.view(), Array2::zeros((3 * m, 3 * m)).view(), &s, 0.4, 1.0, n).unwrap();
        assert_abs_diff_eq!(zx, plain, epsilon = 1e-15);

        let (tau, rho) = (0.3, 0.8);
        let z = admm_step2(&d, u.view(), prod.xxt.view(), &s, tau, rho, n).unwrap();
        let dense = d.to_dense();
        let md = apply_edge_form(&s, dense.view(), true).unwrap();
        let objective = |z: &Array2<f64>| {
            let coupling = (&md * &z.dot(&prod.xxt)).sum() * 2.0 * tau / n as f64;
            let prox = (&dense - z + &u).iter().map(|v| v * v).sum::<f64>();
            coupling + 0.5 * rho * prox
        };
        // The objective is quadratic in Z, so central differences are exact up
        // to rounding for any step.
        let h = 1e-2;
        let mut worst = 0.0f64;
        for idx in 0..z.len() {
            let (r, c) = (idx / z.ncols(), idx % z.ncols());
            let mut up = z.clone();
            up[[r, c]] += h;
            let mut down = z.clone();
            down[[r, c]] -= h;
            worst = worst.max(((objective(&up) - objective(&down)) / (2.0 * h)).abs());
        }
        assert!(worst <= 1e-8, "gradient {worst}");
    }

    #[test]
    fn step3_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = rand_dict(&mut rng, 4, 2);
        let u = rand_matrix(&mut rng, 12, 6);
        assert_abs_diff_eq!(admm_step3(u.view(), &d, d.to_dense().view()).unwrap(), u, epsilon = 1e-15);
        let zero = Array2::zeros((12, 6));
        assert_eq!(admm_step3(zero.view(), &d, zero.view()).unwrap(), d.to_dense());
    }

    #[test]
    fn hr_admm_without_coupling_matches_lr_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (p, m, n) = (4, 3, 40);
        let s = build_edge_operator(2).unwrap();
        let x = rand_matrix(&mut rng, 3 * m, n);
        let y = rand_matrix(&mut rng, 3 * p, n) * 2.0;
        let ts = TrainingSet::new(Array2::zeros((3 * p, n)), y.clone()).unwrap();
        let c = TrainConfig { tau: 0.0, rho: 0.01, admm_tolerance: 1e-12, admm_max_iterations: 5000, ..cfg(0.0) };
        let init = rand_dict(&mut rng, p, m);
        let admm = learn_hr_dictionary(&ts, x.view(), &s, &c, &init).unwrap();
        let prod = CodeProducts::new(y.view(), x.view()).unwrap();
        let mut reference = init.blocks().clone();
        for (ch, block) in reference.iter_mut().enumerate() {
            for _ in 0..100 {
                *block = learn_lr_dictionary(ts.hr_channel(ch), x.slice(s![ch * m..(ch + 1) * m, ..]), block.view()).unwrap();
            }
        }
        let reference = BlockDiagonalDictionary::new(reference).unwrap();
        let a = hr_objective(&prod, &admm.dh, &s, &c).unwrap();
        let b = hr_objective(&prod, &reference, &s, &c).unwrap();
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    #[test]
    fn hr_admm_recovers_planted_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (side, m, n) = (3, 4, 120);
        let p = side * side;
        let s = build_edge_operator(side).unwrap();
        let d0 = rand_dict(&mut rng, p, m);
        let x = rand_matrix(&mut rng, 3 * m, n);
        let y = d0.apply_matrix(x.view());
        let ts = TrainingSet::new(Array2::zeros((3, n)), y.clone()).unwrap();
        let c = TrainConfig { tau: 0.0, rho: 0.5, admm_tolerance: 1e-13, admm_max_iterations: 3000, ..cfg(0.0) };
        let r = learn_hr_dictionary(&ts, x.view(), &s, &c, &rand_dict(&mut rng, p, m)).unwrap();
        let err = (&y - &r.dh.apply_matrix(x.view())).iter().map(|v| v * v).sum::<f64>();
        assert!(err <= 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn coupling_lipschitz_bounds_gradient_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (side, m, n) = (3, 4, 50);
        let s = build_edge_operator(side).unwrap();
        let x = rand_matrix(&mut rng, 3 * m, n);
        let prod = CodeProducts::new(Array2::zeros((3 * side * side, n)).view(), x.view()).unwrap();
        let tau = 0.2;
        let l = coupling_lipschitz(&prod, &s, tau).unwrap();
        assert_eq!(coupling_lipschitz(&prod, &s, 0.0).unwrap(), 0.0);
        let grad = |z: &Array2<f64>| apply_edge_form(&s, z.dot(&prod.xxt).view(), false).unwrap() * (2.0 * tau / n as f64);
        for _ in 0..5 {
            let a = rand_matrix(&mut rng, 3 * side * side, 3 * m);
            let b = rand_matrix(&mut rng, 3 * side * side, 3 * m);
            assert!(frobenius(&(grad(&a) - grad(&b))) <= l * frobenius(&(&a - &b)) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn hr_admm_converges_under_strong_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (side, m, n) = (3, 4, 200);
        let p = side * side;
        let s = build_edge_operator(side).unwrap();
        let base = rand_matrix(&mut rng, m, n);
        let x = ndarray::concatenate![Axis(0), base, base, base];
        let y = rand_dict(&mut rng, p, m).apply_matrix(x.view());
        let ts = TrainingSet::new(Array2::zeros((3, n)), y).unwrap();
        let c = TrainConfig { tau: 0.05, rho: 0.1, admm_tolerance: 1e-6, admm_max_iterations: 2000, ..cfg(0.05) };
        let r = learn_hr_dictionary(&ts, x.view(), &s, &c, &rand_dict(&mut rng, p, m)).unwrap();
        assert!(r.converged, "residual {}", r.primal_residual);
        assert!(r.rho > c.rho);
    }

    #[test]
    fn hr_admm_rejects_empty_set() {
        let s = build_edge_operator(2).unwrap();
        let ts = TrainingSet::new(Array2::zeros((3, 0)), Array2::zeros((12, 0))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let d = rand_dict(&mut rng, 4, 2);
        assert!(learn_hr_dictionary(&ts, Array2::zeros((6, 0)).view(), &s, &cfg(0.0), &d).is_err());
    }

    fn planted(rng: &mut ChaCha8Rng, n: usize) -> (TrainingSet, EdgeOperator) {
        let (side, q, m) = (3, 12, 6);
        let dl = rand_dict(rng, q, m);
        let dh = rand_dict(rng, side * side, m);
        let x = sparse_codes(rng, m, n, 2);
        let ts = TrainingSet::new(dl.apply_matrix(x.view()), dh.apply_matrix(x.view())).unwrap();
        (ts, build_edge_operator(side).unwrap())
    }

    #[test]
    fn training_decreases_objective_and_keeps_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (ts, s) = planted(&mut rng, 150);
        let c = TrainConfig { atoms: 6, lambda: 0.02, tau: 0.0, outer_iterations: 1, seed: 3, ..Default::default() };
        let out = joint_dictionary_learning(&ts, &s, &c).unwrap();
        assert!(out.history[0].after_hr < out.initial_objective);
        let c = TrainConfig { tau: 0.01, outer_iterations: 4, ..c };
        let out = joint_dictionary_learning(&ts, &s, &c).unwrap();
        for rec in &out.history {
            assert!(rec.after_lr <= rec.after_coding + 1e-12);
            assert!(rec.after_hr <= rec.after_lr + 10.0 * c.admm_tolerance);
        }
        for w in out.history.windows(2) {
            assert!(w[1].after_coding <= w[0].after_hr + 1e-12);
        }
        assert!(column_norms(&out.dl).iter().chain(column_norms(&out.dh).iter()).all(|&v| v <= 1.0 + 1e-9));
    }

    #[test]
    fn training_needs_enough_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (ts, s) = planted(&mut rng, 5);
        let c = TrainConfig { atoms: 6, ..Default::default() };
        assert!(matches!(joint_dictionary_learning(&ts, &s, &c), Err(Error::InsufficientPatches { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (ts, s) = planted(&mut rng, 60);
        let c = TrainConfig { atoms: 6, lambda: 0.05, outer_iterations: 2, seed: 9, ..Default::default() };
        let a = joint_dictionary_learning(&ts, &s, &c).unwrap();
        let b = joint_dictionary_learning(&ts, &s, &c).unwrap();
        assert_eq!(a.dl, b.dl);
        assert_eq!(a.dh, b.dh);
    }

    #[test]
    fn dictionary_file_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let pair = DictionaryPair::new(rand_dict(&mut rng, 4 * 9, 5), rand_dict(&mut rng, 9, 5), 3, 2, 4).unwrap();
        let mut bytes = Vec::new();
        pair.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MCSR");
        assert_eq!(bytes.len(), 8 + 6 * 8 + 3 * (36 * 5 + 9 * 5) * 8 + 12);
        assert_eq!(DictionaryPair::read_from(bytes.as_slice()).unwrap(), pair);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DictionaryPair::read_from(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(DictionaryPair::read_from(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut wrong_meta = bytes.clone();
        let at = wrong_meta.len() - 4;
        wrong_meta[at..].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(DictionaryPair::read_from(wrong_meta.as_slice()), Err(Error::Format(_))));
        assert!(DictionaryPair::new(pair.lr.clone(), pair.hr.clone(), 2, 2, 4).is_err());
    }
}
