//! FISTA for `min_x xᵀQx − bᵀx + c + λ‖x‖₁`, and an exhaustive oracle.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::operators::JointQuadratic;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Relative objective change treated as stalled.
    pub tolerance: f64,
    /// Multiplier applied to the power-iteration estimate of the Lipschitz
    /// constant.
    pub lipschitz_safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iterations: 300, tolerance: 1e-7, lipschitz_safety: 1.05 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations must be ≥ 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::param("solver tolerance must be > 0"));
        }
        if !(self.lipschitz_safety >= 1.0) {
            return Err(Error::param("lipschitz safety factor must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub x: Array1<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Proximal map of `θ|·|`.
pub fn soft_threshold(v: f64, theta: f64) -> Result<f64> {
    if !(theta >= 0.0) {
        return Err(Error::param(format!("threshold must be ≥ 0, got {theta}")));
    }
    Ok(shrink(v, theta))
}

#[inline]
fn shrink(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

const POWER_MAX_ITERATIONS: usize = 5000;
const POWER_MIN_ITERATIONS: usize = 100;
const POWER_TOLERANCE: f64 = 1e-10;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn largest_eigenvalue(q: ArrayView2<f64>) -> Result<f64> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::dim("power iteration needs a square matrix"));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("matrix has non-finite entries"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    // Deterministic start with no exact symmetry that could hide the top
    // eigenvector.
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_75).fract());
    v /= v.dot(&v).sqrt();
    let mut eig = 0.0;
    for it in 0..POWER_MAX_ITERATIONS {
        let w = q.dot(&v);
        let next = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
        let change = (next - eig).abs();
        eig = next;
        if it + 1 >= POWER_MIN_ITERATIONS && change <= POWER_TOLERANCE * eig.abs() {
            break;
        }
    }
    Ok(eig.max(0.0))
}

/// Lipschitz constant of `x ↦ 2Qx − b`, inflated by the safety factor.
pub fn estimate_lipschitz(q: ArrayView2<f64>, cfg: &SolverConfig) -> Result<f64> {
    Ok(cfg.lipschitz_safety * 2.0 * largest_eigenvalue(q)?)
}

/// FISTA with function-value restart, starting from `x0` (zero if `None`).
pub fn fista_solve(q: &JointQuadratic, cfg: &SolverConfig, x0: Option<ArrayView1<f64>>) -> Result<SolverResult> {
    let l = estimate_lipschitz(q.curvature.view(), cfg)?;
    fista_solve_with_lipschitz(q, cfg, x0, l)
}

/// [`fista_solve`] with a precomputed Lipschitz constant `l ≥ 2λ_max(Q)`.
pub fn fista_solve_with_lipschitz(
    q: &JointQuadratic,
    cfg: &SolverConfig,
    x0: Option<ArrayView1<f64>>,
    lipschitz: f64,
) -> Result<SolverResult> {
    cfg.validate()?;
    let n = q.dim();
    let mut x = match x0 {
        Some(v) if v.len() != n => {
            return Err(Error::dim(format!("x0 has length {}, expected {n}", v.len())));
        }
        Some(v) if v.iter().any(|a| !a.is_finite()) => return Err(Error::param("x0 is not finite")),
        Some(v) => v.to_owned(),
        None => Array1::zeros(n),
    };
    if !(lipschitz.is_finite() && lipschitz >= 0.0) {
        return Err(Error::param(format!("invalid Lipschitz constant {lipschitz}")));
    }
    let step = 1.0 / lipschitz.max(1e-12);
    let threshold = q.lambda * step;
    let value = |x: &Array1<f64>, qx: &Array1<f64>| {
        x.dot(qx) - q.linear.dot(x) + q.constant + q.lambda * x.iter().map(|v| v.abs()).sum::<f64>()
    };

    let mut qx = q.curvature.dot(&x);
    let mut obj = value(&x, &qx);
    let mut y = x.clone();
    let mut qy = qx.clone();
    let mut t = 1.0f64;
    let mut momentum = false;
    let mut streak = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut cand = Array1::zeros(n);
        for i in 0..n {
            let g = 2.0 * qy[i] - q.linear[i];
            cand[i] = shrink(y[i] - step * g, threshold);
        }
        let q_cand = q.curvature.dot(&cand);
        let cand_obj = value(&cand, &q_cand);

        if cand_obj > obj {
            if !momentum {
                // A plain proximal step failed to descend: x is stationary up
                // to rounding.
                converged = true;
                break;
            }
            t = 1.0;
            y.assign(&x);
            qy.assign(&qx);
            momentum = false;
            streak = 0;
            continue;
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = &cand + &((&cand - &x) * beta);
        qy = &q_cand + &((&q_cand - &qx) * beta);
        momentum = beta != 0.0;

        let change = (obj - cand_obj).abs() / cand_obj.abs().max(1.0);
        x = cand;
        qx = q_cand;
        obj = cand_obj;
        t = t_next;

        if change < cfg.tolerance {
            streak += 1;
            if streak >= 3 {
                converged = true;
                break;
            }
        } else {
            streak = 0;
        }
    }

    Ok(SolverResult { x, objective: obj, iterations, converged })
}

/// Largest problem the exhaustive oracle accepts (`3^12 ≈ 5·10⁵` patterns).
pub const BRUTE_FORCE_MAX_DIM: usize = 12;

/// Global minimizer by enumerating every sign pattern in `{−, 0, +}ⁿ` and
/// solving the stationarity system `2Q_SS x_S = b_S − λ s_S` on its support.
pub fn brute_force_l1_qp(q: &JointQuadratic) -> Result<SolverResult> {
    let n = q.dim();
    if n > BRUTE_FORCE_MAX_DIM {
        return Err(Error::param(format!("brute force limited to dim ≤ {BRUTE_FORCE_MAX_DIM}, got {n}")));
    }
    let total = 3usize.pow(n as u32);
    let mut best_x = Array1::zeros(n);
    let mut best = q.objective(best_x.view());
    let mut signs = vec![0i8; n];
    for code in 0..total {
        let mut k = code;
        for s in signs.iter_mut() {
            *s = (k % 3) as i8 - 1;
            k /= 3;
        }
        let support: Vec<usize> = (0..n).filter(|&i| signs[i] != 0).collect();
        if support.is_empty() {
            continue;
        }
        let k = support.len();
        let a = nalgebra::DMatrix::from_fn(k, k, |i, j| 2.0 * q.curvature[[support[i], support[j]]]);
        let rhs = nalgebra::DVector::from_fn(k, |i, _| q.linear[support[i]] - q.lambda * f64::from(signs[support[i]]));
        let sol = match a.clone().lu().solve(&rhs) {
            Some(s) => s,
            None => match a.svd(true, true).solve(&rhs, 1e-12) {
                Ok(s) => s,
                Err(_) => continue,
            },
        };
        if support.iter().enumerate().any(|(i, &j)| sol[i] * f64::from(signs[j]) <= 0.0) {
            continue;
        }
        let mut x = Array1::zeros(n);
        for (i, &j) in support.iter().enumerate() {
            x[j] = sol[i];
        }
        let obj = q.objective(x.view());
        if obj < best {
            best = obj;
            best_x = x;
        }
    }
    Ok(SolverResult { x: best_x, objective: best, iterations: total, converged: true })
}

/// LASSO `½‖y − Dx‖² + λ‖x‖₁` through [`fista_solve`] with `Q = ½DᵀD`,
/// `b = Dᵀy`.
pub fn lasso_solve(d: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, cfg: &SolverConfig) -> Result<SolverResult> {
    if d.nrows() != y.len() {
        return Err(Error::dim(format!("dictionary has {} rows, signal has {}", d.nrows(), y.len())));
    }
    let mut gram = d.t().dot(&d) * 0.5;
    let t = gram.t().to_owned();
    gram = (gram + t) * 0.5;
    let problem = JointQuadratic::new(Arc::new(gram), d.t().dot(&y), 0.5 * y.dot(&y), lambda)?;
    fista_solve(&problem, cfg, None)
}

/// Curvature matrices and their Lipschitz constants keyed by `τ`, shared
/// between patch workers.
#[derive(Debug, Default)]
pub struct CurvatureCache {
    entries: RwLock<HashMap<u64, (Arc<Array2<f64>>, f64)>>,
}

impl CurvatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached `(Q(τ), L(τ))`, building it with `build` on a miss.
    pub fn get_or_insert_with(
        &self,
        tau: f64,
        build: impl FnOnce() -> Result<(Array2<f64>, f64)>,
    ) -> Result<(Arc<Array2<f64>>, f64)> {
        let key = tau.to_bits();
        if let Some((q, l)) = self.entries.read().expect("cache lock").get(&key) {
            return Ok((Arc::clone(q), *l));
        }
        let (q, l) = build()?;
        let mut w = self.entries.write().expect("cache lock");
        let entry = w.entry(key).or_insert_with(|| (Arc::new(q), l));
        Ok((Arc::clone(&entry.0), entry.1))
    }
}
