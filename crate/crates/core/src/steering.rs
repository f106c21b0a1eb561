//! Linear steering operators `F(tau)` with `g(tau) phi_n = sum_m F_nm(tau) phi_m`.
//!
//! Matrices act on atom rows: row `n` of `F(tau)` expresses the transformed
//! atom `n` in the untransformed atoms. Composition therefore reads
//! `F(a + b) = F(b) F(a)`.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use nalgebra::DMatrix;

pub use crate::group::{wrap_angle, GroupAction, SCALE_RANGE};

use crate::error::{contract, Error, Result};
use crate::frames::{transform_atoms, Frame, FrameFamily};
use crate::tensor::Tensor;

/// Residual above which a frame is treated as not steerable.
pub const STEERABILITY_THRESHOLD: f64 = 0.05;

/// Tikhonov damping of the least-squares steering fit for linearly
/// dependent atom sets.
pub const DAMPING: f64 = 1e-10;

/// Highest derivative order with a closed-form rotation block.
pub const MAX_ANALYTIC_ORDER: usize = 2;

#[derive(Debug, Clone)]
pub struct SteeringMap {
    pub tau: Vec<f64>,
    pub matrix: DMatrix<f64>,
    /// `||F Phi - Phi_tau||_F / ||Phi_tau||_F`.
    pub residual: f64,
}

impl SteeringMap {
    pub fn is_steerable(&self) -> bool {
        self.residual <= STEERABILITY_THRESHOLD
    }

    /// Turns a soft steerability failure into an error.
    pub fn require_steerable(self) -> Result<Self> {
        if self.is_steerable() {
            Ok(self)
        } else {
            Err(Error::NotSteerable {
                tau: self.tau,
                residual: self.residual,
            })
        }
    }
}

/// Least-squares fit of `F(tau)` over all atoms.
///
/// Soft failure: a non-steerable frame still yields a map; check
/// [`SteeringMap::is_steerable`] or call [`SteeringMap::require_steerable`].
pub fn solve_steering(frame: &Frame, action: GroupAction, tau: &[f64]) -> Result<SteeringMap> {
    action.validate(tau)?;
    let transformed = transform_atoms(frame, action, tau)?;
    Ok(fit_steering(frame, &transformed, tau))
}

fn fit_steering(frame: &Frame, transformed: &Tensor, tau: &[f64]) -> SteeringMap {
    let m = frame.atom_count();
    let d = frame.size() * frame.size();
    let phi = frame.matrix();
    let target = DMatrix::from_row_slice(m, d, transformed.data());
    // Linearly independent atoms get the exact normal-equation solution; the
    // damping only regularizes dependent (overcomplete) atom sets.
    let raw_gram = &phi * phi.transpose();
    let independent = frame.info().rank == m;
    let gram = if independent {
        raw_gram
    } else {
        raw_gram + DMatrix::identity(m, m) * DAMPING
    };
    let rhs = &phi * target.transpose();
    // F^T = gram^{-1} Phi Phi_tau^T since the gram matrix is symmetric.
    let ft = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| gram.lu().solve(&rhs).unwrap_or_else(|| DMatrix::zeros(m, m)));
    let matrix = ft.transpose();
    let fitted = &matrix * &phi;
    let denom = target.norm();
    let residual = if denom > 0.0 {
        (fitted - &target).norm() / denom
    } else {
        0.0
    };
    SteeringMap {
        tau: tau.to_vec(),
        matrix,
        residual,
    }
}

/// First row of the order-`n` rotation block: the weights that synthesize
/// the rotated `d^n/dx^n` derivative from the order-`n` derivatives (raw,
/// unnormalized generators). Order 2 gives `(cos^2, 2 sin cos, sin^2)`.
pub fn analytic_rotation_coeffs(order: usize, tau: f64) -> Result<Vec<f64>> {
    let block = analytic_rotation_block(order, tau)?;
    Ok(block.row(0).iter().copied().collect())
}

/// Full order-`n` rotation block in the raw derivative basis, rows and
/// columns ordered by `p` descending.
pub fn analytic_rotation_block(order: usize, tau: f64) -> Result<DMatrix<f64>> {
    let (c, s) = (tau.cos(), tau.sin());
    match order {
        0 => Ok(DMatrix::from_element(1, 1, 1.0)),
        1 => Ok(DMatrix::from_row_slice(2, 2, &[c, s, -s, c])),
        2 => Ok(DMatrix::from_row_slice(
            3,
            3,
            &[
                c * c,
                2.0 * s * c,
                s * s,
                -s * c,
                c * c - s * s,
                s * c,
                s * s,
                -2.0 * s * c,
                c * c,
            ],
        )),
        n => contract(format!(
            "closed-form rotation steering is available up to order {MAX_ANALYTIC_ORDER}, got {n}"
        )),
    }
}

/// Derivative of [`analytic_rotation_block`] with respect to `tau`.
pub fn analytic_rotation_block_derivative(order: usize, tau: f64) -> Result<DMatrix<f64>> {
    let (c, s) = (tau.cos(), tau.sin());
    match order {
        0 => Ok(DMatrix::zeros(1, 1)),
        1 => Ok(DMatrix::from_row_slice(2, 2, &[-s, c, -c, -s])),
        2 => {
            let (cc, ss, sc) = (c * c, s * s, s * c);
            Ok(DMatrix::from_row_slice(
                3,
                3,
                &[
                    -2.0 * sc,
                    2.0 * (cc - ss),
                    2.0 * sc,
                    -(cc - ss),
                    -4.0 * sc,
                    cc - ss,
                    2.0 * sc,
                    -2.0 * (cc - ss),
                    -2.0 * sc,
                ],
            ))
        }
        n => contract(format!(
            "closed-form rotation steering is available up to order {MAX_ANALYTIC_ORDER}, got {n}"
        )),
    }
}

/// Closed-form rotation steering for frames whose atoms are complete
/// derivative (or monomial) orders up to [`MAX_ANALYTIC_ORDER`].
///
/// The block matrix acts on raw generators; atoms are normalized, so the
/// normalized operator is `D^{-1} A(tau) D` with `D = diag(frame.scales())`.
#[derive(Debug, Clone)]
pub struct AnalyticRotation {
    /// `(start, order)` of each derivative-order block.
    blocks: Vec<(usize, usize)>,
    scales: Vec<f64>,
}

impl AnalyticRotation {
    pub fn new(frame: &Frame) -> Result<Self> {
        if !matches!(frame.family(), FrameFamily::GaussianDerivative | FrameFamily::Naive) {
            return Err(Error::Config(format!(
                "closed-form rotation steering needs a derivative or monomial frame, got {}",
                frame.family()
            )));
        }
        let orders = frame.orders().expect("continuous frames carry orders");
        let mut blocks = Vec::new();
        let mut i = 0;
        while i < orders.len() {
            let n = orders[i].0 + orders[i].1;
            if n > MAX_ANALYTIC_ORDER {
                return Err(Error::Config(format!(
                    "closed-form rotation steering covers orders up to {MAX_ANALYTIC_ORDER}, frame has order {n}"
                )));
            }
            for (j, p) in (0..=n).rev().enumerate() {
                if orders.get(i + j) != Some(&(p, n - p)) {
                    return Err(Error::Config(format!(
                        "order-{n} atoms of the frame are incomplete; closed-form rotation needs every (p, q) with p + q = {n}"
                    )));
                }
            }
            blocks.push((i, n));
            i += n + 1;
        }
        Ok(Self {
            blocks,
            scales: frame.scales().to_vec(),
        })
    }

    pub fn atom_count(&self) -> usize {
        self.scales.len()
    }

    /// Steering matrix in the raw derivative basis.
    pub fn raw_matrix(&self, tau: f64) -> DMatrix<f64> {
        let m = self.atom_count();
        let mut out = DMatrix::zeros(m, m);
        for &(start, n) in &self.blocks {
            let b = analytic_rotation_block(n, tau).expect("orders validated");
            out.view_mut((start, start), (n + 1, n + 1)).copy_from(&b);
        }
        out
    }

    /// Writes the normalized steering matrix and its `tau` derivative,
    /// both `M x M` row-major.
    pub fn eval_into(&self, tau: f64, f: &mut [f64], df: &mut [f64]) {
        let m = self.atom_count();
        f.iter_mut().for_each(|v| *v = 0.0);
        df.iter_mut().for_each(|v| *v = 0.0);
        let (c, s) = (tau.cos(), tau.sin());
        for &(start, n) in &self.blocks {
            let (b, db): (Vec<f64>, Vec<f64>) = match n {
                0 => (vec![1.0], vec![0.0]),
                1 => (vec![c, s, -s, c], vec![-s, c, -c, -s]),
                _ => {
                    let (cc, ss, sc) = (c * c, s * s, s * c);
                    (
                        vec![cc, 2.0 * sc, ss, -sc, cc - ss, sc, ss, -2.0 * sc, cc],
                        vec![
                            -2.0 * sc,
                            2.0 * (cc - ss),
                            2.0 * sc,
                            -(cc - ss),
                            -4.0 * sc,
                            cc - ss,
                            2.0 * sc,
                            -2.0 * (cc - ss),
                            -2.0 * sc,
                        ],
                    )
                }
            };
            let w = n + 1;
            for i in 0..w {
                for j in 0..w {
                    let (r, col) = (start + i, start + j);
                    let ratio = self.scales[col] / self.scales[r];
                    f[r * m + col] = b[i * w + j] * ratio;
                    df[r * m + col] = db[i * w + j] * ratio;
                }
            }
        }
    }

    pub fn matrix(&self, tau: f64) -> DMatrix<f64> {
        let m = self.atom_count();
        let (mut f, mut df) = (vec![0.0; m * m], vec![0.0; m * m]);
        self.eval_into(tau, &mut f, &mut df);
        DMatrix::from_row_slice(m, m, &f)
    }
}

/// Converts a steering matrix between the normalized atoms and the raw
/// generators: `A = D F D^{-1}`.
pub fn to_raw_basis(frame: &Frame, normalized: &DMatrix<f64>) -> DMatrix<f64> {
    let s = frame.scales();
    DMatrix::from_fn(normalized.nrows(), normalized.ncols(), |i, j| {
        normalized[(i, j)] * s[i] / s[j]
    })
}

/// Scale steering matrices fitted at evenly spaced factors over
/// [`SCALE_RANGE`] and linearly interpolated in between.
#[derive(Debug, Clone)]
pub struct ScaleSteeringCurve {
    knots: Vec<f64>,
    matrices: Vec<Vec<f64>>,
    atom_count: usize,
    pub max_residual: f64,
}

impl ScaleSteeringCurve {
    pub const DEFAULT_KNOTS: usize = 15;

    pub fn fit(frame: &Frame, knots: usize) -> Result<Self> {
        if knots < 2 {
            return contract("a scale curve needs at least two knots");
        }
        let mut ks = Vec::new();
        let mut mats = Vec::new();
        let mut worst = 0.0f64;
        for tau in GroupAction::Scaling.samples(knots) {
            let map = solve_steering(frame, GroupAction::Scaling, &tau)?;
            worst = worst.max(map.residual);
            ks.push(tau[0]);
            mats.push(map.matrix.transpose().as_slice().to_vec());
        }
        Ok(Self {
            knots: ks,
            matrices: mats,
            atom_count: frame.atom_count(),
            max_residual: worst,
        })
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    /// Interpolated matrix (row-major) and its derivative in the scale factor.
    /// Factors outside the fitted range are clamped, with zero derivative.
    pub fn eval_into(&self, scale: f64, f: &mut [f64], df: &mut [f64]) {
        let n = self.knots.len();
        let (lo, hi) = (self.knots[0], self.knots[n - 1]);
        let s = scale.clamp(lo, hi);
        let step = (hi - lo) / (n - 1) as f64;
        let seg = (((s - lo) / step).floor() as usize).min(n - 2);
        let t = (s - self.knots[seg]) / step;
        let inside = scale > lo && scale < hi;
        let (a, b) = (&self.matrices[seg], &self.matrices[seg + 1]);
        for i in 0..f.len() {
            f[i] = a[i] * (1.0 - t) + b[i] * t;
            df[i] = if inside { (b[i] - a[i]) / step } else { 0.0 };
        }
    }
}

/// Rotation steering matrices fitted at evenly spaced angles and linearly
/// interpolated around the circle. Used for frames without closed-form
/// rotation steering (e.g. the spanning per-axis Gaussian layout).
#[derive(Debug, Clone)]
pub struct RotationSteeringCurve {
    matrices: Vec<Vec<f64>>,
    atom_count: usize,
    pub max_residual: f64,
}

impl RotationSteeringCurve {
    pub const DEFAULT_KNOTS: usize = 72;

    pub fn fit(frame: &Frame, knots: usize) -> Result<Self> {
        if knots < 4 {
            return contract("a rotation curve needs at least four knots");
        }
        let mut mats = Vec::new();
        let mut worst = 0.0f64;
        for tau in GroupAction::Rotation.samples(knots) {
            let map = solve_steering(frame, GroupAction::Rotation, &tau)?;
            worst = worst.max(map.residual);
            mats.push(map.matrix.transpose().as_slice().to_vec());
        }
        Ok(Self {
            matrices: mats,
            atom_count: frame.atom_count(),
            max_residual: worst,
        })
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    /// Interpolated matrix (row-major) and its angle derivative; any real
    /// angle is accepted and wrapped.
    pub fn eval_into(&self, tau: f64, f: &mut [f64], df: &mut [f64]) {
        let n = self.matrices.len();
        let step = 2.0 * PI / n as f64;
        let u = (tau + PI).rem_euclid(2.0 * PI) / step;
        let seg = (u.floor() as usize).min(n - 1);
        let t = u - seg as f64;
        let (a, b) = (&self.matrices[seg], &self.matrices[(seg + 1) % n]);
        for i in 0..f.len() {
            f[i] = a[i] * (1.0 - t) + b[i] * t;
            df[i] = (b[i] - a[i]) / step;
        }
    }
}

/// Synthesizes the steered kernel `sum_n w_n sum_m F_nm phi_m` (`K x K`).
pub fn steer_filter(frame: &Frame, weights: &[f64], map: &SteeringMap) -> Result<Tensor> {
    let m = frame.atom_count();
    if weights.len() != m {
        return contract(format!("{} weights for a frame with {m} atoms", weights.len()));
    }
    if map.matrix.nrows() != m || map.matrix.ncols() != m {
        return contract(format!(
            "steering matrix is {}x{}, frame has {m} atoms",
            map.matrix.nrows(),
            map.matrix.ncols()
        ));
    }
    let coeffs: Vec<f64> = (0..m)
        .map(|col| (0..m).map(|n| weights[n] * map.matrix[(n, col)]).sum())
        .collect();
    let k = frame.size();
    Tensor::new(vec![k, k], frame.synthesize(&coeffs)?)
}

#[derive(Debug, Clone)]
pub struct EquivarianceRow {
    pub tau: Vec<f64>,
    pub residual: f64,
    /// `max_j max|F(tau_j) F(tau) - F(tau + tau_j)|` over the sampled angles;
    /// rotation only.
    pub composition_defect: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EquivarianceReport {
    pub action: GroupAction,
    pub rows: Vec<EquivarianceRow>,
    pub max_residual: f64,
    pub max_composition_defect: Option<f64>,
    pub tolerance: f64,
}

impl EquivarianceReport {
    pub fn passed(&self) -> bool {
        self.max_residual <= self.tolerance
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,residual,composition_defect\n");
        for r in &self.rows {
            let tau = r
                .tau
                .iter()
                .map(|t| format!("{t:.10}"))
                .collect::<Vec<_>>()
                .join(";");
            let defect = r
                .composition_defect
                .map_or_else(|| "NA".to_string(), |d| format!("{d:.6e}"));
            out.push_str(&format!("{tau},{:.6e},{defect}\n", r.residual));
        }
        out
    }
}

/// Samples `sample_count` parameters evenly over the action's range and
/// reports fit residuals (and, for rotations, composition defects).
pub fn verify_equivariance(
    frame: &Frame,
    action: GroupAction,
    sample_count: usize,
    tolerance: f64,
) -> Result<EquivarianceReport> {
    if sample_count < 2 {
        return contract("verification needs at least two samples");
    }
    let taus = action.samples(sample_count);
    let maps: Vec<SteeringMap> = taus
        .iter()
        .map(|t| solve_steering(frame, action, t))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(maps.len());
    for map in &maps {
        let composition_defect = if action == GroupAction::Rotation {
            let mut worst = 0.0f64;
            for other in &maps {
                let sum = wrap_angle(map.tau[0] + other.tau[0]);
                let direct = solve_steering(frame, action, &[sum])?;
                let composed = &other.matrix * &map.matrix;
                worst = worst.max((composed - direct.matrix).abs().max());
            }
            Some(worst)
        } else {
            None
        };
        rows.push(EquivarianceRow {
            tau: map.tau.clone(),
            residual: map.residual,
            composition_defect,
        });
    }
    let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let max_composition_defect = rows
        .iter()
        .filter_map(|r| r.composition_defect)
        .reduce(f64::max);
    Ok(EquivarianceReport {
        action,
        rows,
        max_residual,
        max_composition_defect,
        tolerance,
    })
}

/// Grain of the parameter quantization used by [`SteeringCache`].
pub const CACHE_GRAIN: f64 = 1e-4;

/// Bounded least-recently-used cache of solved steering maps.
///
/// Parameters are snapped to a `1e-4` grid before solving, on hits and
/// misses alike, so results never depend on the cache state.
pub struct SteeringCache {
    frame: Frame,
    action: GroupAction,
    capacity: usize,
    entries: Mutex<IndexMap<Vec<i64>, Arc<SteeringMap>>>,
}

impl SteeringCache {
    pub fn new(frame: Frame, action: GroupAction, capacity: usize) -> Self {
        Self {
            frame,
            action,
            capacity: capacity.max(1),
            entries: Mutex::new(IndexMap::new()),
        }
    }

    pub fn quantize(tau: &[f64]) -> Vec<i64> {
        tau.iter().map(|t| (t / CACHE_GRAIN).round() as i64).collect()
    }

    pub fn get(&self, tau: &[f64]) -> Result<Arc<SteeringMap>> {
        let key = Self::quantize(tau);
        {
            let mut entries = self.entries.lock().expect("cache lock poisoned");
            if let Some(idx) = entries.get_index_of(&key) {
                let last = entries.len() - 1;
                entries.move_index(idx, last);
                return Ok(entries[last].clone());
            }
        }
        let snapped: Vec<f64> = key.iter().map(|&q| q as f64 * CACHE_GRAIN).collect();
        let snapped = match self.action {
            GroupAction::Rotation | GroupAction::RotationScaling => {
                let mut s = snapped;
                s[0] = wrap_angle(s[0]);
                if s[0] >= PI {
                    s[0] -= 2.0 * PI;
                }
                s
            }
            GroupAction::Scaling => snapped,
        };
        let map = Arc::new(solve_steering(&self.frame, self.action, &snapped)?);
        let mut entries = self.entries.lock().expect("cache lock poisoned");
        entries.insert(key, map.clone());
        while entries.len() > self.capacity {
            entries.shift_remove_index(0);
        }
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
