//! Sampled `K x K` filter frames and their frame-theoretic diagnostics.
//!
//! Grid convention: atom element `[m, row, col]` sits at continuous
//! coordinates `(x, y) = (col - r, row - r)` with `r = (K - 1) / 2`.
//! Atoms are L2-normalized; the pre-normalization norms are kept in
//! [`Frame::scales`] so analytic relations between raw generators can be
//! mapped onto the normalized atoms.
//!
//! Atom ordering for derivative and monomial families is by total order
//! ascending, then by the x-order `p` descending.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::group::GroupAction;
use crate::io;
use crate::tensor::Tensor;

/// Bump when the atom ordering changes; stored in frame metadata.
pub const ORDERING_VERSION: u32 = 1;

/// Largest supported kernel size.
pub const MAX_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFamily {
    Pixel,
    GaussianDerivative,
    Framelet,
    Naive,
    /// Atoms supplied directly (random frames, files without metadata, duals).
    Custom,
}

impl fmt::Display for FrameFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameFamily::Pixel => "pixel",
            FrameFamily::GaussianDerivative => "gaussian_derivative",
            FrameFamily::Framelet => "framelet",
            FrameFamily::Naive => "naive",
            FrameFamily::Custom => "custom",
        })
    }
}

impl FromStr for FrameFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pixel" => Ok(FrameFamily::Pixel),
            "gauss" | "gaussian" | "gaussian_derivative" => Ok(FrameFamily::GaussianDerivative),
            "framelet" => Ok(FrameFamily::Framelet),
            "naive" => Ok(FrameFamily::Naive),
            "custom" => Ok(FrameFamily::Custom),
            other => Err(Error::Config(format!("unknown frame family '{other}'"))),
        }
    }
}

/// Which derivative orders a Gaussian-derivative frame contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeSet {
    /// `p <= n` and `q <= n`: `(n + 1)^2` atoms. With `K = 3, n = 2` this is
    /// the 9-atom set that spans the pixel space.
    PerAxis,
    /// `p + q <= n`: `(n + 1)(n + 2) / 2` atoms, closed under rotation.
    TotalOrder,
}

impl fmt::Display for DerivativeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DerivativeSet::PerAxis => "per_axis",
            DerivativeSet::TotalOrder => "total",
        })
    }
}

impl FromStr for DerivativeSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "per_axis" | "peraxis" => Ok(DerivativeSet::PerAxis),
            "total" | "total_order" => Ok(DerivativeSet::TotalOrder),
            other => Err(Error::Config(format!("unknown derivative set '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    /// Gaussian scale in pixels.
    pub sigma: Option<f64>,
    pub max_order: Option<usize>,
    pub set: Option<DerivativeSet>,
}

#[derive(Debug, Clone)]
pub struct Frame {
    atoms: Tensor,
    family: FrameFamily,
    size: usize,
    params: FrameParams,
    /// `(p, q)` derivative / monomial orders per atom, for continuous families.
    orders: Option<Vec<(usize, usize)>>,
    scales: Vec<f64>,
}

/// Frame bounds and related diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInfo {
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// Ratio of largest to smallest eigenvalue of the `M x M` Gram matrix
    /// (infinite when the atoms are linearly dependent).
    pub gram_condition: f64,
    pub rank: usize,
    pub dimension: usize,
    pub min_singular_value: f64,
}

impl FrameInfo {
    /// Whether the atoms span the whole ambient space.
    pub fn spanning(&self) -> bool {
        self.rank == self.dimension
    }

    pub fn is_tight(&self, tol: f64) -> bool {
        self.spanning() && (self.upper_bound - self.lower_bound).abs() <= tol
    }
}

fn check_size(k: usize) -> Result<()> {
    if k % 2 == 0 || k == 0 {
        return contract(format!("kernel size must be odd and positive, got {k}"));
    }
    if k > MAX_KERNEL {
        return contract(format!("kernel size {k} exceeds the supported maximum {MAX_KERNEL}"));
    }
    Ok(())
}

fn radius(k: usize) -> isize {
    (k / 2) as isize
}

/// `(p, q)` pairs with `p + q <= n`, total order ascending then `p` descending.
pub fn total_order_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for total in 0..=n {
        for p in (0..=total).rev() {
            out.push((p, total - p));
        }
    }
    out
}

/// `(p, q)` pairs with `p, q <= n`, same ordering as [`total_order_pairs`].
pub fn per_axis_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for total in 0..=2 * n {
        for p in (0..=total.min(n)).rev() {
            if total - p <= n {
                out.push((p, total - p));
            }
        }
    }
    out
}

/// Probabilists' Hermite polynomial `He_n(t)`.
fn hermite(n: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, t);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = t * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `d^p/dx^p d^q/dy^q exp(-(x^2 + y^2) / (2 sigma^2))`.
pub fn gaussian_derivative(p: usize, q: usize, x: f64, y: f64, sigma: f64) -> f64 {
    let axis = |n: usize, t: f64| (-1.0 / sigma).powi(n as i32) * hermite(n, t / sigma);
    axis(p, x) * axis(q, y) * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
}

impl Frame {
    /// Wraps atoms `[M, K, K]`, L2-normalizing each one.
    pub fn from_atoms(atoms: Tensor, family: FrameFamily) -> Result<Self> {
        let (m, k) = match *atoms.shape() {
            [m, k, k2] if k == k2 => (m, k),
            _ => return contract(format!("atoms must be [M,K,K], got {:?}", atoms.shape())),
        };
        check_size(k)?;
        let kk = k * k;
        let mut data = atoms.into_data();
        let mut scales = Vec::with_capacity(m);
        for a in 0..m {
            let atom = &mut data[a * kk..(a + 1) * kk];
            let norm = atom.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-300 {
                return contract(format!("atom {a} is identically zero"));
            }
            atom.iter_mut().for_each(|v| *v /= norm);
            scales.push(norm);
        }
        Ok(Self {
            atoms: Tensor::new(vec![m, k, k], data)?,
            family,
            size: k,
            params: FrameParams {
                sigma: None,
                max_order: None,
                set: None,
            },
            orders: None,
            scales,
        })
    }

    fn from_generator(
        k: usize,
        family: FrameFamily,
        params: FrameParams,
        orders: Vec<(usize, usize)>,
        f: impl Fn(usize, usize, f64, f64) -> f64,
    ) -> Result<Self> {
        let r = radius(k);
        let m = orders.len();
        let atoms = Tensor::from_fn(&[m, k, k], |i| {
            let (a, row, col) = (i / (k * k), (i / k) % k, i % k);
            let (p, q) = orders[a];
            f(p, q, (col as isize - r) as f64, (row as isize - r) as f64)
        });
        let mut frame = Self::from_atoms(atoms, family)?;
        frame.params = params;
        frame.orders = Some(orders);
        Ok(frame)
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn family(&self) -> FrameFamily {
        self.family
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.shape()[0]
    }

    pub fn params(&self) -> &FrameParams {
        &self.params
    }

    pub fn orders(&self) -> Option<&[(usize, usize)]> {
        self.orders.as_deref()
    }

    /// Norms of the raw generator samples before normalization.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// True when atoms come from an analytic continuous generator.
    pub fn continuous(&self) -> bool {
        matches!(self.family, FrameFamily::GaussianDerivative | FrameFamily::Naive)
    }

    pub fn atom(&self, m: usize) -> &[f64] {
        let kk = self.size * self.size;
        &self.atoms.data()[m * kk..(m + 1) * kk]
    }

    /// Atoms as rows of an `M x K^2` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let kk = self.size * self.size;
        DMatrix::from_row_slice(self.atom_count(), kk, self.atoms.data())
    }

    /// Frame coefficients `<x, phi_m>` of a flattened `K x K` patch.
    pub fn analyze(&self, patch: &[f64]) -> Result<Vec<f64>> {
        if patch.len() != self.size * self.size {
            return contract(format!("patch of length {} for a {}x{} frame", patch.len(), self.size, self.size));
        }
        Ok((0..self.atom_count())
            .map(|m| self.atom(m).iter().zip(patch).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `sum_m c_m phi_m` as a flattened `K x K` patch.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.atom_count() {
            return contract(format!("{} coefficients for {} atoms", coeffs.len(), self.atom_count()));
        }
        let mut out = vec![0.0; self.size * self.size];
        for (m, c) in coeffs.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.atom(m)) {
                *o += c * a;
            }
        }
        Ok(out)
    }

    /// Raw generator value of atom `m` at `(x, y)` for continuous families,
    /// with the Gaussian scale overridden by `sigma`.
    fn generator(&self, m: usize, x: f64, y: f64, sigma: f64) -> f64 {
        let (p, q) = self.orders.as_ref().expect("continuous frame has orders")[m];
        match self.family {
            FrameFamily::GaussianDerivative => gaussian_derivative(p, q, x, y, sigma),
            FrameFamily::Naive => {
                let r = radius(self.size).max(1) as f64;
                (x / r).powi(p as i32) * (y / r).powi(q as i32)
            }
            _ => unreachable!("generator called on a sampled family"),
        }
    }

    pub fn info(&self) -> FrameInfo {
        let rows: Vec<Vec<f64>> = (0..self.atom_count()).map(|m| self.atom(m).to_vec()).collect();
        bounds_of_vectors(&rows)
    }
}

pub fn make_pixel_frame(k: usize) -> Result<Frame> {
    check_size(k)?;
    let kk = k * k;
    let atoms = Tensor::from_fn(&[kk, k, k], |i| if i / kk == i % kk { 1.0 } else { 0.0 });
    Frame::from_atoms(atoms, FrameFamily::Pixel)
}

/// Gaussian-derivative frame sampled on the integer grid.
pub fn make_gaussian_derivative_frame(
    k: usize,
    sigma: f64,
    max_order: usize,
    set: DerivativeSet,
) -> Result<Frame> {
    check_size(k)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return contract(format!("sigma must be positive, got {sigma}"));
    }
    if max_order < 1 {
        return contract("max_order must be at least 1");
    }
    let orders = match set {
        DerivativeSet::PerAxis => per_axis_pairs(max_order),
        DerivativeSet::TotalOrder => total_order_pairs(max_order),
    };
    Frame::from_generator(
        k,
        FrameFamily::GaussianDerivative,
        FrameParams {
            sigma: Some(sigma),
            max_order: Some(max_order),
            set: Some(set),
        },
        orders,
        |p, q, x, y| gaussian_derivative(p, q, x, y, sigma),
    )
}

/// Piecewise-linear framelet filters `h0, h1, h2`.
pub fn framelet_filters() -> [[f64; 3]; 3] {
    let s = std::f64::consts::SQRT_2 / 4.0;
    [
        [0.25, 0.5, 0.25],
        [s, 0.0, -s],
        [-0.25, 0.5, -0.25],
    ]
}

/// Tensor-product framelet frame; atom `3 * i + j` is `h_i (rows) x h_j (cols)`.
pub fn make_framelet_frame(k: usize) -> Result<Frame> {
    if k != 3 {
        return contract(format!("framelet frame is defined for K = 3 only, got {k}"));
    }
    let h = framelet_filters();
    let atoms = Tensor::from_fn(&[9, 3, 3], |i| {
        let (a, row, col) = (i / 9, (i / 3) % 3, i % 3);
        h[a / 3][row] * h[a % 3][col]
    });
    Frame::from_atoms(atoms, FrameFamily::Framelet)
}

/// Monomials `x^p y^q`, `p + q <= max_order`, on grid coordinates scaled to `[-1, 1]`.
pub fn make_naive_frame(k: usize, max_order: usize) -> Result<Frame> {
    check_size(k)?;
    if max_order < 1 {
        return contract("max_order must be at least 1");
    }
    let r = radius(k).max(1) as f64;
    Frame::from_generator(
        k,
        FrameFamily::Naive,
        FrameParams {
            sigma: None,
            max_order: Some(max_order),
            set: None,
        },
        total_order_pairs(max_order),
        |p, q, x, y| (x / r).powi(p as i32) * (y / r).powi(q as i32),
    )
}

/// `count` atoms with independent standard normal entries.
pub fn make_random_frame(k: usize, count: usize, seed: u64) -> Result<Frame> {
    check_size(k)?;
    if count == 0 {
        return contract("a frame needs at least one atom");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = Tensor::from_fn(&[count, k, k], |_| {
        // Box-Muller keeps this independent of distribution crates.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    Frame::from_atoms(atoms, FrameFamily::Custom)
}

/// Frame bounds of an arbitrary finite family of vectors of equal length.
///
/// `A` and `B` are the extreme eigenvalues of the frame operator
/// `S = sum_m v_m v_m^T`; `A` is reported as exactly zero when the vectors
/// do not span the ambient space.
pub fn bounds_of_vectors(vectors: &[Vec<f64>]) -> FrameInfo {
    let m = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    let rows = DMatrix::from_fn(m, d, |i, j| vectors[i][j]);
    let s = rows.transpose() * &rows;
    let eig = SymmetricEigen::new(s).eigenvalues;
    let upper = eig.iter().copied().fold(0.0f64, f64::max);
    let lower = eig.iter().copied().fold(f64::INFINITY, f64::min);

    let sv = rows.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0f64, f64::max);
    let tol = 1e-9 * smax.max(1.0);
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let min_sv = if rank == d {
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };

    let gram = &rows * rows.transpose();
    let geig = SymmetricEigen::new(gram).eigenvalues;
    let gmax = geig.iter().copied().fold(0.0f64, f64::max);
    let gmin = geig.iter().copied().fold(f64::INFINITY, f64::min);
    let gram_condition = if rank == m && gmin > 0.0 { gmax / gmin } else { f64::INFINITY };

    FrameInfo {
        lower_bound: if rank == d { lower.max(0.0) } else { 0.0 },
        upper_bound: upper,
        gram_condition,
        rank,
        dimension: d,
        min_singular_value: min_sv,
    }
}

/// Canonical dual vectors `S^{-1} v_m`.
pub fn dual_vectors(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let info = bounds_of_vectors(vectors);
    if info.lower_bound <= 1e-10 {
        return Err(Error::NonInvertible {
            lower_bound: info.lower_bound,
        });
    }
    let d = info.dimension;
    let rows = DMatrix::from_fn(vectors.len(), d, |i, j| vectors[i][j]);
    let s = rows.transpose() * &rows;
    let chol = s.cholesky().ok_or(Error::NonInvertible {
        lower_bound: info.lower_bound,
    })?;
    Ok(vectors
        .iter()
        .map(|v| chol.solve(&DVector::from_column_slice(v)).iter().copied().collect())
        .collect())
}

/// Dual frame: atoms `S^{-1} vec(phi_m)`, so that
/// `sum_m <x, phi_m> dual_m = x` for every patch `x`.
pub fn dual_frame(frame: &Frame) -> Result<Frame> {
    let rows: Vec<Vec<f64>> = (0..frame.atom_count()).map(|m| frame.atom(m).to_vec()).collect();
    let duals = dual_vectors(&rows)?;
    let k = frame.size();
    let atoms = Tensor::new(
        vec![duals.len(), k, k],
        duals.into_iter().flatten().collect(),
    )?;
    // Dual atoms are not unit norm; keep them as computed.
    Ok(Frame {
        scales: vec![1.0; frame.atom_count()],
        atoms,
        family: FrameFamily::Custom,
        size: k,
        params: frame.params.clone(),
        orders: frame.orders.clone(),
    })
}

pub fn frame_bounds(frame: &Frame) -> FrameInfo {
    frame.info()
}

/// Keys cubic convolution kernel (`a = -0.5`).
fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    let a = -0.5;
    if t < 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic sample of a `K x K` grid at continuous `(x, y)` (centered
/// coordinates), with zeros outside the grid.
fn bicubic(atom: &[f64], k: usize, x: f64, y: f64) -> f64 {
    let r = radius(k) as f64;
    let (cx, cy) = (x + r, y + r);
    let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
    let mut acc = 0.0;
    for row in (y0 - 1)..=(y0 + 2) {
        if row < 0 || row >= k as isize {
            continue;
        }
        let wy = cubic_weight(cy - row as f64);
        if wy == 0.0 {
            continue;
        }
        for col in (x0 - 1)..=(x0 + 2) {
            if col < 0 || col >= k as isize {
                continue;
            }
            acc += wy * cubic_weight(cx - col as f64) * atom[row as usize * k + col as usize];
        }
    }
    acc
}

/// Applies `g(tau)` to every atom, returning `[M, K, K]`.
///
/// Rotation: the content turns counterclockwise by `tau` in `(x, y)`
/// coordinates, i.e. the atom is evaluated at
/// `(x cos tau + y sin tau, -x sin tau + y cos tau)`. Continuous families are
/// re-evaluated analytically, sampled families are resampled bicubically.
/// Scaling: Gaussian derivatives are re-evaluated at `sigma * tau`.
/// Transformed atoms share the normalization constants of the originals.
pub fn transform_atoms(frame: &Frame, action: GroupAction, tau: &[f64]) -> Result<Tensor> {
    if tau.len() != action.param_count() {
        return contract(format!("{action} takes {} parameter(s)", action.param_count()));
    }
    let (angle, scale) = match action {
        GroupAction::Rotation => (tau[0], 1.0),
        GroupAction::Scaling => (0.0, tau[0]),
        GroupAction::RotationScaling => (tau[0], tau[1]),
    };
    if action.involves_scaling() && frame.family() != FrameFamily::GaussianDerivative {
        return Err(Error::UnsupportedGroup {
            action: action.to_string(),
            family: frame.family().to_string(),
        });
    }
    if !(scale > 0.0) || !angle.is_finite() {
        return contract(format!("invalid group parameter {tau:?}"));
    }
    let k = frame.size();
    let r = radius(k);
    let (c, s) = (angle.cos(), angle.sin());
    let m = frame.atom_count();
    let out = Tensor::from_fn(&[m, k, k], |i| {
        let (a, row, col) = (i / (k * k), (i / k) % k, i % k);
        let (x, y) = ((col as isize - r) as f64, (row as isize - r) as f64);
        if angle == 0.0 && scale == 1.0 {
            return frame.atom(a)[row * k + col];
        }
        let (xr, yr) = (x * c + y * s, -x * s + y * c);
        if frame.continuous() {
            let sigma = frame.params.sigma.unwrap_or(1.0) * scale;
            frame.generator(a, xr, yr, sigma) / frame.scales[a]
        } else {
            bicubic(frame.atom(a), k, xr, yr)
        }
    });
    Ok(out)
}

/// Lays atoms out on a grid (`ceil(sqrt(M))` columns), each min-max
/// normalized to 0..=255, enlarged `zoom` times with 1-pixel gaps.
/// Returns `(width, height, pixels)`.
pub fn atom_mosaic(frame: &Frame, zoom: usize) -> (usize, usize, Vec<u8>) {
    let zoom = zoom.max(1);
    let m = frame.atom_count();
    let k = frame.size();
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let tile = k * zoom;
    let width = cols * tile + (cols - 1);
    let height = rows * tile + (rows - 1);
    let mut pix = vec![0u8; width * height];
    for a in 0..m {
        let (bytes, _, _) = io::normalize_to_u8(frame.atom(a));
        let (ty, tx) = (a / cols, a % cols);
        for y in 0..tile {
            for x in 0..tile {
                let v = bytes[(y / zoom) * k + x / zoom];
                pix[(ty * (tile + 1) + y) * width + tx * (tile + 1) + x] = v;
            }
        }
    }
    (width, height, pix)
}

/// Sidecar path holding frame metadata for an FTNS atom file.
pub fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Writes atoms as FTNS plus a `key=value` metadata sidecar.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    io::write_ftns(path, frame.atoms())?;
    let mut meta = format!(
        "family={}\nsize={}\natoms={}\n",
        frame.family(),
        frame.size(),
        frame.atom_count()
    );
    if let Some(s) = frame.params.sigma {
        meta.push_str(&format!("sigma={s}\n"));
    }
    if let Some(n) = frame.params.max_order {
        meta.push_str(&format!("max_order={n}\n"));
    }
    if let Some(set) = frame.params.set {
        meta.push_str(&format!("set={set}\n"));
    }
    meta.push_str(&format!("ordering={ORDERING_VERSION}\n"));
    fs::write(metadata_path(path), meta)?;
    Ok(())
}

/// Loads a frame written by [`save_frame`]. Continuous and analytic families
/// are regenerated from their parameters (the file stores `f32`); files
/// without a sidecar load as [`FrameFamily::Custom`].
pub fn load_frame(path: &Path) -> Result<Frame> {
    let atoms = io::read_ftns(path)?;
    let meta_path = metadata_path(path);
    if !meta_path.exists() {
        return Frame::from_atoms(atoms, FrameFamily::Custom);
    }
    let text = fs::read_to_string(&meta_path)?;
    let bad = |m: String| Error::Format {
        path: meta_path.clone(),
        message: m,
    };
    let mut family = None;
    let mut size = None;
    let mut sigma = None;
    let mut order = None;
    let mut set = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed line '{line}'")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number '{v}'")));
        match key {
            "family" => family = Some(value.parse::<FrameFamily>()?),
            "size" => size = Some(num(value)? as usize),
            "sigma" => sigma = Some(num(value)?),
            "max_order" => order = Some(num(value)? as usize),
            "set" => set = Some(value.parse::<DerivativeSet>()?),
            "ordering" => {
                if num(value)? as u32 != ORDERING_VERSION {
                    return Err(bad(format!("unsupported ordering version {value}")));
                }
            }
            _ => {}
        }
    }
    let family = family.ok_or_else(|| bad("missing family".into()))?;
    let size = size.ok_or_else(|| bad("missing size".into()))?;
    let missing = |what: &str| bad(format!("missing {what}"));
    let frame = match family {
        FrameFamily::Pixel => make_pixel_frame(size)?,
        FrameFamily::Framelet => make_framelet_frame(size)?,
        FrameFamily::Naive => make_naive_frame(size, order.ok_or_else(|| missing("max_order"))?)?,
        FrameFamily::GaussianDerivative => make_gaussian_derivative_frame(
            size,
            sigma.ok_or_else(|| missing("sigma"))?,
            order.ok_or_else(|| missing("max_order"))?,
            set.unwrap_or(DerivativeSet::PerAxis),
        )?,
        FrameFamily::Custom => Frame::from_atoms(atoms.clone(), FrameFamily::Custom)?,
    };
    if frame.atoms().shape() != atoms.shape() {
        return Err(bad(format!(
            "metadata describes atoms {:?}, file holds {:?}",
            frame.atoms().shape(),
            atoms.shape()
        )));
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gauss(set: DerivativeSet) -> Frame {
        make_gaussian_derivative_frame(3, 1.0, 2, set).unwrap()
    }

    fn assert_unit_atoms(f: &Frame) {
        for m in 0..f.atom_count() {
            let n: f64 = f.atom(m).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "atom {m} has norm {n}");
        }
    }

    #[test]
    fn pixel_frame() {
        let one = make_pixel_frame(1).unwrap();
        assert_eq!(one.atoms().data(), &[1.0]);
        let f = make_pixel_frame(3).unwrap();
        assert_eq!(f.atom_count(), 9);
        let g = f.matrix() * f.matrix().transpose();
        assert_eq!(g, DMatrix::identity(9, 9));
        let info = frame_bounds(&f);
        assert_eq!((info.lower_bound, info.upper_bound), (1.0, 1.0));
        assert!(make_pixel_frame(4).is_err());
        assert!(make_pixel_frame(9).is_err());
    }

    #[test]
    fn gaussian_frame_layouts() {
        let f = gauss(DerivativeSet::PerAxis);
        assert_eq!(f.atom_count(), 9);
        assert_eq!(
            f.orders().unwrap(),
            &[(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (2, 1), (1, 2), (2, 2)]
        );
        let info = f.info();
        assert_eq!(info.rank, 9);
        assert!(info.min_singular_value > 1e-6);
        let t = gauss(DerivativeSet::TotalOrder);
        assert_eq!(t.atom_count(), 6);
        assert_eq!(&f.orders().unwrap()[..6], t.orders().unwrap());
        assert_eq!(make_gaussian_derivative_frame(5, 1.0, 3, DerivativeSet::TotalOrder).unwrap().atom_count(), 10);
        assert!(make_gaussian_derivative_frame(3, 0.0, 2, DerivativeSet::PerAxis).is_err());
        assert!(make_gaussian_derivative_frame(3, -1.0, 2, DerivativeSet::PerAxis).is_err());
        assert!(make_gaussian_derivative_frame(3, 1.0, 0, DerivativeSet::PerAxis).is_err());
    }

    #[test]
    fn gaussian_atom_symmetries() {
        let f = gauss(DerivativeSet::PerAxis);
        let g0 = f.atom(0);
        for i in 0..9 {
            assert_eq!(g0[i], g0[8 - i]);
        }
        assert!(f.atom(1).iter().sum::<f64>().abs() < 1e-12);
        assert_unit_atoms(&f);
    }

    #[test]
    fn framelet_frame() {
        let f = make_framelet_frame(3).unwrap();
        assert_eq!(f.atom_count(), 9);
        assert_eq!(f.info().rank, 9);
        let a0 = f.atom(0);
        for i in 0..9 {
            assert!((a0[i] - a0[8 - i]).abs() < 1e-15);
        }
        let g = f.matrix() * f.matrix().transpose();
        let off = (0..9)
            .flat_map(|i| (0..9).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| g[(i, j)].abs())
            .fold(0.0, f64::max);
        assert!(off > 0.01, "{off}");
        assert!(make_framelet_frame(5).is_err());
        assert_unit_atoms(&f);
    }

    #[test]
    fn naive_frame() {
        let f = make_naive_frame(3, 2).unwrap();
        assert_eq!(f.atom_count(), 6);
        assert!(f.atom(0).iter().all(|&v| (v - f.atom(0)[0]).abs() < 1e-15));
        assert!(f.atom(1).iter().sum::<f64>().abs() < 1e-15);
        assert_eq!(f.info().rank, 6);
        assert_eq!(f.info().lower_bound, 0.0);
        assert_unit_atoms(&f);
    }

    #[test]
    fn mercedes_frame_bounds_and_dual() {
        let vs: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let a = PI / 2.0 + 2.0 * PI * i as f64 / 3.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let info = bounds_of_vectors(&vs);
        assert!((info.lower_bound - 1.5).abs() < 1e-12);
        assert!((info.upper_bound - 1.5).abs() < 1e-12);
        let duals = dual_vectors(&vs).unwrap();
        for (d, v) in duals.iter().zip(&vs) {
            for (a, b) in d.iter().zip(v) {
                assert!((a - b / 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_frame() {
        let vs = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let info = bounds_of_vectors(&vs);
        assert_eq!(info.lower_bound, 0.0);
        assert!(!info.spanning());
        assert!(matches!(dual_vectors(&vs), Err(Error::NonInvertible { .. })));
    }

    #[test]
    fn orthonormal_dual_is_identity() {
        let f = make_pixel_frame(3).unwrap();
        let d = dual_frame(&f).unwrap();
        assert!(d.atoms().max_abs_diff(f.atoms()).unwrap() < 1e-14);
    }

    #[test]
    fn transform_identity_and_quarter_turn() {
        let f = gauss(DerivativeSet::PerAxis);
        let same = transform_atoms(&f, GroupAction::Rotation, &[0.0]).unwrap();
        assert_eq!(&same, f.atoms());
        let same = transform_atoms(&f, GroupAction::Scaling, &[1.0]).unwrap();
        assert_eq!(&same, f.atoms());
        let rot = transform_atoms(&f, GroupAction::Rotation, &[PI / 2.0]).unwrap();
        let dx_rot = &rot.data()[9..18];
        for (a, b) in dx_rot.iter().zip(f.atom(2)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scaling_needs_gaussian() {
        let f = make_framelet_frame(3).unwrap();
        assert!(matches!(
            transform_atoms(&f, GroupAction::Scaling, &[1.2]),
            Err(Error::UnsupportedGroup { .. })
        ));
    }

    #[test]
    fn bicubic_quarter_turn_permutes_pixels() {
        let f = make_pixel_frame(3).unwrap();
        let rot = transform_atoms(&f, GroupAction::Rotation, &[PI / 2.0]).unwrap();
        for m in 0..9 {
            let atom = &rot.data()[m * 9..(m + 1) * 9];
            let ones = atom.iter().filter(|v| (**v - 1.0).abs() < 1e-12).count();
            let zeros = atom.iter().filter(|v| v.abs() < 1e-12).count();
            assert_eq!((ones, zeros), (1, 8));
        }
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ftns");
        let f = gauss(DerivativeSet::TotalOrder);
        save_frame(&f, &p).unwrap();
        let back = load_frame(&p).unwrap();
        assert_eq!(back.atoms(), f.atoms());
        assert_eq!(back.params(), f.params());

        let p = dir.path().join("r.ftns");
        let r = make_random_frame(3, 4, 1).unwrap();
        io::write_ftns(&p, r.atoms()).unwrap();
        let back = load_frame(&p).unwrap();
        assert_eq!(back.family(), FrameFamily::Custom);
        assert!(back.atoms().max_abs_diff(r.atoms()).unwrap() < 1e-6);
    }

    #[test]
    fn mosaic_dimensions() {
        let f = gauss(DerivativeSet::PerAxis);
        let (w, h, pix) = atom_mosaic(&f, 4);
        assert_eq!((w, h), (3 * 12 + 2, 3 * 12 + 2));
        assert_eq!(pix.len(), w * h);
    }
}
