//! Dynamic steerable blocks: `y = W F(Phi(x)) o Phi(x)`.
//!
//! The lift `Phi(x)` feeds a small 1x1 pose network; its output is mapped to
//! per-pixel steering matrices that rotate/scale the atoms before the
//! learned coefficients mix them.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::spec::{PoseGranularity, SteeringMode};
use super::{Ctx, FrameConvLayer, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::frames::Frame;
use crate::group::{GroupAction, SCALE_RANGE};
use crate::steering::{
    AnalyticRotation, RotationSteeringCurve, ScaleSteeringCurve, STEERABILITY_THRESHOLD,
};
use crate::tensor::{sigmoid, Tensor};

/// Maps an unconstrained pose output `z` into the scale range:
/// `s = lo + (hi - lo) * sigmoid(z + z0)`, with `z0` chosen so `s(0) = 1`.
#[derive(Debug, Clone, Copy)]
pub struct PoseSquash;

impl PoseSquash {
    pub fn offset() -> f64 {
        let (lo, hi) = SCALE_RANGE;
        let p = (1.0 - lo) / (hi - lo);
        (p / (1.0 - p)).ln()
    }

    /// Scale and its derivative in `z`.
    pub fn apply(z: f64) -> (f64, f64) {
        let (lo, hi) = SCALE_RANGE;
        let sg = sigmoid(z + Self::offset());
        (lo + (hi - lo) * sg, (hi - lo) * sg * (1.0 - sg))
    }
}

#[derive(Debug, Clone)]
enum Rotation {
    Analytic(AnalyticRotation),
    Fitted(RotationSteeringCurve),
}

impl Rotation {
    fn eval_into(&self, tau: f64, f: &mut [f64], df: &mut [f64]) {
        match self {
            Rotation::Analytic(a) => a.eval_into(tau, f, df),
            Rotation::Fitted(c) => c.eval_into(tau, f, df),
        }
    }
}

/// Turns a pose vector into an `M x M` steering matrix and its Jacobian.
#[derive(Debug, Clone)]
pub struct SteeringField {
    atoms: usize,
    kind: FieldKind,
    /// `(row, col)` entries of `F` or its Jacobian that can be nonzero.
    support: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
enum FieldKind {
    Rotation(Rotation),
    Scaling(ScaleSteeringCurve),
    RotationScaling(Rotation, ScaleSteeringCurve),
    /// `F = diag(1 + z)`.
    Free,
}

impl SteeringField {
    /// Builds the steering functions for `action`; fails when the frame is
    /// not steerable under it.
    pub fn analytic(frame: &Frame, action: GroupAction) -> Result<Self> {
        let rotation = || -> Result<Rotation> {
            if let Ok(a) = AnalyticRotation::new(frame) {
                return Ok(Rotation::Analytic(a));
            }
            let curve = RotationSteeringCurve::fit(frame, RotationSteeringCurve::DEFAULT_KNOTS)?;
            if curve.max_residual >= STEERABILITY_THRESHOLD {
                return Err(Error::Config(format!(
                    "{} frame is not rotation-steerable (residual {:.3})",
                    frame.family(),
                    curve.max_residual
                )));
            }
            Ok(Rotation::Fitted(curve))
        };
        let scaling = || -> Result<ScaleSteeringCurve> {
            let curve = ScaleSteeringCurve::fit(frame, ScaleSteeringCurve::DEFAULT_KNOTS)
                .map_err(|e| Error::Config(e.to_string()))?;
            if curve.max_residual >= STEERABILITY_THRESHOLD {
                return Err(Error::Config(format!(
                    "{} frame is not scale-steerable (residual {:.3}); use a spanning frame",
                    frame.family(),
                    curve.max_residual
                )));
            }
            Ok(curve)
        };
        let kind = match action {
            GroupAction::Rotation => FieldKind::Rotation(rotation()?),
            GroupAction::Scaling => FieldKind::Scaling(scaling()?),
            GroupAction::RotationScaling => FieldKind::RotationScaling(rotation()?, scaling()?),
        };
        Ok(Self::with_support(frame.atom_count(), kind))
    }

    pub fn free(atoms: usize) -> Self {
        Self::with_support(atoms, FieldKind::Free)
    }

    /// Finds the structural nonzeros by probing a few generic poses.
    fn with_support(atoms: usize, kind: FieldKind) -> Self {
        let mut field = Self {
            atoms,
            kind,
            support: Vec::new(),
        };
        let (m, p) = (atoms, field.pose_params());
        let mut used = vec![false; m * m];
        let (mut f, mut df, mut scratch) = (vec![0.0; m * m], vec![0.0; p * m * m], field.scratch());
        for probe in [0.0, 0.3719, -1.1137, 2.2871, -2.9053, 0.8461] {
            let z: Vec<f64> = (0..p).map(|k| probe + 0.173 * k as f64).collect();
            field.eval_into(&z, &mut f, &mut df, &mut scratch);
            for (i, u) in used.iter_mut().enumerate() {
                *u |= f[i] != 0.0 || (0..p).any(|k| df[k * m * m + i] != 0.0);
            }
        }
        field.support = (0..m * m).filter(|&i| used[i]).map(|i| (i / m, i % m)).collect();
        field
    }

    pub fn atom_count(&self) -> usize {
        self.atoms
    }

    /// Pose parameters consumed per steering matrix.
    pub fn pose_params(&self) -> usize {
        match self.kind {
            FieldKind::Rotation(_) | FieldKind::Scaling(_) => 1,
            FieldKind::RotationScaling(..) => 2,
            FieldKind::Free => self.atoms,
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self.kind, FieldKind::Free)
    }

    /// Writes `F(z)` (row-major `M x M`) and `dF/dz_k` for each pose
    /// parameter (`P` consecutive `M x M` blocks).
    pub fn eval_into(&self, z: &[f64], f: &mut [f64], df: &mut [f64], scratch: &mut Scratch) {
        let m = self.atoms;
        let mm = m * m;
        match &self.kind {
            FieldKind::Rotation(r) => r.eval_into(z[0], f, &mut df[..mm]),
            FieldKind::Scaling(c) => {
                let (s, ds) = PoseSquash::apply(z[0]);
                c.eval_into(s, f, &mut df[..mm]);
                df[..mm].iter_mut().for_each(|v| *v *= ds);
            }
            FieldKind::RotationScaling(r, c) => {
                let Scratch { a, da, b, db } = scratch;
                r.eval_into(z[0], a, da);
                let (s, ds) = PoseSquash::apply(z[1]);
                c.eval_into(s, b, db);
                // F = R S, dF/dtheta = R' S, dF/dz = R S' ds.
                for i in 0..m {
                    for j in 0..m {
                        let (mut v, mut dv0, mut dv1) = (0.0, 0.0, 0.0);
                        for k in 0..m {
                            v += a[i * m + k] * b[k * m + j];
                            dv0 += da[i * m + k] * b[k * m + j];
                            dv1 += a[i * m + k] * db[k * m + j];
                        }
                        f[i * m + j] = v;
                        df[i * m + j] = dv0;
                        df[mm + i * m + j] = dv1 * ds;
                    }
                }
            }
            FieldKind::Free => {
                f.iter_mut().for_each(|v| *v = 0.0);
                df.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..m {
                    f[k * m + k] = 1.0 + z[k];
                    df[k * mm + k * m + k] = 1.0;
                }
            }
        }
    }

    pub fn scratch(&self) -> Scratch {
        let mm = self.atoms * self.atoms;
        Scratch {
            a: vec![0.0; mm],
            da: vec![0.0; mm],
            b: vec![0.0; mm],
            db: vec![0.0; mm],
        }
    }
}

/// Work buffers for [`SteeringField::eval_into`].
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    da: Vec<f64>,
    b: Vec<f64>,
    db: Vec<f64>,
}

struct Dims {
    n: usize,
    c: usize,
    m: usize,
    o: usize,
    p: usize,
    groups: usize,
    plane: usize,
}

/// Per-pixel steered projection
/// `y_o(p) = sum_c sum_n w[o,c,n] sum_m F_nm(z_g(p)) phi[c*M+m](p)`,
/// where the pose group `g` is `0` (per-block) or `o` (per output channel).
///
/// `phi: [N, C*M, H, W]`, `pose: [N, G*P, H, W]`, `w: [O, C, M]`.
pub fn steered_projection(
    g: &mut Graph,
    phi: Var,
    pose: Var,
    w: Var,
    field: Arc<SteeringField>,
    granularity: PoseGranularity,
) -> Result<Var> {
    let (n, cm, h, wd) = g.value(phi).nchw()?;
    let (o, c, m) = match *g.value(w).shape() {
        [o, c, m] => (o, c, m),
        _ => return contract(format!("weights must be [O,C,M], got {:?}", g.value(w).shape())),
    };
    if m != field.atom_count() || c * m != cm {
        return contract(format!(
            "lift has {cm} channels, weights {:?}, frame {} atoms",
            g.value(w).shape(),
            field.atom_count()
        ));
    }
    let p = field.pose_params();
    let groups = match granularity {
        PoseGranularity::PerBlock => 1,
        PoseGranularity::PerOutputChannel => o,
    };
    let (pn, pc, ph, pw) = g.value(pose).nchw()?;
    if (pn, pc, ph, pw) != (n, groups * p, h, wd) {
        return contract(format!(
            "pose field {:?} does not match {groups}x{p} channels over {h}x{wd}",
            g.value(pose).shape()
        ));
    }
    let d = Dims {
        n,
        c,
        m,
        o,
        p,
        groups,
        plane: h * wd,
    };
    let value = {
        let (phi_v, pose_v, w_v) = (g.value(phi), g.value(pose), g.value(w));
        let samples: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|b| forward_sample(&d, &field, b, phi_v.data(), pose_v.data(), w_v.data()))
            .collect();
        let shape = if phi_v.rank() == 3 {
            vec![o, h, wd]
        } else {
            vec![n, o, h, wd]
        };
        Tensor::new(shape, samples.concat())?
    };
    Ok(g.custom(
        "steered_projection",
        &[phi, pose, w],
        value,
        Box::new(move |gy, ins, _| {
            let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..d.n)
                .into_par_iter()
                .map(|b| backward_sample(&d, &field, b, ins[0].data(), ins[1].data(), ins[2].data(), gy.data()))
                .collect();
            let mut gphi = Vec::with_capacity(ins[0].len());
            let mut gpose = Vec::with_capacity(ins[1].len());
            let mut gw = vec![0.0; ins[2].len()];
            for (a, b, cw) in parts {
                gphi.extend_from_slice(&a);
                gpose.extend_from_slice(&b);
                gw.iter_mut().zip(&cw).for_each(|(acc, v)| *acc += v);
            }
            vec![
                Some(Tensor::new(ins[0].shape().to_vec(), gphi).unwrap()),
                Some(Tensor::new(ins[1].shape().to_vec(), gpose).unwrap()),
                Some(Tensor::new(ins[2].shape().to_vec(), gw).unwrap()),
            ]
        }),
    ))
}

fn outputs_of(d: &Dims, group: usize) -> std::ops::Range<usize> {
    if d.groups == 1 {
        0..d.o
    } else {
        group..group + 1
    }
}

/// Copies one sample of a `[K, plane]` block into pixel-major `[plane, K]`.
fn to_pixel_major(src: &[f64], k: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * plane];
    for (ch, row) in src.chunks_exact(plane).enumerate().take(k) {
        for (px, v) in row.iter().enumerate() {
            out[px * k + ch] = *v;
        }
    }
    out
}

fn from_pixel_major(src: &[f64], k: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * plane];
    for (px, row) in src.chunks_exact(k).enumerate() {
        for (ch, v) in row.iter().enumerate() {
            out[ch * plane + px] = *v;
        }
    }
    out
}

/// `psi[c*M+n] = sum_m F_nm phi[c*M+m]` over the structural support.
fn steer_local(support: &[(usize, usize)], f: &[f64], local: &[f64], c: usize, m: usize, psi: &mut [f64]) {
    psi.iter_mut().for_each(|v| *v = 0.0);
    for &(nn, mi) in support {
        let fv = f[nn * m + mi];
        for ci in 0..c {
            psi[ci * m + nn] += fv * local[ci * m + mi];
        }
    }
}

fn forward_sample(d: &Dims, field: &SteeringField, b: usize, phi: &[f64], pose: &[f64], w: &[f64]) -> Vec<f64> {
    let (c, m, p, plane) = (d.c, d.m, d.p, d.plane);
    let cm = c * m;
    let phi = to_pixel_major(&phi[b * cm * plane..(b + 1) * cm * plane], cm, plane);
    let pose = &pose[b * d.groups * p * plane..(b + 1) * d.groups * p * plane];
    let mut out = vec![0.0; d.o * plane];
    let mut f = vec![0.0; m * m];
    let mut df = vec![0.0; p * m * m];
    let mut z = vec![0.0; p];
    let mut psi = vec![0.0; cm];
    let mut scratch = field.scratch();
    for px in 0..plane {
        let local = &phi[px * cm..(px + 1) * cm];
        for grp in 0..d.groups {
            for k in 0..p {
                z[k] = pose[(grp * p + k) * plane + px];
            }
            field.eval_into(&z, &mut f, &mut df, &mut scratch);
            steer_local(&field.support, &f, local, c, m, &mut psi);
            for oi in outputs_of(d, grp) {
                let wo = &w[oi * cm..(oi + 1) * cm];
                out[oi * plane + px] = wo.iter().zip(&psi).map(|(a, b)| a * b).sum();
            }
        }
    }
    out
}

fn backward_sample(
    d: &Dims,
    field: &SteeringField,
    b: usize,
    phi: &[f64],
    pose: &[f64],
    w: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, m, p, plane) = (d.c, d.m, d.p, d.plane);
    let cm = c * m;
    let phi = to_pixel_major(&phi[b * cm * plane..(b + 1) * cm * plane], cm, plane);
    let pose = &pose[b * d.groups * p * plane..(b + 1) * d.groups * p * plane];
    let gy = &gy[b * d.o * plane..(b + 1) * d.o * plane];
    let mut gphi = vec![0.0; cm * plane];
    let mut gpose = vec![0.0; d.groups * p * plane];
    let mut gw = vec![0.0; d.o * cm];
    let mut f = vec![0.0; m * m];
    let mut df = vec![0.0; p * m * m];
    let mut z = vec![0.0; p];
    let mut psi = vec![0.0; cm];
    let mut gpsi = vec![0.0; cm];
    let mut scratch = field.scratch();
    for px in 0..plane {
        let local = &phi[px * cm..(px + 1) * cm];
        for grp in 0..d.groups {
            let outs = outputs_of(d, grp);
            if outs.clone().all(|oi| gy[oi * plane + px] == 0.0) {
                continue;
            }
            for k in 0..p {
                z[k] = pose[(grp * p + k) * plane + px];
            }
            field.eval_into(&z, &mut f, &mut df, &mut scratch);
            steer_local(&field.support, &f, local, c, m, &mut psi);
            gpsi.iter_mut().for_each(|v| *v = 0.0);
            for oi in outs {
                let gv = gy[oi * plane + px];
                let wo = &w[oi * cm..(oi + 1) * cm];
                let gwo = &mut gw[oi * cm..(oi + 1) * cm];
                for j in 0..cm {
                    gwo[j] += gv * psi[j];
                    gpsi[j] += gv * wo[j];
                }
            }
            let gl = &mut gphi[px * cm..(px + 1) * cm];
            for &(nn, mi) in &field.support {
                let fv = f[nn * m + mi];
                for ci in 0..c {
                    gl[ci * m + mi] += gpsi[ci * m + nn] * fv;
                }
            }
            for k in 0..p {
                let dk = &df[k * m * m..(k + 1) * m * m];
                let mut acc = 0.0;
                for &(nn, mi) in &field.support {
                    let dv = dk[nn * m + mi];
                    for ci in 0..c {
                        acc += gpsi[ci * m + nn] * dv * local[ci * m + mi];
                    }
                }
                gpose[(grp * p + k) * plane + px] += acc;
            }
        }
    }
    (from_pixel_major(&gphi, cm, plane), gpose, gw)
}

/// Dynamic steerable block (no batch norm, no additive skip).
#[derive(Debug, Clone)]
pub struct DynamicBlock {
    pub name: String,
    pub frame: Arc<Frame>,
    pub c_in: usize,
    pub c_out: usize,
    pub hidden: usize,
    pub action: GroupAction,
    pub granularity: PoseGranularity,
    pub mode: SteeringMode,
    field: Arc<SteeringField>,
}

impl DynamicBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        frame: Arc<Frame>,
        c_in: usize,
        c_out: usize,
        hidden: usize,
        action: GroupAction,
        granularity: PoseGranularity,
        mode: SteeringMode,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || hidden == 0 {
            return Err(Error::Config("dynamic block widths must be positive".into()));
        }
        let field = match mode {
            SteeringMode::Analytic => SteeringField::analytic(&frame, action)?,
            SteeringMode::Free => SteeringField::free(frame.atom_count()),
        };
        Ok(Self {
            name: name.into(),
            frame,
            c_in,
            c_out,
            hidden,
            action,
            granularity,
            mode,
            field: Arc::new(field),
        })
    }

    pub fn field(&self) -> &SteeringField {
        &self.field
    }

    /// Channels of the pose field.
    pub fn pose_channels(&self) -> usize {
        let groups = match self.granularity {
            PoseGranularity::PerBlock => 1,
            PoseGranularity::PerOutputChannel => self.c_out,
        };
        groups * self.field.pose_params()
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    /// Frame convolution with the same weights; what the block computes
    /// when the pose field is zero.
    pub fn static_counterpart(&self) -> FrameConvLayer {
        FrameConvLayer::new(self.name.clone(), self.frame.clone(), self.c_in, self.c_out)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let lifted = self.c_in * self.frame.atom_count();
        let hidden = self.hidden;
        let pn = |s: &str| format!("{}.pose.{s}", self.name);
        store.uniform(pn("w1"), &[hidden, lifted], (3.0 / lifted as f64).sqrt(), rng);
        store.params.insert(pn("b1"), Tensor::zeros(&[hidden]));
        store.uniform(pn("w2"), &[hidden, hidden], (3.0 / hidden as f64).sqrt(), rng);
        store.params.insert(pn("b2"), Tensor::zeros(&[hidden]));
        store.uniform(pn("w3"), &[self.pose_channels(), hidden], (3.0 / hidden as f64).sqrt(), rng);
        store.params.insert(pn("b3"), Tensor::zeros(&[self.pose_channels()]));
        self.static_counterpart().init(store, rng, 1.0);
    }

    /// Pose network over the lift: three 1x1 layers with tanh between.
    pub fn pose(&self, g: &mut Graph, ctx: &Ctx, phi: Var) -> Result<Var> {
        let mut h = phi;
        for (i, layer) in ["1", "2", "3"].iter().enumerate() {
            let w = ctx.var(&format!("{}.pose.w{layer}", self.name))?;
            let b = ctx.var(&format!("{}.pose.b{layer}", self.name))?;
            h = g.conv1x1(h, w)?;
            h = g.add_channel_bias(h, b)?;
            if i < 2 {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let phi = self.lift(g, x)?;
        let pose = self.pose(g, ctx, phi)?;
        ctx.poses.push((self.name.clone(), pose));
        self.project(g, ctx, phi, pose)
    }

    /// Runs the block with an externally supplied pose field
    /// `[N, pose_channels, H, W]`.
    pub fn forward_with_pose(&self, g: &mut Graph, ctx: &Ctx, x: Var, pose: Var) -> Result<Var> {
        let phi = self.lift(g, x)?;
        self.project(g, ctx, phi, pose)
    }

    fn lift(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).nchw()?;
        if c != self.c_in {
            return contract(format!("{} expects {} channels, got {c}", self.name, self.c_in));
        }
        g.lift(x, self.frame.atoms())
    }

    fn project(&self, g: &mut Graph, ctx: &Ctx, phi: Var, pose: Var) -> Result<Var> {
        let w = ctx.var(&self.weight_name())?;
        steered_projection(g, phi, pose, w, self.field.clone(), self.granularity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheck};
    use crate::frames::{
        make_gaussian_derivative_frame, make_pixel_frame, make_random_frame, transform_atoms, DerivativeSet,
    };
    use crate::tensor::rotate_quarter;
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn total(order: usize) -> Arc<Frame> {
        Arc::new(make_gaussian_derivative_frame(3, 1.0, order, DerivativeSet::TotalOrder).unwrap())
    }

    fn spanning() -> Arc<Frame> {
        Arc::new(make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::PerAxis).unwrap())
    }

    fn build(block: &DynamicBlock, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn run_with_pose(block: &DynamicBlock, store: &ParamStore, x: &Tensor, pose: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let ctx = Ctx::new(store, &vars, false);
        let xv = g.constant(x.clone());
        let pv = g.constant(pose.clone());
        let y = block.forward_with_pose(&mut g, &ctx, xv, pv).unwrap();
        g.value(y).clone()
    }

    fn static_output(block: &DynamicBlock, store: &ParamStore, x: &Tensor) -> Tensor {
        block
            .static_counterpart()
            .apply(x, store.param(&block.weight_name()).unwrap())
            .unwrap()
    }

    #[test]
    fn zero_pose_reduces_to_frame_conv() {
        let cases = [
            (total(2), GroupAction::Rotation, SteeringMode::Analytic, PoseGranularity::PerOutputChannel),
            (spanning(), GroupAction::Rotation, SteeringMode::Analytic, PoseGranularity::PerBlock),
            (spanning(), GroupAction::Scaling, SteeringMode::Analytic, PoseGranularity::PerBlock),
            (spanning(), GroupAction::RotationScaling, SteeringMode::Analytic, PoseGranularity::PerOutputChannel),
            (total(1), GroupAction::Rotation, SteeringMode::Free, PoseGranularity::PerBlock),
        ];
        for (i, (frame, action, mode, gran)) in cases.into_iter().enumerate() {
            let block = DynamicBlock::new("d", frame, 2, 3, 8, action, gran, mode).unwrap();
            let store = build(&block, i as u64);
            let x = random(&[2, 2, 7, 6], 10 + i as u64);
            let pose = Tensor::zeros(&[2, block.pose_channels(), 7, 6]);
            let y = run_with_pose(&block, &store, &x, &pose);
            let expect = static_output(&block, &store, &x);
            let diff = y.max_abs_diff(&expect).unwrap();
            assert!(diff < 1e-6, "case {i}: {diff}");
        }
    }

    #[test]
    fn quarter_turn_steers_dx_to_dy() {
        let frame = total(1);
        // Atoms ordered (0,0), (1,0), (0,1): G, Gx, Gy.
        let block = DynamicBlock::new(
            "d", frame.clone(), 1, 1, 8, GroupAction::Rotation, PoseGranularity::PerBlock, SteeringMode::Analytic,
        )
        .unwrap();
        let mut store = build(&block, 0);
        *store.param_mut("d.w").unwrap() = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let x = random(&[1, 12, 12], 3);
        let pose = Tensor::full(&[1, 12, 12], FRAC_PI_2);
        let y = run_with_pose(&block, &store, &x, &pose);
        let rotated = transform_atoms(&frame, GroupAction::Rotation, &[FRAC_PI_2]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 3, 3], rotated.data()[9..18].to_vec()).unwrap();
        let expect = x.conv2d(&kernel).unwrap();
        // The rotated dx atom is the dy atom up to sign.
        let dy = Tensor::new(vec![1, 1, 3, 3], frame.atom(2).to_vec()).unwrap();
        let dy_resp = x.conv2d(&dy).unwrap();
        let sign = if expect.data().iter().zip(dy_resp.data()).map(|(a, b)| a * b).sum::<f64>() > 0.0 { 1.0 } else { -1.0 };
        for r in 1..11 {
            for c in 1..11 {
                let i = r * 12 + c;
                assert!((y.data()[i] - expect.data()[i]).abs() < 1e-5);
                assert!((y.data()[i] - sign * dy_resp.data()[i]).abs() < 1e-5);
            }
        }
    }

    fn relative_interior_error(a: &Tensor, b: &Tensor, border: usize) -> f64 {
        let (n, c, h, w) = a.nchw().unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n * c {
            for r in border..h - border {
                for col in border..w - border {
                    let k = (i * h + r) * w + col;
                    num += (a.data()[k] - b.data()[k]).powi(2);
                    den += b.data()[k].powi(2);
                }
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn steered_path_is_equivariant_on_grid_rotations() {
        for (frame, gran) in [(total(2), PoseGranularity::PerOutputChannel), (spanning(), PoseGranularity::PerBlock)] {
            let block = DynamicBlock::new(
                "d", frame, 2, 3, 8, GroupAction::Rotation, gran, SteeringMode::Analytic,
            )
            .unwrap();
            let store = build(&block, 4);
            let x = random(&[1, 2, 16, 16], 5);
            let zero = Tensor::zeros(&[1, block.pose_channels(), 16, 16]);
            let base = run_with_pose(&block, &store, &x, &zero);
            for (quarter, tau) in [(1usize, FRAC_PI_2), (2, PI)] {
                let gx = rotate_quarter(&x, quarter).unwrap();
                let pose = Tensor::full(&[1, block.pose_channels(), 16, 16], tau);
                let y = run_with_pose(&block, &store, &gx, &pose);
                let expect = rotate_quarter(&base, quarter).unwrap();
                let err = relative_interior_error(&y, &expect, 3);
                assert!(err < 0.05, "tau {tau}: {err}");
            }
        }
    }

    #[test]
    fn non_steerable_frames_are_rejected() {
        let pixel = Arc::new(make_pixel_frame(3).unwrap());
        let make = |frame: Arc<Frame>, action| {
            DynamicBlock::new("d", frame, 1, 1, 8, action, PoseGranularity::PerBlock, SteeringMode::Analytic)
        };
        assert!(matches!(make(pixel.clone(), GroupAction::Scaling), Err(Error::Config(_))));
        assert!(matches!(make(total(2), GroupAction::Scaling), Err(Error::Config(_))));
        // Any spanning frame is rotation-steerable; a sparse random one is not.
        assert!(make(pixel, GroupAction::Rotation).is_ok());
        let sparse = Arc::new(make_random_frame(5, 6, 3).unwrap());
        assert!(matches!(make(sparse, GroupAction::Rotation), Err(Error::Config(_))));
        // Free mode does not need steerability.
        let pixel = Arc::new(make_pixel_frame(3).unwrap());
        assert!(DynamicBlock::new("d", pixel, 1, 1, 8, GroupAction::Rotation, PoseGranularity::PerBlock, SteeringMode::Free).is_ok());
    }

    #[test]
    fn squash_maps_zero_to_identity_scale() {
        let (s, _) = PoseSquash::apply(0.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert!(PoseSquash::apply(-50.0).0 >= 0.8 && PoseSquash::apply(50.0).0 <= 1.5);
    }

    fn gradcheck_block(block: &DynamicBlock, seed: u64) {
        let store = build(block, seed);
        let names: Vec<String> = store.params.keys().cloned().collect();
        let mut values: Vec<Tensor> = store.params.values().cloned().collect();
        values.push(random(&[2, block.c_in, 5, 5], seed + 100));
        let report = check_gradients(
            &values,
            |g, vars| {
                let bound: IndexMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
                let mut ctx = Ctx::new(&store, &bound, true);
                let y = block.forward(g, &mut ctx, vars[names.len()])?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            },
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed, "{} {:?}: {report:?}", block.action, block.mode);
    }

    #[test]
    fn gradients_through_pose_steering_and_weights() {
        let configs = [
            (total(2), GroupAction::Rotation, PoseGranularity::PerOutputChannel, SteeringMode::Analytic),
            (spanning(), GroupAction::Scaling, PoseGranularity::PerBlock, SteeringMode::Analytic),
            (spanning(), GroupAction::RotationScaling, PoseGranularity::PerBlock, SteeringMode::Analytic),
            (total(1), GroupAction::Rotation, PoseGranularity::PerOutputChannel, SteeringMode::Free),
        ];
        for (i, (frame, action, gran, mode)) in configs.into_iter().enumerate() {
            let block = DynamicBlock::new("d", frame, 2, 2, 4, action, gran, mode).unwrap();
            gradcheck_block(&block, i as u64);
        }
    }

    #[test]
    fn batch_evaluation_is_deterministic() {
        let block = DynamicBlock::new(
            "d", total(2), 2, 3, 8, GroupAction::Rotation, PoseGranularity::PerOutputChannel, SteeringMode::Analytic,
        )
        .unwrap();
        let store = build(&block, 9);
        let x = random(&[4, 2, 9, 9], 1);
        let run = || {
            let mut g = Graph::new();
            let vars = store.bind(&mut g);
            let mut ctx = Ctx::new(&store, &vars, true);
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, &mut ctx, xv).unwrap();
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            (g.value(y).clone(), grads.get(vars["d.w"]).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
