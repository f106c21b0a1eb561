//! Network layers on top of filter frames: frame convolutions, static
//! residual blocks and dynamic steerable blocks, plus the parameter store
//! they share.

mod dynamic;
mod network;
mod spec;

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::frames::Frame;
use crate::tensor::{narrow, wide, Real, Tensor};

pub use dynamic::{steered_projection, DynamicBlock, PoseSquash, SteeringField};
pub use network::{load_checkpoint, save_checkpoint, Layer, Network, MANIFEST_NAME};
pub use spec::{
    parse_network_spec, FrameChoice, LayerKind, LayerSpec, NetworkSpec, PoseGranularity,
    SteeringMode,
};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value when updating running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Named trainable tensors plus non-trainable buffers (running statistics).
/// Insertion order is the canonical parameter order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: IndexMap<String, Tensor>,
    pub buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer '{name}'")))
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect()
    }

    /// Folds batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (prefix, mean, var) in stats {
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("missing buffer '{name}'")))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.params.insert(name, t);
    }
}

/// State threaded through one forward pass.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub vars: &'a IndexMap<String, Var>,
    pub train: bool,
    /// Batch statistics gathered in training mode, `(prefix, mean, var)`.
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    /// Pose fields produced by dynamic blocks, keyed by block name.
    pub poses: Vec<(String, Var)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, vars: &'a IndexMap<String, Var>, train: bool) -> Self {
        Self {
            store,
            vars,
            train,
            bn_stats: Vec::new(),
            poses: Vec::new(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' is not bound")))
    }
}

fn add_batch_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.params.insert(format!("{prefix}.scale"), Tensor::ones(&[c]));
    store.params.insert(format!("{prefix}.shift"), Tensor::zeros(&[c]));
    store.buffers.insert(format!("{prefix}.mean"), Tensor::zeros(&[c]));
    store.buffers.insert(format!("{prefix}.var"), Tensor::ones(&[c]));
}

fn batch_norm(g: &mut Graph, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let scale = ctx.var(&format!("{prefix}.scale"))?;
    let shift = ctx.var(&format!("{prefix}.shift"))?;
    if ctx.train {
        let (y, mean, var) = g.batchnorm_train(x, scale, shift, BN_EPS)?;
        ctx.bn_stats.push((prefix.to_string(), mean, var));
        Ok(y)
    } else {
        let mean = ctx.store.buffer(&format!("{prefix}.mean"))?.data().to_vec();
        let var = ctx.store.buffer(&format!("{prefix}.var"))?.data().to_vec();
        g.batchnorm_eval(x, scale, shift, &mean, &var, BN_EPS)
    }
}

/// Effective pixel kernels `[O, C, K, K]`: `sum_m w[o,c,m] * atoms[m]`.
pub fn synthesize_kernels<T: Real>(atoms: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (o, c, m) = match *w.shape() {
        [o, c, m] => (o, c, m),
        _ => return contract(format!("weights must be [O,C,M], got {:?}", w.shape())),
    };
    let k = match *atoms.shape() {
        [am, k, k2] if am == m && k == k2 => k,
        _ => {
            return contract(format!(
                "atoms {:?} do not match {m} coefficients",
                atoms.shape()
            ))
        }
    };
    let kk = k * k;
    let mut out = vec![0.0f64; o * c * kk];
    for oc in 0..o * c {
        for a in 0..m {
            let wv = wide(w.data()[oc * m + a]);
            let atom = &atoms.data()[a * kk..(a + 1) * kk];
            for (dst, v) in out[oc * kk..(oc + 1) * kk].iter_mut().zip(atom) {
                *dst += wv * wide(*v);
            }
        }
    }
    Tensor::new(vec![o, c, k, k], out.into_iter().map(narrow).collect())
}

/// Frame convolution computed as one pixel-basis convolution with the
/// synthesized kernels.
pub fn frame_conv<T: Real>(x: &Tensor<T>, atoms: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.nchw()?;
    if w.shape().get(1) != Some(&c) {
        return contract(format!("input has {c} channels, weights {:?}", w.shape()));
    }
    x.conv2d(&synthesize_kernels(atoms, w)?)
}

/// Frame convolution computed literally: lift onto every atom, then mix the
/// `C * M` responses with a 1x1 convolution.
pub fn frame_conv_lifted<T: Real>(
    x: &Tensor<T>,
    atoms: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.nchw()?;
    let (o, wc, m) = match *w.shape() {
        [o, wc, m] => (o, wc, m),
        _ => return contract(format!("weights must be [O,C,M], got {:?}", w.shape())),
    };
    if wc != c {
        return contract(format!("input has {c} channels, weights expect {wc}"));
    }
    let k = atoms.shape()[1];
    let bank = atoms.clone().reshape(&[m, 1, k, k])?;
    let plane = h * wd;
    let mut lifted = Vec::with_capacity(n * c * m * plane);
    for b in 0..n {
        for ic in 0..c {
            let src = &x.data()[(b * c + ic) * plane..(b * c + ic + 1) * plane];
            let single = Tensor::new(vec![1, h, wd], src.to_vec())?;
            lifted.extend_from_slice(single.conv2d(&bank)?.data());
        }
    }
    let lifted = Tensor::new(vec![n, c * m, h, wd], lifted)?;
    let mix = w.clone().reshape(&[o, c * m])?;
    let y = lifted.conv1x1(&mix)?;
    if x.rank() == 3 {
        y.reshape(&[o, h, wd])
    } else {
        Ok(y)
    }
}

/// Convolution whose kernels are linear combinations of frame atoms.
#[derive(Debug, Clone)]
pub struct FrameConvLayer {
    pub name: String,
    pub frame: Arc<Frame>,
    pub c_in: usize,
    pub c_out: usize,
}

impl FrameConvLayer {
    pub fn new(name: impl Into<String>, frame: Arc<Frame>, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.into(),
            frame,
            c_in,
            c_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.c_out, self.c_in, self.frame.atom_count()]
    }

    /// He-style uniform initialization (atoms are unit-norm, so the kernel
    /// energy follows the coefficient energy).
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, gain: f64) {
        let fan_in = (self.c_in * self.frame.atom_count()) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        store.uniform(self.weight_name(), &self.weight_shape(), bound, rng);
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).nchw()?;
        if c != self.c_in {
            return contract(format!("{} expects {} channels, got {c}", self.name, self.c_in));
        }
        let w = ctx.var(&self.weight_name())?;
        let kernels = g.synthesize_kernels(w, self.frame.atoms())?;
        g.conv2d(x, kernels)
    }

    /// Plain evaluation with explicit weights.
    pub fn apply(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        frame_conv(x, self.frame.atoms(), w)
    }
}

/// `relu(frame_conv(x) + bias)`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub conv: FrameConvLayer,
}

impl ConvLayer {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng, 1.0);
        store
            .params
            .insert(format!("{}.b", self.conv.name), Tensor::zeros(&[self.conv.c_out]));
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ctx, x)?;
        let b = ctx.var(&format!("{}.b", self.conv.name))?;
        let y = g.add_channel_bias(y, b)?;
        Ok(g.relu(y))
    }
}

/// `H(x) = F(x) + W_s x` with `F = [bn -> relu -> frame_conv] x 2` and a
/// 1x1 projection shortcut when the widths differ.
#[derive(Debug, Clone)]
pub struct StaticResBlock {
    pub name: String,
    pub conv1: FrameConvLayer,
    pub conv2: FrameConvLayer,
}

impl StaticResBlock {
    pub fn new(name: impl Into<String>, frame: Arc<Frame>, c_in: usize, c_out: usize) -> Self {
        let name = name.into();
        Self {
            conv1: FrameConvLayer::new(format!("{name}.conv1"), frame.clone(), c_in, c_out),
            conv2: FrameConvLayer::new(format!("{name}.conv2"), frame, c_out, c_out),
            name,
        }
    }

    pub fn c_in(&self) -> usize {
        self.conv1.c_in
    }

    pub fn c_out(&self) -> usize {
        self.conv2.c_out
    }

    fn shortcut_name(&self) -> Option<String> {
        (self.c_in() != self.c_out()).then(|| format!("{}.shortcut", self.name))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        add_batch_norm(store, &format!("{}.bn1", self.name), self.c_in());
        self.conv1.init(store, rng, 1.0);
        add_batch_norm(store, &format!("{}.bn2", self.name), self.c_out());
        // Small second stage so a fresh block starts close to its shortcut.
        self.conv2.init(store, rng, 0.1);
        if let Some(name) = self.shortcut_name() {
            let bound = (3.0 / self.c_in() as f64).sqrt();
            store.uniform(name, &[self.c_out(), self.c_in()], bound, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = batch_norm(g, ctx, &format!("{}.bn1", self.name), x)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, ctx, h)?;
        let h = batch_norm(g, ctx, &format!("{}.bn2", self.name), h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, ctx, h)?;
        let skip = match self.shortcut_name() {
            Some(name) => {
                let ws = ctx.var(&name)?;
                g.conv1x1(x, ws)?
            }
            None => x,
        };
        g.add(h, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheck};
    use crate::frames::{make_gaussian_derivative_frame, make_pixel_frame, DerivativeSet};
    use rand::SeedableRng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pixel_frame_one_hot_weights_shift() {
        let frame = make_pixel_frame(3).unwrap();
        let x = random(&[1, 6, 6], 1);
        // Atom 5 is the delta at (row 1, col 2): correlation reads x[i, j+1].
        let mut w = Tensor::zeros(&[1, 1, 9]);
        w.data_mut()[5] = 1.0;
        let y = frame_conv(&x, frame.atoms(), &w).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if j + 1 < 6 { x.data()[i * 6 + j + 1] } else { 0.0 };
                assert_eq!(y.data()[i * 6 + j], expect);
            }
        }
        let zero = frame_conv(&x, frame.atoms(), &Tensor::zeros(&[2, 1, 9])).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn lifted_route_matches_synthesized_kernels() {
        let frame = make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::PerAxis).unwrap();
        let x = random(&[2, 3, 9, 8], 2);
        let w = random(&[4, 3, 9], 3);
        let a = frame_conv(&x, frame.atoms(), &w).unwrap();
        let b = frame_conv_lifted(&x, frame.atoms(), &w).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        // Single precision against the double-precision oracle, image-range
        // inputs and initialization-scale weights.
        let img = x.map(|v| 0.5 * (v + 1.0));
        let ws = w.scalar_mul(0.3);
        let oracle = frame_conv(&img, frame.atoms(), &ws).unwrap();
        let lifted32 = frame_conv_lifted(&img.cast::<f32>(), &frame.atoms().cast::<f32>(), &ws.cast::<f32>()).unwrap();
        let d32 = lifted32.cast::<f64>().max_abs_diff(&oracle).unwrap();
        assert!(d32 < 1e-6, "{d32}");
        assert!(frame_conv(&x, frame.atoms(), &random(&[4, 2, 9], 4)).is_err());
    }

    #[test]
    fn zero_residual_is_identity() {
        let frame = Arc::new(make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::PerAxis).unwrap());
        let block = StaticResBlock::new("s", frame, 3, 3);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for name in ["s.conv1.w", "s.conv2.w"] {
            store.param_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random(&[2, 3, 7, 7], 5);
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let mut ctx = Ctx::new(&store, &vars, true);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &mut ctx, xv).unwrap();
        assert_eq!(g.value(y), &x);
        assert_eq!(ctx.bn_stats.len(), 2);
    }

    #[test]
    fn static_block_gradients() {
        let frame = Arc::new(make_gaussian_derivative_frame(3, 1.0, 1, DerivativeSet::TotalOrder).unwrap());
        for (c_in, c_out) in [(2, 2), (2, 3)] {
            let block = StaticResBlock::new("s", frame.clone(), c_in, c_out);
            let mut store = ParamStore::new();
            block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
            let names: Vec<String> = store.params.keys().cloned().collect();
            let mut values: Vec<Tensor> = store.params.values().cloned().collect();
            values.push(random(&[2, c_in, 5, 5], 6));
            for train in [true, false] {
                let report = check_gradients(
                    &values,
                    |g, vars| {
                        let mut st = store.clone();
                        for (n, v) in names.iter().zip(vars) {
                            *st.param_mut(n).unwrap() = g.value(*v).clone();
                        }
                        let bound: IndexMap<String, Var> =
                            names.iter().cloned().zip(vars.iter().copied()).collect();
                        let mut ctx = Ctx::new(&st, &bound, train);
                        let y = block.forward(g, &mut ctx, vars[names.len()])?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.sum(y2))
                    },
                    GradCheck::default(),
                )
                .unwrap();
                assert!(report.passed, "{c_in}->{c_out} train={train}: {report:?}");
            }
        }
    }

    #[test]
    fn running_stats_update() {
        let mut store = ParamStore::new();
        add_batch_norm(&mut store, "bn", 2);
        store
            .update_running_stats(&[("bn".into(), vec![1.0, 2.0], vec![3.0, 1.0])])
            .unwrap();
        let m = store.buffer("bn.mean").unwrap().data();
        assert!((m[0] - 0.1).abs() < 1e-12 && (m[1] - 0.2).abs() < 1e-12);
        let v = store.buffer("bn.var").unwrap().data();
        assert!((v[0] - 1.2).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }
}
