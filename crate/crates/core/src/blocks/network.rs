use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dynamic::DynamicBlock;
use super::spec::{parse_network_spec, LayerKind, NetworkSpec};
use super::{ConvLayer, Ctx, FrameConvLayer, ParamStore, StaticResBlock};
use crate::autodiff::{check_gradients, GradCheck, GradCheckReport, Graph, Var};
use crate::error::{contract, Error, Result};
use crate::frames::Frame;
use crate::io::{read_ftns, write_ftns};
use crate::metrics::balanced_bce_node;
use crate::tensor::Tensor;

/// File name of the checkpoint manifest inside a checkpoint directory.
pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "steerkit-checkpoint 1";

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    Static(StaticResBlock),
    Dynamic(DynamicBlock),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.conv.name,
            Layer::Static(b) => &b.name,
            Layer::Dynamic(b) => &b.name,
        }
    }

    pub fn frame(&self) -> &Arc<Frame> {
        match self {
            Layer::Conv(l) => &l.conv.frame,
            Layer::Static(b) => &b.conv1.frame,
            Layer::Dynamic(b) => &b.frame,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self {
            Layer::Conv(l) => l.init(store, rng),
            Layer::Static(b) => b.init(store, rng),
            Layer::Dynamic(b) => b.init(store, rng),
        }
    }

    fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Layer::Conv(l) => l.forward(g, ctx, x),
            Layer::Static(b) => b.forward(g, ctx, x),
            Layer::Dynamic(b) => b.forward(g, ctx, x),
        }
    }
}

/// Output of [`Network::forward`].
pub struct Forward {
    /// Per-pixel logits `[N, 1, H, W]`.
    pub logits: Var,
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub poses: Vec<(String, Var)>,
}

/// A stack of layers followed by a 1x1 head producing one logit per pixel.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub in_channels: usize,
    pub layers: Vec<Layer>,
    pub store: ParamStore,
}

impl Network {
    /// Builds the layers and draws initial parameters from `seed`.
    pub fn new(spec: NetworkSpec, in_channels: usize, seed: u64) -> Result<Self> {
        let layers = build_layers(&spec, in_channels)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            layer.init(&mut store, &mut rng);
        }
        let last = spec.layers.last().expect("validated").width;
        store.uniform("head.w".into(), &[1, last], (3.0 / last as f64).sqrt(), &mut rng);
        store.params.insert("head.b".into(), Tensor::zeros(&[1]));
        Ok(Self {
            spec,
            in_channels,
            layers,
            store,
        })
    }

    pub fn from_text(spec: &str, in_channels: usize, seed: u64) -> Result<Self> {
        Self::new(parse_network_spec(spec)?, in_channels, seed)
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn dynamic_blocks(&self) -> impl Iterator<Item = &DynamicBlock> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dynamic(b) => Some(b),
            _ => None,
        })
    }

    /// Graph forward pass; `vars` must come from `self.store.bind(g)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &indexmap::IndexMap<String, Var>,
        x: Var,
        train: bool,
    ) -> Result<Forward> {
        self.forward_with(&self.store, g, vars, x, train)
    }

    /// Like [`Network::forward`] but reading buffers from `store`.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        vars: &indexmap::IndexMap<String, Var>,
        x: Var,
        train: bool,
    ) -> Result<Forward> {
        let (_, c, _, _) = g.value(x).nchw()?;
        if c != self.in_channels {
            return contract(format!("network expects {} input channels, got {c}", self.in_channels));
        }
        let mut ctx = Ctx::new(store, vars, train);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, &mut ctx, h)?;
        }
        let head = ctx.var("head.w")?;
        let y = g.conv1x1(h, head)?;
        let hb = ctx.var("head.b")?;
        let logits = g.add_channel_bias(y, hb)?;
        Ok(Forward {
            logits,
            bn_stats: ctx.bn_stats,
            poses: ctx.poses,
        })
    }

    /// Boundary probabilities `[N, 1, H, W]` in inference mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv, false)?;
        let p = g.sigmoid(out.logits);
        Ok(g.value(p).clone())
    }

    /// Folds the batch statistics of one training-mode pass over `x` into
    /// the running buffers, without touching parameters.
    pub fn absorb_batch_stats(&mut self, x: &Tensor) -> Result<()> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv, true)?;
        self.store.update_running_stats(&out.bn_stats)
    }

    /// Finite-difference check of every parameter gradient of the balanced
    /// BCE loss on `(x, target)`.
    pub fn gradcheck(&self, x: &Tensor, target: &Tensor, train: bool, cfg: GradCheck) -> Result<GradCheckReport> {
        let names: Vec<String> = self.store.params.keys().cloned().collect();
        let params: Vec<Tensor> = self.store.params.values().cloned().collect();
        check_gradients(
            &params,
            |g, vs| {
                let vars: indexmap::IndexMap<String, Var> = names.iter().cloned().zip(vs.iter().copied()).collect();
                let xv = g.constant(x.clone());
                let out = self.forward(g, &vars, xv, train)?;
                let p = g.sigmoid(out.logits);
                balanced_bce_node(g, p, target)
            },
            cfg,
        )
    }

    /// Pose fields of every dynamic block for input `x` (inference mode).
    pub fn pose_fields(&self, x: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv, false)?;
        Ok(out
            .poses
            .into_iter()
            .map(|(name, v)| (name, g.value(v).clone()))
            .collect())
    }
}

fn build_layers(spec: &NetworkSpec, in_channels: usize) -> Result<Vec<Layer>> {
    spec.validate()?;
    if in_channels == 0 {
        return Err(Error::Config("network needs at least one input channel".into()));
    }
    let mut c = in_channels;
    let mut layers = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        let name = format!("l{i}");
        let frame = Arc::new(l.frame.build()?);
        let layer = match l.kind {
            LayerKind::Conv2d => Layer::Conv(ConvLayer {
                conv: FrameConvLayer::new(name, frame, c, l.width),
            }),
            LayerKind::StatResBlock => Layer::Static(StaticResBlock::new(name, frame, c, l.width)),
            LayerKind::DynResBlock => Layer::Dynamic(DynamicBlock::new(
                name, frame, c, l.width, l.hidden, l.group, l.pose, l.steering,
            )?),
        };
        layers.push(layer);
        c = l.width;
    }
    Ok(layers)
}

fn file_name(tensor: &str) -> String {
    format!("{tensor}.ftns")
}

fn frame_line(name: &str, frame: &Frame) -> String {
    let mut line = format!(
        "frame {name} family={} size={} atoms={}",
        frame.family(),
        frame.size(),
        frame.atom_count()
    );
    let p = frame.params();
    if let Some(s) = p.sigma {
        line.push_str(&format!(" sigma={s}"));
    }
    if let Some(n) = p.max_order {
        line.push_str(&format!(" max_order={n}"));
    }
    if let Some(set) = p.set {
        line.push_str(&format!(" set={set}"));
    }
    line
}

/// Writes every parameter and buffer as FTNS plus a manifest listing the
/// architecture, frames and tensor files.
pub fn save_checkpoint(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "{MANIFEST_HEADER}\nspec {}\nin_channels {}\n",
        net.spec.serialize(),
        net.in_channels
    );
    for layer in &net.layers {
        manifest.push_str(&frame_line(layer.name(), layer.frame()));
        manifest.push('\n');
    }
    for (kind, map) in [("param", &net.store.params), ("buffer", &net.store.buffers)] {
        for (name, t) in map {
            let file = file_name(name);
            write_ftns(&dir.join(&file), t)?;
            manifest.push_str(&format!("{kind} {name} {file}\n"));
        }
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Rebuilds a network from a checkpoint directory. Values round-trip at
/// single precision.
pub fn load_checkpoint(dir: &Path) -> Result<Network> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)?;
    let bad = |m: String| Error::Format {
        path: path.clone(),
        message: m,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(bad("not a checkpoint manifest".into()));
    }
    let mut spec = None;
    let mut in_channels = None;
    let mut frames = Vec::new();
    let mut tensors = Vec::new();
    for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line '{line}'")))?;
        match key {
            "spec" => spec = Some(parse_network_spec(rest)?),
            "in_channels" => {
                in_channels = Some(rest.parse::<usize>().map_err(|_| bad(format!("bad channel count '{rest}'")))?)
            }
            "frame" => frames.push(rest.to_string()),
            "param" | "buffer" => {
                let mut it = rest.split_whitespace();
                match (it.next(), it.next()) {
                    (Some(n), Some(f)) => tensors.push((key == "param", n.to_string(), f.to_string())),
                    _ => return Err(bad(format!("malformed tensor line '{line}'"))),
                }
            }
            other => return Err(bad(format!("unknown manifest key '{other}'"))),
        }
    }
    let spec = spec.ok_or_else(|| bad("missing spec line".into()))?;
    let in_channels = in_channels.ok_or_else(|| bad("missing in_channels line".into()))?;
    let mut net = Network::new(spec, in_channels, 0)?;
    for (layer, recorded) in net.layers.iter().zip(&frames) {
        let expect = frame_line(layer.name(), layer.frame());
        if format!("frame {recorded}") != expect {
            return Err(bad(format!("frame mismatch: manifest '{recorded}', spec gives '{expect}'")));
        }
    }
    if frames.len() != net.layers.len() {
        return Err(bad(format!("{} frame lines for {} layers", frames.len(), net.layers.len())));
    }
    let mut seen = 0;
    for (is_param, name, file) in tensors {
        let t = read_ftns(&dir.join(&file))?;
        let map = if is_param { &mut net.store.params } else { &mut net.store.buffers };
        let slot = map
            .get_mut(&name)
            .ok_or_else(|| bad(format!("tensor '{name}' is not part of the network")))?;
        if slot.shape() != t.shape() {
            return Err(bad(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
        seen += 1;
    }
    let total = net.store.params.len() + net.store.buffers.len();
    if seen != total {
        return Err(bad(format!("manifest lists {seen} tensors, network has {total}")));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn forward_shapes_and_param_count() {
        let net = Network::from_text("Conv2d[4]->DynResBlock[4]{pose=block}->StatResBlock[6]", 1, 0).unwrap();
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            Tensor::from_fn(&[2, 1, 10, 10], |_| rng.random_range(0.0..1.0))
        };
        let p = net.predict(&x).unwrap();
        assert_eq!(p.shape(), &[2, 1, 10, 10]);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let poses = net.pose_fields(&x).unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].1.shape(), &[2, 1, 10, 10]);
        // conv: 4*1*9 + 4; dyn: pose 16*24+16 + 16*16+16 + 1*16+1, w 4*4*6;
        // stat: bn 2*4 + 6*4*9 + bn 2*6 + 6*6*9 + shortcut 6*4; head 6 + 1.
        let expect = 40 + (384 + 16 + 256 + 16 + 16 + 1 + 96) + (8 + 216 + 12 + 324 + 24) + 7;
        assert_eq!(net.param_count(), expect);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::from_text("Conv2d[3]->StatResBlock[3]->DynResBlock[2]{steer=free}", 1, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&net, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.spec, net.spec);
        for (name, t) in &net.store.params {
            let diff = t.max_abs_diff(back.store.param(name).unwrap()).unwrap();
            assert!(diff < 1e-6, "{name}: {diff}");
        }
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.37).sin());
        let a = net.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
        fs::remove_file(dir.path().join("l0.w.ftns")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn scaling_block_needs_spanning_frame() {
        assert!(Network::from_text("DynResBlock[2]{group=scaling}", 1, 0).is_err());
        assert!(Network::from_text("DynResBlock[2]{group=scaling,set=per_axis}", 1, 0).is_ok());
    }
}
