//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is acyclic by construction and the reverse
//! sweep visits nodes in a fixed order, which makes gradient accumulation
//! deterministic.

use crate::error::{contract, Result};
use crate::tensor::{
    conv1x1_forward, conv2d_backward_input, conv2d_backward_kernels, conv2d_forward,
    conv_kernel_dims, relu, sigmoid, softplus, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a node: receives the output adjoint, the input
/// values and the output value, and returns one adjoint per input (`None`
/// for inputs that do not need one).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push("param", value, vec![], None, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, vec![], None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            inputs,
            backward,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation implemented outside this module.
    pub fn custom(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(op, value, inputs.to_vec(), Some(backward), needs)
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.custom(
            op,
            &[x],
            value,
            Box::new(move |g, ins, out| {
                let d = Tensor::from_fn(g.shape(), |i| {
                    g.data()[i] * df(ins[0].data()[i], out.data()[i])
                });
                vec![Some(d)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.custom(
            "add",
            &[a, b],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.custom(
            "sub",
            &[a, b],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scalar_mul(-1.0))]),
        ))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.custom(
            "mul",
            &[a, b],
            value,
            Box::new(|g, ins, _| {
                vec![
                    Some(g.mul(ins[1]).expect("shape checked in forward")),
                    Some(g.mul(ins[0]).expect("shape checked in forward")),
                ]
            }),
        ))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        self.unary("scalar_mul", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary("add_scalar", x, move |v| v + s, |_, _| 1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary("tanh", x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary("relu", x, relu, |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary("softplus", x, softplus, |v, _| sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary("sin", x, f64::sin, |v, _| v.cos())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary("cos", x, f64::cos, |v, _| -v.sin())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.custom(
            "sum",
            &[x],
            value,
            Box::new(|g, ins, _| vec![Some(Tensor::full(ins[0].shape(), g.data()[0]))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scalar_mul(s, 1.0 / n)
    }

    /// Zero-padded cross-correlation; see [`Tensor::conv2d`].
    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let value = self.value(x).conv2d(self.value(kernels))?;
        Ok(self.custom(
            "conv2d",
            &[x, kernels],
            value,
            Box::new(|g, ins, _| {
                let (n, c, h, w) = ins[0].nchw().expect("checked in forward");
                let (o, k) = conv_kernel_dims(ins[1], c).expect("checked in forward");
                let mut gx = vec![0.0; ins[0].len()];
                conv2d_backward_input(g.data(), ins[1].data(), &mut gx, n, c, o, h, w, k);
                let mut gk = vec![0.0; ins[1].len()];
                conv2d_backward_kernels(g.data(), ins[0].data(), &mut gk, n, c, o, h, w, k);
                vec![
                    Some(Tensor::new(ins[0].shape().to_vec(), gx).unwrap()),
                    Some(Tensor::new(ins[1].shape().to_vec(), gk).unwrap()),
                ]
            }),
        ))
    }

    /// Per-pixel channel mixing with `weights: [C_out, C_in]`.
    pub fn conv1x1(&mut self, x: Var, weights: Var) -> Result<Var> {
        let value = self.value(x).conv1x1(self.value(weights))?;
        Ok(self.custom(
            "conv1x1",
            &[x, weights],
            value,
            Box::new(|g, ins, _| {
                let (n, c, h, w) = ins[0].nchw().unwrap();
                let o = ins[1].shape()[0];
                let plane = h * w;
                let wt = transpose2(ins[1]);
                let mut gx = vec![0.0; ins[0].len()];
                conv1x1_forward(g.data(), wt.data(), &mut gx, n, o, c, plane);
                let mut gw = vec![0.0; ins[1].len()];
                for b in 0..n {
                    for oc in 0..o {
                        let gp = &g.data()[(b * o + oc) * plane..(b * o + oc + 1) * plane];
                        for ic in 0..c {
                            let xp = &ins[0].data()[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                            gw[oc * c + ic] += dot(gp, xp);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(ins[0].shape().to_vec(), gx).unwrap()),
                    Some(Tensor::new(ins[1].shape().to_vec(), gw).unwrap()),
                ]
            }),
        ))
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).nchw()?;
        if self.value(bias).len() != c {
            return contract(format!(
                "bias of length {} for {c} channels",
                self.value(bias).len()
            ));
        }
        let plane = h * w;
        let b = self.value(bias);
        let value = Tensor::from_fn(self.value(x).shape(), |i| {
            self.value(x).data()[i] + b.data()[(i / plane) % c]
        });
        Ok(self.custom(
            "add_channel_bias",
            &[x, bias],
            value,
            Box::new(move |g, ins, _| {
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[(i / plane) % c] += v;
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::new(ins[1].shape().to_vec(), gb).unwrap()),
                ]
            }),
        ))
    }

    /// Expands frame coefficients `w: [O, C, M]` into pixel kernels
    /// `[O, C, K, K]` using constant `atoms: [M, K, K]`.
    pub fn synthesize_kernels(&mut self, w: Var, atoms: &Tensor) -> Result<Var> {
        let (o, c, m) = match *self.value(w).shape() {
            [o, c, m] => (o, c, m),
            _ => return contract(format!("weights must be [O,C,M], got {:?}", self.value(w).shape())),
        };
        let (am, k) = match *atoms.shape() {
            [am, k, k2] if k == k2 => (am, k),
            _ => return contract(format!("atoms must be [M,K,K], got {:?}", atoms.shape())),
        };
        if am != m {
            return contract(format!("weights carry {m} coefficients, frame has {am} atoms"));
        }
        let value = synthesize(self.value(w), atoms, o, c, m, k);
        let atoms = atoms.clone();
        Ok(self.custom(
            "synthesize_kernels",
            &[w],
            value,
            Box::new(move |g, ins, _| {
                let kk = k * k;
                let mut gw = vec![0.0; ins[0].len()];
                for oc in 0..o * c {
                    let gk = &g.data()[oc * kk..(oc + 1) * kk];
                    for a in 0..m {
                        gw[oc * m + a] = dot(gk, &atoms.data()[a * kk..(a + 1) * kk]);
                    }
                }
                vec![Some(Tensor::new(vec![o, c, m], gw).unwrap())]
            }),
        ))
    }

    /// Frame lift: correlates every input channel with each of the constant
    /// `atoms: [M, K, K]`, giving `C * M` channels ordered `c * M + m`.
    pub fn lift(&mut self, x: Var, atoms: &Tensor) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let (m, k) = match *atoms.shape() {
            [m, k, k2] if k == k2 && k % 2 == 1 => (m, k),
            _ => return contract(format!("atoms must be [M,K,K] with odd K, got {:?}", atoms.shape())),
        };
        let bank = atoms.clone().reshape(&[m, 1, k, k])?;
        let plane = h * w;
        let mut out = vec![0.0; n * c * m * plane];
        for b in 0..n {
            for ic in 0..c {
                let src = &self.value(x).data()[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                let dst = &mut out[(b * c + ic) * m * plane..(b * c + ic + 1) * m * plane];
                conv2d_forward(src, bank.data(), dst, 1, 1, m, h, w, k);
            }
        }
        let shape = if self.value(x).rank() == 3 {
            vec![c * m, h, w]
        } else {
            vec![n, c * m, h, w]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.custom(
            "lift",
            &[x],
            value,
            Box::new(move |g, ins, _| {
                let mut gx = vec![0.0; ins[0].len()];
                for b in 0..n {
                    for ic in 0..c {
                        let gsrc = &g.data()[(b * c + ic) * m * plane..(b * c + ic + 1) * m * plane];
                        let dst = &mut gx[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                        conv2d_backward_input(gsrc, bank.data(), dst, 1, 1, m, h, w, k);
                    }
                }
                vec![Some(Tensor::new(ins[0].shape().to_vec(), gx).unwrap())]
            }),
        ))
    }

    /// Training-mode batch normalization over `(N, H, W)` per channel.
    /// Returns the output and the biased batch statistics `(mean, var)`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.value(x).nchw()?;
        check_channel_param(self.value(scale), c)?;
        check_channel_param(self.value(shift), c)?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                var[ch] += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(self.value(x).shape(), |i| {
            let ch = (i / plane) % c;
            (xs[i] - mean[ch]) * inv_std[ch]
        });
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let value = Tensor::from_fn(xhat.shape(), |i| {
            let ch = (i / plane) % c;
            sc[ch] * xhat.data()[i] + sh[ch]
        });
        let (m_out, v_out) = (mean.clone(), var.clone());
        let y = self.custom(
            "batchnorm",
            &[x, scale, shift],
            value,
            Box::new(move |g, ins, _| {
                let sc = ins[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, gv) in g.data().iter().enumerate() {
                    let ch = (i / plane) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xhat.data()[i];
                }
                let gx = Tensor::from_fn(ins[0].shape(), |i| {
                    let ch = (i / plane) % c;
                    sc[ch] * inv_std[ch] / count
                        * (count * g.data()[i] - sum_g[ch] - xhat.data()[i] * sum_gx[ch])
                });
                vec![
                    Some(gx),
                    Some(Tensor::new(ins[1].shape().to_vec(), sum_gx).unwrap()),
                    Some(Tensor::new(ins[2].shape().to_vec(), sum_g).unwrap()),
                ]
            }),
        );
        Ok((y, m_out, v_out))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, h, w) = self.value(x).nchw()?;
        check_channel_param(self.value(scale), c)?;
        check_channel_param(self.value(shift), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return contract("running statistics do not match channel count");
        }
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xhat = Tensor::from_fn(self.value(x).shape(), |i| {
            let ch = (i / plane) % c;
            (self.value(x).data()[i] - mean[ch]) * inv_std[ch]
        });
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let value = Tensor::from_fn(xhat.shape(), |i| {
            let ch = (i / plane) % c;
            sc[ch] * xhat.data()[i] + sh[ch]
        });
        Ok(self.custom(
            "batchnorm_eval",
            &[x, scale, shift],
            value,
            Box::new(move |g, ins, _| {
                let sc = ins[1].data();
                let mut gs = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let gx = Tensor::from_fn(ins[0].shape(), |i| {
                    let ch = (i / plane) % c;
                    gs[ch] += g.data()[i] * xhat.data()[i];
                    gb[ch] += g.data()[i];
                    g.data()[i] * sc[ch] * inv_std[ch]
                });
                vec![
                    Some(gx),
                    Some(Tensor::new(ins[1].shape().to_vec(), gs).unwrap()),
                    Some(Tensor::new(ins[2].shape().to_vec(), gb).unwrap()),
                ]
            }),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let grads = backward(&g, &ins, &node.value);
            adjoints[idx] = Some(g);
            for (input, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut adjoints[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { adjoints })
    }
}

fn check_channel_param(t: &Tensor, c: usize) -> Result<()> {
    if t.len() != c {
        return contract(format!("per-channel parameter of length {} for {c} channels", t.len()));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

pub(crate) fn synthesize(w: &Tensor, atoms: &Tensor, o: usize, c: usize, m: usize, k: usize) -> Tensor {
    let kk = k * k;
    let mut out = vec![0.0; o * c * kk];
    for oc in 0..o * c {
        let dst = &mut out[oc * kk..(oc + 1) * kk];
        for a in 0..m {
            let coef = w.data()[oc * m + a];
            for (d, s) in dst.iter_mut().zip(&atoms.data()[a * kk..(a + 1) * kk]) {
                *d += coef * s;
            }
        }
    }
    Tensor::new(vec![o, c, k, k], out).unwrap()
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Entries are compared relative to `max(|analytic|, |numeric|, floor)`
    /// where `floor = floor_ratio * max |analytic|` over all parameters.
    pub floor_ratio: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar produced by `f` against
/// central finite differences, perturbing every element of every parameter.
pub fn check_gradients<F>(params: &[Tensor], f: F, cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();
    let scale = analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let floor = (cfg.floor_ratio * scale).max(1e-12);

    let mut work = params.to_vec();
    let mut worst = (0, 0);
    let mut max_err = 0.0f64;
    let mut checked = 0;
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + cfg.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - cfg.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[pi].data()[ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > max_err || !err.is_finite() {
                max_err = if err.is_finite() { err } else { f64::INFINITY };
                worst = (pi, ei);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        worst,
        checked,
        passed: max_err < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_passes(params: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let report = check_gradients(params, f, GradCheck::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[3, 4], &mut rng);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.sum(v);
        assert_eq!(g.backward(s).unwrap().get(v).unwrap(), &Tensor::ones(&[3, 4]));

        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let grad = g.backward(s).unwrap().get(v).unwrap().clone();
        assert!(grad.max_abs_diff(&x.scalar_mul(2.0)).unwrap() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let v = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let p = g.param(Tensor::ones(&[2]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    /// Weighted sum with a fixed random projection so every output element matters.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = g.constant(random(g.value(y).shape(), &mut rng));
        let m = g.mul(y, r)?;
        Ok(g.sum(m))
    }

    #[test]
    fn elementwise_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = [random(&[2, 3, 3], &mut rng), random(&[2, 3, 3], &mut rng)];
        type Op = fn(&mut Graph, Var, Var) -> Result<Var>;
        let ops: [Op; 10] = [
            |g, a, b| g.add(a, b),
            |g, a, b| g.sub(a, b),
            |g, a, b| g.mul(a, b),
            |g, a, _| Ok(g.scalar_mul(a, -1.7)),
            |g, a, _| Ok(g.tanh(a)),
            |g, a, _| Ok(g.relu(a)),
            |g, a, _| Ok(g.softplus(a)),
            |g, a, _| Ok(g.sigmoid(a)),
            |g, a, _| Ok(g.sin(a)),
            |g, a, _| Ok(g.cos(a)),
        ];
        for op in ops {
            assert_passes(&params, |g, v| {
                let y = op(g, v[0], v[1])?;
                project(g, y, 2)
            });
        }
    }

    #[test]
    fn conv_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = [
            random(&[2, 2, 5, 4], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        assert_passes(&params, |g, v| {
            let y = g.conv2d(v[0], v[1])?;
            let y = g.add_channel_bias(y, v[2])?;
            project(g, y, 4)
        });
        let params = [random(&[2, 3, 4, 4], &mut rng), random(&[2, 3], &mut rng)];
        assert_passes(&params, |g, v| {
            let y = g.conv1x1(v[0], v[1])?;
            project(g, y, 5)
        });
    }

    #[test]
    fn frame_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let atoms = random(&[4, 3, 3], &mut rng);
        let params = [random(&[2, 3, 4], &mut rng), random(&[1, 3, 5, 5], &mut rng)];
        assert_passes(&params, |g, v| {
            let k = g.synthesize_kernels(v[0], &atoms)?;
            let y = g.conv2d(v[1], k)?;
            project(g, y, 7)
        });
        assert_passes(&params[1..], |g, v| {
            let y = g.lift(v[0], &atoms)?;
            project(g, y, 8)
        });
    }

    #[test]
    fn batchnorm_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = [
            random(&[3, 2, 4, 4], &mut rng),
            random(&[2], &mut rng),
            random(&[2], &mut rng),
        ];
        assert_passes(&params, |g, v| {
            let (y, _, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 10)
        });
        assert_passes(&params, |g, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
            project(g, y, 11)
        });
    }

    #[test]
    fn lift_matches_depthwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let atoms = random(&[3, 3, 3], &mut rng);
        let x = random(&[2, 5, 5], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let lifted = g.lift(xv, &atoms).unwrap();
        for c in 0..2 {
            let xc = Tensor::new(vec![1, 5, 5], x.data()[c * 25..(c + 1) * 25].to_vec()).unwrap();
            let yc = xc.conv2d(&atoms.clone().reshape(&[3, 1, 3, 3]).unwrap()).unwrap();
            assert_eq!(yc.data(), &g.value(lifted).data()[c * 75..(c + 1) * 75]);
        }
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = [random(&[2, 2, 6, 6], &mut rng), random(&[2, 2, 3, 3], &mut rng)];
        let run = || {
            let mut g = Graph::new();
            let v: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let y = g.conv2d(v[0], v[1]).unwrap();
            let y = g.tanh(y);
            let l = project(&mut g, y, 1).unwrap();
            let grads = g.backward(l).unwrap();
            (grads.get(v[0]).unwrap().clone(), grads.get(v[1]).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
