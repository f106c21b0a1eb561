//! Pixel-wise training on the blob task.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::blocks::{parse_network_spec, save_checkpoint, Network};
use crate::data::{blob_batch, BlobConfig, BlobMode};
use crate::error::{Error, Result};
use crate::metrics::{balanced_bce_node, evaluate_batch, EvalReport};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,loss,pixel_f,ods,ois";
/// Separates the evaluation stream from the training stream.
const EVAL_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// SGD with momentum 0.9.
    Sgd,
    /// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" | "sgd_momentum" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub mode: BlobMode,
    pub spec: String,
    pub eval_interval: usize,
    /// Held-out images scored at every evaluation.
    pub eval_samples: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            mode: BlobMode::Binary,
            spec: "DynResBlock[1]{order=1,pose=block}".into(),
            eval_interval: 100,
            eval_samples: 16,
            height: 64,
            width: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        parse_network_spec(&self.spec)?.validate()?;
        Ok(())
    }

    pub fn blob_config(&self) -> BlobConfig {
        BlobConfig::with_size(self.height, self.width)
    }

    pub fn eval_master(&self) -> u64 {
        self.seed ^ EVAL_STREAM_SALT
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "steps={}", self.steps)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "lr={}", self.lr)?;
        writeln!(f, "optimizer={}", self.optimizer)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "mode={}", self.mode)?;
        writeln!(f, "spec={}", self.spec)?;
        writeln!(f, "eval_interval={}", self.eval_interval)?;
        writeln!(f, "eval_samples={}", self.eval_samples)?;
        writeln!(f, "height={}", self.height)?;
        writeln!(f, "width={}", self.width)
    }
}

impl FromStr for TrainConfig {
    type Err = Error;

    /// `key=value` lines; missing keys keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("bad value '{v}' for {k}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "steps" => cfg.steps = int()?,
                "batch_size" => cfg.batch_size = int()?,
                "lr" => cfg.lr = v.parse().map_err(|_| bad())?,
                "optimizer" => cfg.optimizer = v.parse()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "mode" => cfg.mode = v.parse()?,
                "spec" => cfg.spec = v.to_string(),
                "eval_interval" => cfg.eval_interval = int()?,
                "eval_samples" => cfg.eval_samples = int()?,
                "height" => cfg.height = int()?,
                "width" => cfg.width = int()?,
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub pixel_f: f64,
    pub ods: f64,
    pub ois: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.loss, r.pixel_f, r.ods, r.ois
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub rows: Vec<MetricsRow>,
    /// Training loss of every step.
    pub losses: Vec<f64>,
    pub final_eval: EvalReport,
}

/// Optimizer state, one moment buffer pair per parameter.
struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl OptState {
    fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.store.params.values().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[Tensor], opt: Optimizer, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (i, (param, grad)) in net.store.params.values_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match opt {
                Optimizer::Sgd => {
                    for ((p, g), mo) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()) {
                        *mo = 0.9 * *mo + g;
                        *p -= lr * *mo;
                    }
                }
                Optimizer::Adam => {
                    let c1 = 1.0 - b1.powi(self.t);
                    let c2 = 1.0 - b2.powi(self.t);
                    for (j, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g;
                        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                        *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Probabilities for a batch of images in inference mode.
pub fn predict_batches(net: &Network, images: &Tensor, batch: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.nchw()?;
    let size = c * h * w;
    let mut out = Vec::with_capacity(n * h * w);
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch).min(n);
        let x = Tensor::new(vec![end - start, c, h, w], images.data()[start * size..end * size].to_vec())?;
        out.extend_from_slice(net.predict(&x)?.data());
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Scores `net` on `count` samples of the stream keyed by `master`.
pub fn evaluate_network(net: &Network, master: u64, count: usize, mode: BlobMode, cfg: &BlobConfig) -> Result<EvalReport> {
    let (images, targets) = blob_batch(master, 0, count, mode, cfg)?;
    let pred = predict_batches(net, &images, 8)?;
    evaluate_batch(&pred, &targets)
}

/// Runs training; with `out` set, writes `config.txt`, `metrics.csv` and a
/// `checkpoint/` directory there. A non-finite loss aborts the run after
/// saving `diagnostic/` (the parameters that produced it).
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = parse_network_spec(&cfg.spec)?;
    let mut net = Network::new(spec, 1, cfg.seed)?;
    train_network(&mut net, cfg, out, |_| {})
}

/// [`train`] on an existing network; `progress` sees every metrics row.
pub fn train_network(
    net: &mut Network,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_string())?;
    }
    let blob_cfg = cfg.blob_config();
    let (eval_x, eval_t) = blob_batch(cfg.eval_master(), 0, cfg.eval_samples, cfg.mode, &blob_cfg)?;
    let mut state = OptState::new(net);
    let mut rows = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut window = Vec::new();
    let mut last_eval = None;
    for step in 0..cfg.steps {
        let (x, t) = blob_batch(cfg.seed, (step * cfg.batch_size) as u64, cfg.batch_size, cfg.mode, &blob_cfg)?;
        let mut g = Graph::new();
        let vars = net.store.bind(&mut g);
        let xv = g.constant(x);
        let fwd = net.forward(&mut g, &vars, xv, true)?;
        let p = g.sigmoid(fwd.logits);
        let loss_v = balanced_bce_node(&mut g, p, &t)?;
        let loss = g.value(loss_v).data()[0];
        let grads = g.backward(loss_v)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|(name, v)| grads.get_or_zeros(*v, &net.store.params[name]))
            .collect();
        if !loss.is_finite() || grads.iter().any(|gr| !gr.is_finite()) {
            if let Some(dir) = out {
                save_checkpoint(net, &dir.join("diagnostic"))?;
            }
            return Err(Error::Divergence { step, loss });
        }
        state.step(net, &grads, cfg.optimizer, cfg.lr);
        net.store.update_running_stats(&fwd.bn_stats)?;
        losses.push(loss);
        window.push(loss);
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let pred = predict_batches(net, &eval_x, 8)?;
            let report = evaluate_batch(&pred, &eval_t)?;
            let row = MetricsRow {
                step: step + 1,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                pixel_f: report.pixel_f,
                ods: report.ods,
                ois: report.ois,
            };
            window.clear();
            progress(&row);
            rows.push(row);
            last_eval = Some(report);
            if let Some(dir) = out {
                fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(net, &dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome {
        network: net.clone(),
        rows,
        losses,
        final_eval: last_eval.expect("at least one evaluation"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 2,
            eval_interval: 3,
            eval_samples: 2,
            height: 32,
            width: 32,
            spec: "Conv2d[2]->DynResBlock[2]{order=1}".into(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig {
            lr: 0.0025,
            optimizer: Optimizer::Sgd,
            mode: BlobMode::Hard,
            ..tiny()
        };
        let back: TrainConfig = cfg.to_string().parse().unwrap();
        assert_eq!(back, cfg);
        assert!("steps=0".parse::<TrainConfig>().is_err());
        assert!("colour=blue".parse::<TrainConfig>().is_err());
        assert!("spec=Foo[3]".parse::<TrainConfig>().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig { lr: 0.0, ..tiny() };
        let spec = parse_network_spec(&cfg.spec).unwrap();
        let before = Network::new(spec, 1, cfg.seed).unwrap();
        let outcome = train(&cfg, None).unwrap();
        assert_eq!(outcome.network.store.params, before.store.params);
    }

    #[test]
    fn seeded_runs_write_identical_csv() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny();
        train(&cfg, Some(a.path())).unwrap();
        train(&cfg, Some(b.path())).unwrap();
        let ca = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        let cb = fs::read_to_string(b.path().join("metrics.csv")).unwrap();
        assert_eq!(ca, cb);
        assert!(ca.starts_with("step,loss,pixel_f,ods,ois\n3,"));
        assert_eq!(ca.lines().count(), 3);
        assert!(a.path().join("checkpoint").join("manifest.txt").exists());
    }

    #[test]
    fn divergence_writes_diagnostic_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let spec = parse_network_spec(&cfg.spec).unwrap();
        let mut net = Network::new(spec, 1, 0).unwrap();
        net.store.param_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
        match train_network(&mut net, &cfg, Some(dir.path()), |_| {}) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
        assert!(dir.path().join("diagnostic").join("manifest.txt").exists());
    }
}
