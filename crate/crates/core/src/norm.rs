//! Plain (non-graph) batch normalization with running statistics.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    /// Weight of the old running value per update.
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    /// Normalizes `[C,H,W]` or `[N,C,H,W]` per channel. Train mode uses
    /// (biased) batch statistics and updates the running ones.
    pub fn forward(&mut self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        if !(self.eps > 0.0) {
            return contract("batch norm epsilon must be positive");
        }
        let (n, c, h, w) = x.nchw()?;
        if c != self.scale.len() {
            return contract(format!("batch norm has {} channels, input {c}", self.scale.len()));
        }
        let plane = h * w;
        if n * plane == 0 {
            return contract("batch norm over an empty batch");
        }
        let (mean, var) = match mode {
            NormMode::Train => {
                let count = (n * plane) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, v) in x.data().iter().enumerate() {
                    mean[(i / plane) % c] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for (i, v) in x.data().iter().enumerate() {
                    let ch = (i / plane) % c;
                    var[ch] += (v - mean[ch]).powi(2);
                }
                var.iter_mut().for_each(|v| *v /= count);
                for ch in 0..c {
                    self.running_mean[ch] = self.momentum * self.running_mean[ch] + (1.0 - self.momentum) * mean[ch];
                    self.running_var[ch] = self.momentum * self.running_var[ch] + (1.0 - self.momentum) * var[ch];
                }
                (mean, var)
            }
            NormMode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Ok(Tensor::from_fn(x.shape(), |i| {
            let ch = (i / plane) % c;
            self.scale[ch] * (x.data()[i] - mean[ch]) * inv[ch] + self.shift[ch]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_maps_to_shift() {
        let mut bn = BatchNorm::new(2);
        bn.shift = vec![0.25, -3.0];
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| if (i / 16) % 2 == 0 { 7.0 } else { -1.5 });
        let y = bn.forward(&x, NormMode::Train).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, bn.shift[(i / 16) % 2]);
        }
        assert!((bn.running_mean[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn standardized_input_is_unchanged() {
        let mut bn = BatchNorm::new(1);
        // Alternating +-1: zero mean, unit variance.
        let x = Tensor::from_fn(&[1, 8, 8], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let y = bn.forward(&x, NormMode::Train).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-4);
    }

    #[test]
    fn random_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[4, 3, 6, 6], |_| rng.random_range(-2.0..5.0));
        let mut bn = BatchNorm::new(3);
        let y = bn.forward(&x, NormMode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 36..(b * 3 + ch + 1) * 36].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let before = bn.clone();
        let e = bn.forward(&x, NormMode::Eval).unwrap();
        assert_eq!(bn, before);
        assert_eq!(e.shape(), x.shape());
    }

    #[test]
    fn rejects_bad_input() {
        let mut bn = BatchNorm::new(2);
        assert!(bn.forward(&Tensor::zeros(&[3, 4, 4]), NormMode::Train).is_err());
        bn.eps = 0.0;
        assert!(bn.forward(&Tensor::zeros(&[2, 4, 4]), NormMode::Train).is_err());
    }
}
