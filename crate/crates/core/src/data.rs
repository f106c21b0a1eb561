//! Seeded generator for the blob boundary-detection task.
//!
//! Every sample is addressed by `(master seed, index)`: a ChaCha stream
//! derives a per-sample seed, and the sample is a pure function of that seed,
//! the mode and the image size, so the stream is random-access.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::frames::{make_gaussian_derivative_frame, DerivativeSet, MAX_KERNEL};
use crate::io::{unit_to_u8, write_pgm};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlobMode {
    /// Foreground 1, background 0.
    Binary,
    /// Gratings with clearly different mean intensities.
    Textured,
    /// Gratings with matched mean and variance; only texture differs.
    Hard,
}

impl fmt::Display for BlobMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            BlobMode::Binary => "binary",
            BlobMode::Textured => "textured",
            BlobMode::Hard => "hard",
        })
    }
}

impl FromStr for BlobMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(BlobMode::Binary),
            "textured" => Ok(BlobMode::Textured),
            "hard" | "hard_textured" | "hard-textured" => Ok(BlobMode::Hard),
            other => Err(Error::Config(format!("unknown blob mode '{other}'"))),
        }
    }
}

/// Generator constants.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub height: usize,
    pub width: usize,
    pub max_blobs: usize,
    pub min_blob_area: usize,
    /// Upper bound on the fraction of boundary pixels.
    pub max_boundary_fraction: f64,
    /// Grating frequency range, cycles per pixel.
    pub frequency: (f64, f64),
    pub grating_amplitude: f64,
    pub noise_amplitude: f64,
    /// Standard deviation both regions are matched to in hard mode.
    pub hard_std: f64,
    pub max_retries: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            max_blobs: 4,
            min_blob_area: 30,
            max_boundary_fraction: 0.2,
            frequency: (0.1, 0.5),
            grating_amplitude: 0.2,
            noise_amplitude: 0.05,
            hard_std: 0.15,
            max_retries: 64,
        }
    }
}

impl BlobConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` boundary mask (0/1).
    pub target: Tensor,
    /// Underlying blob mask, row-major.
    pub mask: Vec<bool>,
    pub seed: u64,
    pub mode: BlobMode,
}

const MASK_STREAM: u64 = 0;
const TEXTURE_STREAM: u64 = 1;

/// Seed of sample `index` in the stream keyed by `master`.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// 8-connected morphological gradient (dilation minus erosion, 3x3 square
/// element, neighbours restricted to the image).
pub fn morphological_gradient(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut any, mut all) = (false, true);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let v = mask[rr as usize * w + cc as usize];
                    any |= v;
                    all &= v;
                }
            }
            out[r * w + c] = any && !all;
        }
    }
    out
}

fn draw_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let margin = 6.0;
    let cy = rng.random_range(margin..h as f64 - margin);
    let cx = rng.random_range(margin..w as f64 - margin);
    let bumps = rng.random_range(1..=3);
    let params: Vec<(f64, f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let ox = cx + rng.random_range(-4.0..4.0);
            let oy = cy + rng.random_range(-4.0..4.0);
            let sa = rng.random_range(3.0..7.0);
            let sb = rng.random_range(3.0..7.0);
            let th = rng.random_range(0.0..PI);
            (ox, oy, sa, sb, th)
        })
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let field: f64 = params
                .iter()
                .map(|&(ox, oy, sa, sb, th)| {
                    let (dx, dy) = (x - ox, y - oy);
                    let u = dx * th.cos() + dy * th.sin();
                    let v = -dx * th.sin() + dy * th.cos();
                    (-0.5 * (u * u / (sa * sa) + v * v / (sb * sb))).exp()
                })
                .sum();
            field > 0.5
        })
        .collect()
}

/// 1 to `max_blobs` blobs, each a thresholded sum of anisotropic Gaussian
/// bumps. Draws violating the constraints are redrawn.
pub fn generate_blob_mask(seed: u64, cfg: &BlobConfig) -> Result<Vec<bool>> {
    let (h, w) = (cfg.height, cfg.width);
    if h < 32 || w < 32 {
        return contract(format!("blob images must be at least 32x32, got {h}x{w}"));
    }
    let mut rng = stream(seed, MASK_STREAM);
    for _ in 0..cfg.max_retries {
        let count = rng.random_range(1..=cfg.max_blobs.max(1));
        let mut mask = vec![false; h * w];
        let mut ok = true;
        for _ in 0..count {
            let blob = draw_blob(&mut rng, h, w);
            if blob.iter().filter(|v| **v).count() < cfg.min_blob_area {
                ok = false;
            }
            mask.iter_mut().zip(&blob).for_each(|(m, b)| *m |= b);
        }
        if !ok {
            continue;
        }
        let area = mask.iter().filter(|v| **v).count();
        let boundary = morphological_gradient(&mask, h, w).iter().filter(|v| **v).count();
        if area > 0
            && area < h * w
            && boundary > 0
            && (boundary as f64) < cfg.max_boundary_fraction * (h * w) as f64
        {
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "no valid blob mask after {} draws (seed {seed})",
        cfg.max_retries
    )))
}

#[derive(Debug, Clone, Copy)]
struct Grating {
    freq: f64,
    angle: f64,
    phase: f64,
}

impl Grating {
    fn draw(rng: &mut ChaCha8Rng, cfg: &BlobConfig) -> Self {
        Self {
            freq: rng.random_range(cfg.frequency.0..cfg.frequency.1),
            angle: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        (2.0 * PI * self.freq * (x * self.angle.cos() + y * self.angle.sin()) + self.phase).sin()
    }

    /// Textures must differ visibly in orientation or frequency.
    fn distinct(&self, other: &Grating) -> bool {
        let d = (self.angle - other.angle).rem_euclid(PI);
        let dang = d.min(PI - d);
        dang > PI / 6.0 || (self.freq - other.freq).abs() > 0.1
    }
}

/// Fills foreground and background according to `mode`.
pub fn render_sample(mask: &[bool], mode: BlobMode, seed: u64, cfg: &BlobConfig) -> Result<BlobSample> {
    let (h, w) = (cfg.height, cfg.width);
    if mask.len() != h * w {
        return contract(format!("mask has {} pixels, expected {h}x{w}", mask.len()));
    }
    let mut rng = stream(seed, TEXTURE_STREAM);
    let image: Vec<f64> = match mode {
        BlobMode::Binary => mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        BlobMode::Textured | BlobMode::Hard => {
            let fg = Grating::draw(&mut rng, cfg);
            let mut bg = Grating::draw(&mut rng, cfg);
            while !fg.distinct(&bg) {
                bg = Grating::draw(&mut rng, cfg);
            }
            let mut raw: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let g = if mask[i] { &fg } else { &bg };
                    cfg.grating_amplitude * g.at(x, y)
                        + rng.random_range(-cfg.noise_amplitude..cfg.noise_amplitude)
                })
                .collect();
            if mode == BlobMode::Textured {
                let (lo, hi) = (0.25, 0.4);
                let bg_mean = rng.random_range(lo..hi);
                let fg_mean = rng.random_range(1.0 - hi..1.0 - lo);
                let (fm, bm) = if rng.random_bool(0.5) { (fg_mean, bg_mean) } else { (bg_mean, fg_mean) };
                for (v, &m) in raw.iter_mut().zip(mask) {
                    *v += if m { fm } else { bm };
                }
            } else {
                for region in [true, false] {
                    let idx: Vec<usize> = (0..h * w).filter(|&i| mask[i] == region).collect();
                    let n = idx.len() as f64;
                    let mean = idx.iter().map(|&i| raw[i]).sum::<f64>() / n;
                    let sd = (idx.iter().map(|&i| (raw[i] - mean).powi(2)).sum::<f64>() / n).sqrt();
                    for &i in &idx {
                        raw[i] = 0.5 + (raw[i] - mean) / sd * cfg.hard_std;
                    }
                }
            }
            raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
        }
    };
    let target: Vec<f64> = morphological_gradient(mask, h, w)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    Ok(BlobSample {
        image: Tensor::new(vec![1, h, w], image)?,
        target: Tensor::new(vec![1, h, w], target)?,
        mask: mask.to_vec(),
        seed,
        mode,
    })
}

/// Sample `index` of the stream keyed by `master`.
pub fn blob_sample(master: u64, index: u64, mode: BlobMode, cfg: &BlobConfig) -> Result<BlobSample> {
    let seed = sample_seed(master, index);
    let mask = generate_blob_mask(seed, cfg)?;
    render_sample(&mask, mode, seed, cfg)
}

/// Samples `start..start + count` stacked as `([N,1,H,W] images, [N,1,H,W] targets)`.
pub fn blob_batch(
    master: u64,
    start: u64,
    count: usize,
    mode: BlobMode,
    cfg: &BlobConfig,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut images = Vec::with_capacity(count * h * w);
    let mut targets = Vec::with_capacity(count * h * w);
    for i in 0..count as u64 {
        let s = blob_sample(master, start + i, mode, cfg)?;
        images.extend_from_slice(s.image.data());
        targets.extend_from_slice(s.target.data());
    }
    Ok((
        Tensor::new(vec![count, 1, h, w], images)?,
        Tensor::new(vec![count, 1, h, w], targets)?,
    ))
}

/// Kernel size used by [`gradient_magnitude`] for scale `sigma`.
pub fn gradient_kernel_size(sigma: f64) -> usize {
    2 * sigma.ceil() as usize + 1
}

/// `sqrt((Gx * x)^2 + (Gy * x)^2)` with the first-order Gaussian-derivative
/// atoms of the frames module.
pub fn gradient_magnitude(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return contract(format!("sigma must be positive, got {sigma}"));
    }
    let k = gradient_kernel_size(sigma);
    if k > MAX_KERNEL {
        return contract(format!("sigma {sigma} needs a {k}x{k} kernel (max {MAX_KERNEL})"));
    }
    let (_, c, _, _) = image.nchw()?;
    if c != 1 {
        return contract(format!("gradient magnitude takes one channel, got {c}"));
    }
    let frame = make_gaussian_derivative_frame(k, sigma, 1, DerivativeSet::TotalOrder)?;
    let kk = k * k;
    let bank = Tensor::new(vec![2, 1, k, k], frame.atoms().data()[kk..3 * kk].to_vec())?;
    let resp = image.conv2d(&bank)?;
    let (n, _, h, w) = resp.nchw()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let gx = &resp.data()[(2 * b) * plane..(2 * b + 1) * plane];
        let gy = &resp.data()[(2 * b + 1) * plane..(2 * b + 2) * plane];
        out.extend(gx.iter().zip(gy).map(|(a, b)| a.hypot(*b)));
    }
    let shape = if image.rank() == 3 { vec![1, h, w] } else { vec![n, 1, h, w] };
    Tensor::new(shape, out)
}

/// Area under the ROC curve of `scores` for binary `labels`
/// (Mann-Whitney statistic, ties counted half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return contract("scores and labels differ in length");
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return contract("AUC needs both classes");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC of gradient magnitude against the boundary target, pooled over
/// `count` samples.
pub fn gradient_magnitude_auc(master: u64, count: usize, mode: BlobMode, sigma: f64, cfg: &BlobConfig) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..count as u64 {
        let s = blob_sample(master, i, mode, cfg)?;
        scores.extend_from_slice(gradient_magnitude(&s.image, sigma)?.data());
        labels.extend(s.target.data().iter().map(|v| *v > 0.5));
    }
    auc(&scores, &labels)
}

/// Writes `count` samples as `NNNN_image.pgm` / `NNNN_target.pgm` plus
/// `manifest.csv` (`index,seed,mode`).
pub fn dump(dir: &Path, master: u64, count: usize, mode: BlobMode, cfg: &BlobConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("index,seed,mode\n");
    for i in 0..count as u64 {
        let s = blob_sample(master, i, mode, cfg)?;
        write_pgm(&dir.join(format!("{i:04}_image.pgm")), cfg.width, cfg.height, &unit_to_u8(s.image.data()))?;
        write_pgm(&dir.join(format!("{i:04}_target.pgm")), cfg.width, cfg.height, &unit_to_u8(s.target.data()))?;
        csv.push_str(&format!("{i},{},{mode}\n", s.seed));
    }
    fs::write(dir.join("manifest.csv"), csv)?;
    Ok(())
}
