//! The four image modalities and multimodal sample assembly.
//!
//! Every renderer produces a 3 x H x H image with values in [0, 1]. Inputs are
//! rendered from the noisy channel output, targets from the clean waveform;
//! the noise modality is rendered from the noise realization and serves as its
//! own target.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FipError, Result};
use crate::sigsim::{self, IqSignal, ModulationScheme, SignalConfig};

/// Half-width of the I/Q histogram window.
pub const CONSTELLATION_WINDOW: f64 = 3.0;
/// Amplitude window of the raw-trace render is [-RAW_WINDOW, RAW_WINDOW].
pub const RAW_WINDOW: f64 = 3.0;
pub const MORLET_CENTER_FREQ: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Constellation,
    Scalogram,
    RawSignal,
    Noise,
}

pub const N_MODALITIES: usize = 4;

impl ModalityKind {
    pub const ALL: [ModalityKind; N_MODALITIES] = [
        ModalityKind::Constellation,
        ModalityKind::Scalogram,
        ModalityKind::RawSignal,
        ModalityKind::Noise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Constellation => "constellation",
            ModalityKind::Scalogram => "scalogram",
            ModalityKind::RawSignal => "raw_signal",
            ModalityKind::Noise => "noise",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = FipError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| FipError::invalid(format!("unknown modality `{s}`")))
    }
}

/// A 3 x size x size image stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    size: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn zeros(size: usize) -> Self {
        ImageTensor {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    pub fn from_vec(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(FipError::ShapeMismatch {
                op: "ImageTensor::from_vec",
                lhs: vec![3, size, size],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FipError::NonFinite("image pixel".into()));
        }
        Ok(ImageTensor { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, self.size, self.size]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let s = self.size;
        self.data[(c * s + y) * s + x] = v;
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Interleaved 8-bit RGB, clamping to [0, 1] first. Display only.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let s = self.size;
        let mut out = Vec::with_capacity(3 * s * s);
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    let v = self.get(c, y, x).clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }

    fn from_single_channel(size: usize, plane: &[f64]) -> Self {
        let mut data = Vec::with_capacity(3 * size * size);
        for _ in 0..3 {
            data.extend(plane.iter().map(|&v| v as f32));
        }
        ImageTensor { size, data }
    }
}

fn max_normalize(plane: &mut [f64]) {
    let max = plane.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        plane.iter_mut().for_each(|v| *v /= max);
    }
}

fn histogram_bin(v: f64, size: usize) -> usize {
    let u = (v + CONSTELLATION_WINDOW) / (2.0 * CONSTELLATION_WINDOW) * size as f64;
    (u.floor().max(0.0) as usize).min(size - 1)
}

/// Pixel (row, col) that an I/Q point lands in; +Q points up.
pub fn constellation_pixel(z: Complex64, size: usize) -> (usize, usize) {
    (size - 1 - histogram_bin(z.im, size), histogram_bin(z.re, size))
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 {
        return Err(FipError::invalid("image size must be positive"));
    }
    Ok(())
}

/// log(1 + count) density of I/Q points over [-3, 3]^2, max-normalized.
pub fn render_constellation(iq: &IqSignal, size: usize) -> Result<ImageTensor> {
    check_size(size)?;
    if iq.is_empty() {
        return Err(FipError::invalid("cannot render an empty signal"));
    }
    let mut counts = vec![0u32; size * size];
    for &z in &iq.samples {
        let (r, c) = constellation_pixel(z, size);
        counts[r * size + c] += 1;
    }
    let mut plane: Vec<f64> = counts.iter().map(|&n| (n as f64).ln_1p()).collect();
    max_normalize(&mut plane);
    Ok(ImageTensor::from_single_channel(size, &plane))
}

/// The noise modality uses the same density render as the constellation.
pub fn render_noise(noise: &IqSignal, size: usize) -> Result<ImageTensor> {
    render_constellation(noise, size)
}

/// Log-spaced scales in [1, n_samples / 8].
pub fn scalogram_scales(n_samples: usize, size: usize) -> Vec<f64> {
    let max_scale = (n_samples as f64 / 8.0).max(1.0);
    if size == 1 {
        return vec![1.0];
    }
    (0..size)
        .map(|i| (max_scale.ln() * i as f64 / (size - 1) as f64).exp())
        .collect()
}

fn morlet_kernel(scale: f64) -> Vec<Complex64> {
    // conj(psi(u)) / sqrt(s) with psi(u) = pi^-1/4 exp(j 2 pi fc u) exp(-u^2 / 2), truncated at |u| <= 4.
    let half = (4.0 * scale).ceil() as isize;
    let norm = PI.powf(-0.25) / scale.sqrt();
    (-half..=half)
        .map(|k| {
            let u = k as f64 / scale;
            let env = norm * (-0.5 * u * u).exp();
            Complex64::from_polar(env, -2.0 * PI * MORLET_CENTER_FREQ * u)
        })
        .collect()
}

/// Time positions sampled by the scalogram (uniform downsampling).
pub fn scalogram_times(n_samples: usize, size: usize) -> Vec<usize> {
    (0..size)
        .map(|j| ((2 * j + 1) * n_samples / (2 * size)).min(n_samples - 1))
        .collect()
}

/// |CWT| with a complex Morlet wavelet: rows are scales (smallest first),
/// columns are time positions. Max-normalized.
pub fn render_scalogram(iq: &IqSignal, size: usize) -> Result<ImageTensor> {
    check_size(size)?;
    let n = iq.len();
    if n < size {
        return Err(FipError::invalid(format!(
            "scalogram needs at least {size} samples, got {n}"
        )));
    }
    let scales = scalogram_scales(n, size);
    let times = scalogram_times(n, size);
    let mut plane = vec![0.0; size * size];
    for (row, &s) in scales.iter().enumerate() {
        let kernel = morlet_kernel(s);
        let half = (kernel.len() / 2) as isize;
        for (col, &tau) in times.iter().enumerate() {
            let lo = (tau as isize - half).max(0) as usize;
            let hi = ((tau as isize + half) as usize).min(n - 1);
            let mut acc = Complex64::new(0.0, 0.0);
            for t in lo..=hi {
                let k = (t as isize - tau as isize + half) as usize;
                acc += iq.samples[t] * kernel[k];
            }
            plane[row * size + col] = acc.norm();
        }
    }
    max_normalize(&mut plane);
    Ok(ImageTensor::from_single_channel(size, &plane))
}

/// Row index of an amplitude under the [-3, 3] raw-trace window (top = +3).
pub fn raw_row(a: f64, size: usize) -> usize {
    let r = ((RAW_WINDOW - a) / (2.0 * RAW_WINDOW) * (size as f64 - 1.0)).round();
    r.clamp(0.0, size as f64 - 1.0) as usize
}

/// Line traces of I (channel 0) and Q (channel 1) over the first size^2
/// samples; channel 2 is their average.
pub fn render_raw(iq: &IqSignal, size: usize) -> Result<ImageTensor> {
    check_size(size)?;
    let n = iq.len().min(size * size);
    let mut img = ImageTensor::zeros(size);
    if n == 0 {
        return Ok(img);
    }
    let rails: [Box<dyn Fn(&Complex64) -> f64>; 2] = [Box::new(|z| z.re), Box::new(|z| z.im)];
    for (ch, rail) in rails.iter().enumerate() {
        let mut prev: Option<usize> = None;
        for col in 0..size {
            let start = col * n / size;
            let end = ((col + 1) * n / size).max(start + 1).min(n);
            let rows: Vec<usize> = iq.samples[start..end]
                .iter()
                .map(|z| raw_row(rail(z), size))
                .collect();
            let mut lo = *rows.iter().min().unwrap();
            let mut hi = *rows.iter().max().unwrap();
            if let Some(p) = prev {
                lo = lo.min(p);
                hi = hi.max(p);
            }
            for r in lo..=hi {
                img.set(ch, r, col, 1.0);
            }
            prev = rows.last().copied();
        }
    }
    for y in 0..size {
        for x in 0..size {
            let avg = 0.5 * (img.get(0, y, x) + img.get(1, y, x));
            img.set(2, y, x, avg);
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub image_size: usize,
    pub signal: SignalConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_size: 32,
            signal: SignalConfig::default(),
        }
    }
}

/// One pretraining / fine-tuning record. Arrays are indexed by [`ModalityKind::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub inputs: [ImageTensor; N_MODALITIES],
    pub targets: [ImageTensor; N_MODALITIES],
    pub label: Option<usize>,
    pub snr_db: f64,
}

impl MultimodalSample {
    pub fn input(&self, m: ModalityKind) -> &ImageTensor {
        &self.inputs[m.index()]
    }

    pub fn target(&self, m: ModalityKind) -> &ImageTensor {
        &self.targets[m.index()]
    }

    pub fn image_size(&self) -> usize {
        self.inputs[0].size()
    }
}

/// Simulates one waveform and renders all inputs and targets.
pub fn build_sample<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    snr_db: f64,
    rng: &mut R,
    cfg: &RenderConfig,
) -> Result<MultimodalSample> {
    let ch = sigsim::simulate(scheme, snr_db, &cfg.signal, rng)?;
    let size = cfg.image_size;
    let noise_img = render_noise(&ch.noise, size)?;
    let inputs = [
        render_constellation(&ch.noisy, size)?,
        render_scalogram(&ch.noisy, size)?,
        render_raw(&ch.noisy, size)?,
        noise_img.clone(),
    ];
    let targets = [
        render_constellation(&ch.clean, size)?,
        render_scalogram(&ch.clean, size)?,
        render_raw(&ch.clean, size)?,
        noise_img,
    ];
    Ok(MultimodalSample {
        inputs,
        targets,
        label: Some(scheme.index()),
        snr_db,
    })
}

/// Renders only the noisy constellation, the sole input used after pretraining.
pub fn build_constellation<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    snr_db: f64,
    rng: &mut R,
    cfg: &RenderConfig,
) -> Result<ImageTensor> {
    let ch = sigsim::simulate(scheme, snr_db, &cfg.signal, rng)?;
    render_constellation(&ch.noisy, cfg.image_size)
}

/// Per-channel normalization statistics for one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

/// `(x - mean) / std` per channel.
pub fn normalize(image: &ImageTensor, stats: &ChannelStats) -> Result<ImageTensor> {
    if stats.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(FipError::invalid("normalization std must be nonzero and finite"));
    }
    let plane = image.size * image.size;
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            ((v as f64 - stats.mean[c]) / stats.std[c]) as f32
        })
        .collect();
    Ok(ImageTensor {
        size: image.size,
        data,
    })
}

pub fn denormalize(image: &ImageTensor, stats: &ChannelStats) -> ImageTensor {
    let plane = image.size * image.size;
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            (v as f64 * stats.std[c] + stats.mean[c]) as f32
        })
        .collect();
    ImageTensor {
        size: image.size,
        data,
    }
}

/// Normalization statistics over a set of samples (computed from inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub per_modality: Vec<ChannelStats>,
    /// Channels whose std was zero and replaced with 1.0.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            per_modality: vec![ChannelStats::IDENTITY; N_MODALITIES],
            warnings: Vec::new(),
        }
    }

    pub fn get(&self, m: ModalityKind) -> &ChannelStats {
        &self.per_modality[m.index()]
    }

    pub fn compute(samples: &[MultimodalSample]) -> Self {
        let mut per_modality = Vec::with_capacity(N_MODALITIES);
        let mut warnings = Vec::new();
        for m in ModalityKind::ALL {
            let mut stats = ChannelStats::IDENTITY;
            for c in 0..3 {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                let mut count = 0usize;
                for s in samples {
                    let img = s.input(m);
                    let plane = img.size * img.size;
                    for &v in &img.data[c * plane..(c + 1) * plane] {
                        sum += v as f64;
                        sum_sq += (v as f64) * (v as f64);
                        count += 1;
                    }
                }
                if count == 0 {
                    continue;
                }
                let mean = sum / count as f64;
                let var = (sum_sq / count as f64 - mean * mean).max(0.0);
                let std = var.sqrt();
                stats.mean[c] = mean;
                if std > 0.0 {
                    stats.std[c] = std;
                } else {
                    stats.std[c] = 1.0;
                    warnings.push(format!("{m} channel {c}: zero std replaced by 1.0"));
                }
            }
            per_modality.push(stats);
        }
        NormStats {
            per_modality,
            warnings,
        }
    }
}
