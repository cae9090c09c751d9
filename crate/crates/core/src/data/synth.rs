//! Procedural class patterns and the four spectral domain styles.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainSample, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::fft::fft2_inplace;
use crate::rng;
use crate::tensor::Tensor;

/// A fixed image transform that defines one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Clean,
    /// Gaussian blur.
    Lowpass,
    /// Unsharp-mask edge emphasis.
    Highpass,
    /// Random per-image Fourier phase noise.
    PhaseJitter,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Clean, Domain::Lowpass, Domain::Highpass, Domain::PhaseJitter];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Clean => "clean",
            Domain::Lowpass => "lowpass",
            Domain::Highpass => "highpass",
            Domain::PhaseJitter => "phasejitter",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown domain `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_domain_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of the `lowpass` blur, in pixels.
    pub blur_sigma: f64,
    /// Gain of the `highpass` unsharp mask.
    pub sharpen_gain: f64,
    /// Half-width in radians of the uniform `phasejitter` phase noise.
    pub phase_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 7,
            per_domain_per_class: 60,
            image_size: 32,
            channels: 1,
            seed: 1,
            blur_sigma: 1.5,
            sharpen_gain: 2.0,
            phase_jitter: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Bars,
    Rings,
    Checker,
}

/// Base pattern family of class `c`: kind, orientation (degrees) and
/// spatial frequency (cycles per image side).
fn class_pattern(c: usize) -> (Kind, f64, f64) {
    const TABLE: [(Kind, f64, f64); 7] = [
        (Kind::Bars, 0.0, 4.0),
        (Kind::Bars, 90.0, 4.0),
        (Kind::Bars, 45.0, 4.0),
        (Kind::Rings, 0.0, 3.0),
        (Kind::Rings, 0.0, 6.0),
        (Kind::Checker, 0.0, 2.0),
        (Kind::Checker, 0.0, 5.0),
    ];
    if c < TABLE.len() {
        return TABLE[c];
    }
    match c % 3 {
        0 => (Kind::Bars, ((c * 29) % 90) as f64, 3.0 + (c % 4) as f64),
        1 => (Kind::Rings, 0.0, 2.0 + (c % 5) as f64),
        _ => (Kind::Checker, ((c * 17) % 90) as f64, 2.0 + (c % 6) as f64),
    }
}

/// Uniform draw on a 1/1024 lattice, so rendered parameters are exactly
/// representable on every platform.
fn quantized<R: Rng>(rng: &mut R, low: f64, high: f64) -> f64 {
    let step = rng.gen_range(0..=1024u32) as f64 / 1024.0;
    low + (high - low) * step
}

/// Renders one `[channels, size, size]` image of class `class` in `[0, 1]`
/// with random nuisance parameters.
pub fn render_class<R: Rng>(class: usize, size: usize, channels: usize, rng: &mut R) -> Tensor {
    let (kind, angle, freq) = class_pattern(class);
    let theta = (angle + quantized(rng, -8.0, 8.0)) * PI / 180.0;
    let freq = freq * quantized(rng, 0.85, 1.15);
    let phase0 = quantized(rng, 0.0, 2.0 * PI);
    let (cx, cy) = (quantized(rng, -0.1, 0.1), quantized(rng, -0.1, 0.1));
    let contrast = quantized(rng, 0.6, 1.0);
    let brightness = quantized(rng, -0.1, 0.1);
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let (ct, st) = (libm::cos(theta), libm::sin(theta));

    let mut data = Vec::with_capacity(channels * size * size);
    for ch in 0..channels {
        let tint = 1.0 - 0.2 * ch as f64 / channels as f64;
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 - 0.5 - cx;
                let v = (y as f64 + 0.5) / size as f64 - 0.5 - cy;
                let along = u * ct + v * st;
                let across = -u * st + v * ct;
                let p = match kind {
                    Kind::Bars => libm::tanh(3.0 * libm::sin(2.0 * PI * freq * along + phase0)),
                    Kind::Rings => libm::sin(2.0 * PI * freq * libm::sqrt(u * u + v * v) + phase0),
                    Kind::Checker => libm::tanh(
                        3.0 * libm::sin(2.0 * PI * freq * along + phase0) * libm::sin(2.0 * PI * freq * across + phase0),
                    ),
                };
                let value = 0.5 + brightness + 0.5 * contrast * tint * p + noise.sample(rng);
                data.push(value.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![channels, size, size], data).expect("shape matches data")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of every channel, clamping at the borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for c in 0..ch {
        let base = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Multiplies every Fourier bin of each channel by `e^{jφ}`, with
/// `φ ~ U(−δ, δ)` drawn antisymmetrically so the output stays real.
pub fn phase_jitter<R: Rng>(image: &Tensor, delta: f64, rng: &mut R) -> Tensor {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let n = h * w;
    let mut out = Vec::with_capacity(image.len());
    for c in 0..ch {
        let plane = &image.data()[c * n..(c + 1) * n];
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2_inplace(&mut buf, h, w, false, false);
        let mut phi = vec![0.0; n];
        for u in 0..h {
            for v in 0..w {
                let idx = u * w + v;
                let mirror = ((h - u) % h) * w + (w - v) % w;
                if idx < mirror {
                    let p = if delta > 0.0 { rng.gen_range(-delta..=delta) } else { 0.0 };
                    phi[idx] = p;
                    phi[mirror] = -p;
                }
            }
        }
        for (z, p) in buf.iter_mut().zip(&phi) {
            *z *= Complex64::from_polar(1.0, *p);
        }
        fft2_inplace(&mut buf, h, w, true, true);
        out.extend(buf.iter().map(|z| z.re.clamp(0.0, 1.0)));
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Applies the style of `domain` to a rendered image.
pub fn apply_domain<R: Rng>(domain: Domain, image: &Tensor, config: &SyntheticConfig, rng: &mut R) -> Tensor {
    match domain {
        Domain::Clean => image.clone(),
        Domain::Lowpass => gaussian_blur(image, config.blur_sigma),
        Domain::Highpass => {
            let blurred = gaussian_blur(image, config.blur_sigma);
            image
                .zip_map(&blurred, |x, b| (x + config.sharpen_gain * (x - b)).clamp(0.0, 1.0))
                .expect("same shape")
        }
        Domain::PhaseJitter => phase_jitter(image, config.phase_jitter, rng),
    }
}

/// Generates the four-domain dataset. Sample `i` of class `c` in domain `d`
/// draws from its own stream keyed by `(seed, d, c, i)`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<MultiDomainDataset> {
    if config.num_classes < 2 {
        return Err(Error::Parameter("need at least two classes".into()));
    }
    if config.per_domain_per_class == 0 {
        return Err(Error::Parameter("need at least one sample per class".into()));
    }
    if config.image_size < 2 || config.channels == 0 {
        return Err(Error::Parameter(format!(
            "degenerate geometry {}x{}x{}",
            config.channels, config.image_size, config.image_size
        )));
    }
    let mut domains = IndexMap::new();
    for (d, domain) in Domain::ALL.into_iter().enumerate() {
        let mut samples = Vec::with_capacity(config.num_classes * config.per_domain_per_class);
        for c in 0..config.num_classes {
            for i in 0..config.per_domain_per_class {
                let mut rng = rng::stream(config.seed, &[d as u64, c as u64, i as u64]);
                let image = render_class(c, config.image_size, config.channels, &mut rng);
                let image = apply_domain(domain, &image, config, &mut rng);
                samples.push(DomainSample {
                    image,
                    label: c,
                    domain: domain.name().to_string(),
                });
            }
        }
        domains.insert(domain.name().to_string(), samples);
    }
    MultiDomainDataset::new(domains, config.num_classes, config.channels, config.image_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_names_roundtrip() {
        for d in Domain::ALL {
            assert_eq!(d.name().parse::<Domain>().unwrap(), d);
        }
        assert!("sketch".parse::<Domain>().is_err());
    }

    #[test]
    fn zero_jitter_is_identity_up_to_rounding() {
        let mut rng = rng::stream(3, &[]);
        let img = render_class(2, 16, 1, &mut rng);
        let out = phase_jitter(&img, 0.0, &mut rng);
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::full(&[2, 8, 8], 0.25);
        assert!(gaussian_blur(&img, 1.5).max_abs_diff(&img) < 1e-15);
    }
}
