//! Standard image augmentation and Fourier amplitude mixing.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fft::fft2_inplace;
use crate::tensor::Tensor;

fn geometry(image: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::dim(op, format!("expected [channels, H, W], got {s:?}"))),
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Random resized crop (80–100% of the area, square), horizontal flip with
/// probability ½, then brightness and contrast jitter. Output is clamped to
/// `[0, 1]`.
pub fn standard_augment<R: Rng>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (ch, h, w) = geometry(image, "standard_augment")?;
    let scale = rng.gen_range(0.8..=1.0f64).sqrt();
    let (ch_h, ch_w) = (scale * h as f64, scale * w as f64);
    let oy = rng.gen_range(0.0..=(h as f64 - ch_h));
    let ox = rng.gen_range(0.0..=(w as f64 - ch_w));
    let flip = rng.gen_bool(0.5);
    let brightness = rng.gen_range(-0.1..=0.1);
    let contrast = rng.gen_range(0.8..=1.2);

    let n = h * w;
    let mut out = Vec::with_capacity(image.len());
    for c in 0..ch {
        let plane = &image.data()[c * n..(c + 1) * n];
        let start = out.len();
        for y in 0..h {
            for x in 0..w {
                let xs = if flip { w - 1 - x } else { x };
                let sy = oy + (y as f64 + 0.5) * ch_h / h as f64 - 0.5;
                let sx = ox + (xs as f64 + 0.5) * ch_w / w as f64 - 0.5;
                out.push(bilinear(plane, h, w, sy, sx));
            }
        }
        let mean = out[start..].iter().sum::<f64>() / n as f64;
        for v in &mut out[start..] {
            *v = ((*v - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Per-channel amplitude interpolation: the output keeps the Fourier phase
/// of `x` and takes the amplitude `(1−λ)·A(x) + λ·A(other)`. `λ = 0`
/// returns `x` unchanged.
pub fn amplitude_mix(x: &Tensor, other: &Tensor, lambda: f64) -> Result<Tensor> {
    let (ch, h, w) = geometry(x, "amplitude_mix")?;
    if x.shape() != other.shape() {
        return Err(Error::shape("amplitude_mix", x.shape(), other.shape()));
    }
    if lambda == 0.0 {
        return Ok(x.clone());
    }
    let n = h * w;
    let mut out = Vec::with_capacity(x.len());
    for c in 0..ch {
        let spectrum = |t: &Tensor| {
            let mut buf: Vec<Complex64> = t.data()[c * n..(c + 1) * n]
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            fft2_inplace(&mut buf, h, w, false, false);
            buf
        };
        let mut fx = spectrum(x);
        let fo = spectrum(other);
        for (z, o) in fx.iter_mut().zip(&fo) {
            let a = z.norm();
            let unit = if a > 0.0 { *z / a } else { Complex64::new(1.0, 0.0) };
            *z = unit * ((1.0 - lambda) * a + lambda * o.norm());
        }
        fft2_inplace(&mut fx, h, w, true, true);
        out.extend(fx.iter().map(|z| z.re));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// The student view and the Fourier-augmented teacher view of one sample.
/// Both start from the same standard augmentation of `x`; `x_other` is
/// augmented independently and its amplitude mixed in with
/// `λ ~ U(0, strength)`.
pub fn augment_pair<R: Rng>(x: &Tensor, x_other: &Tensor, strength: f64, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Parameter(format!("augmentation strength {strength} outside [0, 1]")));
    }
    if x.shape() != x_other.shape() {
        return Err(Error::shape("fourier_augment", x.shape(), x_other.shape()));
    }
    let student = standard_augment(x, rng)?;
    let other = standard_augment(x_other, rng)?;
    let lambda = if strength > 0.0 { rng.gen_range(0.0..strength) } else { 0.0 };
    let teacher = amplitude_mix(&student, &other, lambda)?;
    Ok((student, teacher))
}

/// Standard augmentation followed by amplitude mixing with a random
/// `λ ~ U(0, strength)`.
pub fn fourier_augment<R: Rng>(x: &Tensor, x_other: &Tensor, strength: f64, rng: &mut R) -> Result<Tensor> {
    augment_pair(x, x_other, strength, rng).map(|(_, t)| t)
}
