#![allow(dead_code)]

use famlp_core::fft::{self, ComplexTensor};
use famlp_core::model::{aff_forward, BoundAff, BoundLre, FamlpModel, ModelConfig};
use famlp_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error: central differences at
/// `h = 1e-5` carry ~1e-10 absolute noise, so exact zeros compare on that scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Literal double sum `Σ_h Σ_w x(h,w)·e^{−j2π(hu/R + wv/C)}` of a complex
/// `[rows, cols]` matrix given as separate real and imaginary parts.
pub fn dft2(re: &[f64], im: &[f64], rows: usize, cols: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = vec![0.0; rows * cols];
    let mut out_im = vec![0.0; rows * cols];
    for u in 0..rows {
        for v in 0..cols {
            let (mut sr, mut si) = (0.0, 0.0);
            for h in 0..rows {
                for w in 0..cols {
                    // Reduce the exponent modulo the period before the trig call.
                    let a = ((h * u) % rows) as f64 / rows as f64 + ((w * v) % cols) as f64 / cols as f64;
                    let theta = sign * 2.0 * std::f64::consts::PI * a;
                    let (s, c) = theta.sin_cos();
                    let (xr, xi) = (re[h * cols + w], im[h * cols + w]);
                    sr += xr * c - xi * s;
                    si += xr * s + xi * c;
                }
            }
            out_re[u * cols + v] = sr;
            out_im[u * cols + v] = si;
        }
    }
    if inverse {
        let n = (rows * cols) as f64;
        out_re.iter_mut().for_each(|v| *v /= n);
        out_im.iter_mut().for_each(|v| *v /= n);
    }
    (out_re, out_im)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between the tape gradient of `Σ c ⊙ f(inputs)`
/// and its central finite difference, over every entry of every input.
/// `c` is a fixed random weighting so no output direction is skipped.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        let mut r = rng(0x9e37);
        randn(g.shape(out), &mut r)
    };
    let loss_of = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let out = f(g, vars)?;
        let c = g.constant(weights.clone());
        let prod = g.mul(out, c)?;
        Ok(g.sum(prod))
    };
    let value_at = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss_of(&mut g, &vars).expect("forward");
        g.value(l).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = loss_of(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let plus = value_at(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let minus = value_at(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Two-layer model used by the end-to-end gradient check: 6×6 images in
/// 2×2 patches give 9 tokens; LRE runs at full rank so every op on the
/// path is exactly differentiable.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        image_size: 6,
        patch_size: 2,
        channels_in: 1,
        embed_dim: 8,
        depth: 2,
        token_mlp_dim: 5,
        channel_mlp_dim: 6,
        num_classes: 3,
        lre_rank: 2,
        lre_reduction: 4,
        aff_enabled: true,
        lre_enabled: true,
    }
}

/// Replaces every parameter with draws scaled for a well-conditioned check.
pub fn randomize(model: &mut FamlpModel, seed: u64) {
    let mut r = rng(seed);
    model.visit_parameters_mut(|name, t| {
        let (center, scale) = if name.ends_with("gamma") || name.ends_with("w_filter.re") {
            (1.0, 0.3)
        } else {
            (0.0, 0.5)
        };
        for v in t.data_mut() {
            *v = center + scale * r.gen_range(-1.0..1.0);
        }
    });
}

pub fn random_image(cfg: &ModelConfig, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[cfg.channels_in, cfg.image_size, cfg.image_size], |_| rng.gen_range(0.0..1.0))
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 2,
        channels_in: 1,
        embed_dim: 8,
        depth: 2,
        token_mlp_dim: 6,
        channel_mlp_dim: 10,
        num_classes: 4,
        lre_rank: 2,
        lre_reduction: 2,
        aff_enabled: true,
        lre_enabled: true,
    }
}

/// Runs one AFF layer on `x` `[T, C]` with the given filter and optional
/// `(w_down, w_up, rank)`.
pub fn run_aff(x: &Tensor, filter: &ComplexTensor, lre: Option<(&Tensor, &Tensor, usize)>) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let re = g.constant(filter.re.clone());
    let im = g.constant(filter.im.clone());
    let filter = g.complex(re, Some(im)).unwrap();
    let lre = lre.map(|(wd, wu, rank)| BoundLre {
        w_down_t: g.constant(wd.t().unwrap()),
        w_up_t: g.constant(wu.t().unwrap()),
        rank,
    });
    let out = aff_forward(&mut g, xv, Some(&BoundAff { filter, lre })).unwrap();
    g.value(out).clone()
}

pub fn spectrum(x: &Tensor) -> ComplexTensor {
    fft::fft2(&x.t().unwrap()).unwrap()
}

/// Conjugate-symmetric filter on a `[rows, cols]` grid with random
/// magnitude and phase.
pub fn hermitian_filter(rows: usize, cols: usize, rng: &mut impl Rng) -> ComplexTensor {
    let mut re = vec![0.0; rows * cols];
    let mut im = vec![0.0; rows * cols];
    for u in 0..rows {
        for v in 0..cols {
            let i = u * cols + v;
            let m = ((rows - u) % rows) * cols + (cols - v) % cols;
            if i < m {
                let (a, p) = (rng.gen_range(0.0..2.0), rng.gen_range(-3.0..3.0));
                re[i] = a * f64::cos(p);
                im[i] = a * f64::sin(p);
                re[m] = re[i];
                im[m] = -im[i];
            } else if i == m {
                re[i] = rng.gen_range(-2.0..2.0);
            }
        }
    }
    ComplexTensor::new(Tensor::new(vec![rows, cols], re).unwrap(), Tensor::new(vec![rows, cols], im).unwrap()).unwrap()
}

/// `(Y(k) + conj(Y(−k)))/2`: the spectrum of the real part of `ifft2(Y)`.
pub fn hermitian_part(y: &ComplexTensor) -> ComplexTensor {
    let (rows, cols) = (y.shape()[0], y.shape()[1]);
    let mut re = vec![0.0; rows * cols];
    let mut im = vec![0.0; rows * cols];
    for u in 0..rows {
        for v in 0..cols {
            let i = u * cols + v;
            let m = ((rows - u) % rows) * cols + (cols - v) % cols;
            re[i] = 0.5 * (y.re.data()[i] + y.re.data()[m]);
            im[i] = 0.5 * (y.im.data()[i] - y.im.data()[m]);
        }
    }
    ComplexTensor::new(Tensor::new(vec![rows, cols], re).unwrap(), Tensor::new(vec![rows, cols], im).unwrap()).unwrap()
}
