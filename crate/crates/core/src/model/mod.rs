//! The frequency-aware mixer: patch embedding, one adaptive Fourier filter
//! in front of every mixer layer, token-average pooling and a linear head.
//!
//! Token features live in a `[T, C]` layout inside the mixer. The filter
//! transposes them to `[C, T]` and takes the 2-D DFT over that matrix, so
//! the channel axis is the first frequency axis and the token axis the
//! second.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint_from, save_checkpoint, write_checkpoint_to};
pub use config::ModelConfig;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft::ComplexTensor;
use crate::tensor::{ComplexVar, Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Low-rank enhancement weights: `W_down` maps `C → C/r`, `W_up` maps back.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankEnhancement {
    /// `[C, C/r]`
    pub w_down: Tensor,
    /// `[C/r, C]`
    pub w_up: Tensor,
    pub rank: usize,
}

/// Adaptive Fourier filter: a learnable complex filter the size of the
/// `[C, T]` spectrum, plus the optional low-rank enhancement.
#[derive(Debug, Clone, PartialEq)]
pub struct AffLayer {
    pub w_filter: ComplexTensor,
    pub lre: Option<LowRankEnhancement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerLayer {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    /// `[T, token_mlp_dim]`
    pub token_w1: Tensor,
    /// `[token_mlp_dim, T]`
    pub token_w2: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    /// `[C, channel_mlp_dim]`
    pub channel_w1: Tensor,
    /// `[channel_mlp_dim, C]`
    pub channel_w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamlpBlock {
    pub aff: Option<AffLayer>,
    pub mixer: MixerLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamlpModel {
    config: ModelConfig,
    /// `[S²·channels_in, C]`
    pub patch_embed: Tensor,
    pub blocks: Vec<FamlpBlock>,
    /// `[C, K]`
    pub head: Tensor,
}

/// Where to tap token features inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Before,
    AfterAff,
    AfterMixer,
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(Probe::Before),
            "after_aff" => Ok(Probe::AfterAff),
            "after_mixer" => Ok(Probe::AfterMixer),
            other => Err(Error::Parameter(format!(
                "invalid probe point `{other}` (expected before, after_aff or after_mixer)"
            ))),
        }
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Probe::Before => "before",
            Probe::AfterAff => "after_aff",
            Probe::AfterMixer => "after_mixer",
        })
    }
}

/// 64-bit FNV-1a, used to derive per-parameter seeds from names.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name))
}

fn xavier(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::randn(shape, std, &mut param_rng(seed, name))
}

/// Whether SGD weight decay applies to a parameter. LayerNorm affine terms
/// and the frequency filter are excluded.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".gamma") || name.ends_with(".beta") || name.contains("w_filter"))
}

impl FamlpModel {
    /// Initializes a model. Each parameter draws from its own seeded stream,
    /// so mixer weights do not depend on whether the filter is enabled.
    ///
    /// The filter starts at `1 + 0j` and `W_up` at zero, which makes every
    /// filter layer an exact identity at step 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, t, k) = (config.embed_dim, config.tokens(), config.num_classes);
        let patch_embed = {
            let std = 1.0 / (config.patch_dim() as f64).sqrt();
            Tensor::randn(&[config.patch_dim(), c], std, &mut param_rng(seed, "patch_embed.w"))
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("layers.{i}");
            let aff = config.aff_enabled.then(|| AffLayer {
                w_filter: ComplexTensor::full(&[c, t], 1.0, 0.0),
                lre: config.lre_active().then(|| {
                    let r = config.reduced_dim();
                    let name = format!("{p}.aff.w_down");
                    LowRankEnhancement {
                        w_down: Tensor::randn(&[c, r], 1.0 / (c as f64).sqrt(), &mut param_rng(seed, &name)),
                        w_up: Tensor::zeros(&[r, c]),
                        rank: config.lre_rank,
                    }
                }),
            });
            let mixer = MixerLayer {
                norm1_gamma: Tensor::ones(&[c]),
                norm1_beta: Tensor::zeros(&[c]),
                token_w1: xavier(&[t, config.token_mlp_dim], seed, &format!("{p}.mixer.token_mlp.w1")),
                token_w2: xavier(&[config.token_mlp_dim, t], seed, &format!("{p}.mixer.token_mlp.w2")),
                norm2_gamma: Tensor::ones(&[c]),
                norm2_beta: Tensor::zeros(&[c]),
                channel_w1: xavier(&[c, config.channel_mlp_dim], seed, &format!("{p}.mixer.channel_mlp.w1")),
                channel_w2: xavier(&[config.channel_mlp_dim, c], seed, &format!("{p}.mixer.channel_mlp.w2")),
            };
            blocks.push(FamlpBlock { aff, mixer });
        }
        let head = xavier(&[c, k], seed, "head.w");
        Ok(FamlpModel {
            config,
            patch_embed,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters in canonical order with their checkpoint names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("patch_embed.w".to_string(), &self.patch_embed)];
        for (i, block) in self.blocks.iter().enumerate() {
            let p = format!("layers.{i}");
            if let Some(aff) = &block.aff {
                out.push((format!("{p}.aff.w_filter.re"), &aff.w_filter.re));
                out.push((format!("{p}.aff.w_filter.im"), &aff.w_filter.im));
                if let Some(lre) = &aff.lre {
                    out.push((format!("{p}.aff.w_down"), &lre.w_down));
                    out.push((format!("{p}.aff.w_up"), &lre.w_up));
                }
            }
            let m = &block.mixer;
            out.push((format!("{p}.mixer.norm1.gamma"), &m.norm1_gamma));
            out.push((format!("{p}.mixer.norm1.beta"), &m.norm1_beta));
            out.push((format!("{p}.mixer.token_mlp.w1"), &m.token_w1));
            out.push((format!("{p}.mixer.token_mlp.w2"), &m.token_w2));
            out.push((format!("{p}.mixer.norm2.gamma"), &m.norm2_gamma));
            out.push((format!("{p}.mixer.norm2.beta"), &m.norm2_beta));
            out.push((format!("{p}.mixer.channel_mlp.w1"), &m.channel_w1));
            out.push((format!("{p}.mixer.channel_mlp.w2"), &m.channel_w2));
        }
        out.push(("head.w".to_string(), &self.head));
        out
    }

    /// Mutable walk in the same order as [`FamlpModel::named_parameters`].
    pub fn visit_parameters_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("patch_embed.w", &mut self.patch_embed);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            if let Some(aff) = &mut block.aff {
                f(&format!("{p}.aff.w_filter.re"), &mut aff.w_filter.re);
                f(&format!("{p}.aff.w_filter.im"), &mut aff.w_filter.im);
                if let Some(lre) = &mut aff.lre {
                    f(&format!("{p}.aff.w_down"), &mut lre.w_down);
                    f(&format!("{p}.aff.w_up"), &mut lre.w_up);
                }
            }
            let m = &mut block.mixer;
            f(&format!("{p}.mixer.norm1.gamma"), &mut m.norm1_gamma);
            f(&format!("{p}.mixer.norm1.beta"), &mut m.norm1_beta);
            f(&format!("{p}.mixer.token_mlp.w1"), &mut m.token_w1);
            f(&format!("{p}.mixer.token_mlp.w2"), &mut m.token_w2);
            f(&format!("{p}.mixer.norm2.gamma"), &mut m.norm2_gamma);
            f(&format!("{p}.mixer.norm2.beta"), &mut m.norm2_beta);
            f(&format!("{p}.mixer.channel_mlp.w1"), &mut m.channel_w1);
            f(&format!("{p}.mixer.channel_mlp.w2"), &mut m.channel_w2);
        }
        f("head.w", &mut self.head);
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.visit_parameters_mut(|_, t| t.zero_grad());
    }

    /// Registers every parameter as a graph leaf. With `trainable` false the
    /// leaves are constants and nothing downstream tracks gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel> {
        let mut leaves = Vec::new();
        let mut add = |g: &mut Graph, t: &Tensor| {
            let v = if trainable { g.param(t) } else { g.constant(t.clone()) };
            leaves.push(v);
            v
        };
        let patch_embed = add(g, &self.patch_embed);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let aff = match &block.aff {
                Some(aff) => {
                    let re = add(g, &aff.w_filter.re);
                    let im = add(g, &aff.w_filter.im);
                    let lre = match &aff.lre {
                        Some(lre) => {
                            let w_down = add(g, &lre.w_down);
                            let w_up = add(g, &lre.w_up);
                            Some((w_down, w_up, lre.rank))
                        }
                        None => None,
                    };
                    Some((re, im, lre))
                }
                None => None,
            };
            let m = &block.mixer;
            let norm1 = (add(g, &m.norm1_gamma), add(g, &m.norm1_beta));
            let token = (add(g, &m.token_w1), add(g, &m.token_w2));
            let norm2 = (add(g, &m.norm2_gamma), add(g, &m.norm2_beta));
            let channel = (add(g, &m.channel_w1), add(g, &m.channel_w2));
            blocks.push((aff, norm1, token, norm2, channel));
        }
        let head = add(g, &self.head);

        // Derived nodes (packed filters, transposed weights) are shared by
        // every sample that runs through this binding.
        let mut bound_blocks = Vec::with_capacity(blocks.len());
        for (aff, norm1, token, norm2, channel) in blocks {
            let aff = match aff {
                Some((re, im, lre)) => {
                    let filter = g.complex(re, Some(im))?;
                    let lre = match lre {
                        Some((w_down, w_up, rank)) => Some(BoundLre {
                            w_down_t: g.transpose(w_down)?,
                            w_up_t: g.transpose(w_up)?,
                            rank,
                        }),
                        None => None,
                    };
                    Some(BoundAff { filter, lre })
                }
                None => None,
            };
            let mixer = BoundMixer {
                norm1,
                token_w1_t: g.transpose(token.0)?,
                token_w2_t: g.transpose(token.1)?,
                norm2,
                channel,
            };
            bound_blocks.push(BoundBlock { aff, mixer });
        }
        Ok(BoundModel {
            config: self.config.clone(),
            patch_embed,
            blocks: bound_blocks,
            head,
            leaves,
        })
    }

    /// Adds the gradients recorded in `g` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundModel) -> Result<()> {
        let mut leaves = bound.leaves.iter();
        let mut result = Ok(());
        self.visit_parameters_mut(|_, t| {
            let v = *leaves.next().expect("binding matches the parameter walk");
            if result.is_ok() {
                result = g.accumulate_into(v, t);
            }
        });
        result
    }

    /// Logits `[K]` for one image, without gradient tracking.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let out = bound.forward(&mut g, image)?;
        Ok(g.value(out).clone())
    }

    /// Logits for many images; the parameters are bound once and the
    /// per-image nodes dropped after each forward pass.
    pub fn logits_many(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let mark = g.len();
        let mut out = Vec::with_capacity(images.len());
        for image in images {
            let v = bound.forward(&mut g, image)?;
            out.push(g.value(v).clone());
            g.truncate(mark);
        }
        Ok(out)
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }

    /// Token features `[T, C]` at a probe point of layer `layer`.
    pub fn probe(&self, image: &Tensor, layer: usize, probe: Probe) -> Result<Tensor> {
        Ok(self.probe_many(&[image], layer, &[probe])?.remove(0).remove(0))
    }

    /// Features at several probe points for each image: `out[image][probe]`.
    pub fn probe_many(&self, images: &[&Tensor], layer: usize, probes: &[Probe]) -> Result<Vec<Vec<Tensor>>> {
        if layer >= self.blocks.len() {
            return Err(Error::Index {
                op: "probe",
                index: layer,
                size: self.blocks.len(),
            });
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let mark = g.len();
        let mut out = Vec::with_capacity(images.len());
        for image in images {
            let taps = bound.forward_taps(&mut g, image, layer)?;
            out.push(
                probes
                    .iter()
                    .map(|p| {
                        let v = match p {
                            Probe::Before => taps.0,
                            Probe::AfterAff => taps.1,
                            Probe::AfterMixer => taps.2,
                        };
                        g.value(v).clone()
                    })
                    .collect(),
            );
            g.truncate(mark);
        }
        Ok(out)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- binding

#[derive(Debug, Clone)]
pub struct BoundLre {
    /// `W_downᵀ`, `[C/r, C]`
    pub w_down_t: Var,
    /// `W_upᵀ`, `[C, C/r]`
    pub w_up_t: Var,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct BoundAff {
    pub filter: ComplexVar,
    pub lre: Option<BoundLre>,
}

#[derive(Debug, Clone)]
pub struct BoundMixer {
    pub norm1: (Var, Var),
    pub token_w1_t: Var,
    pub token_w2_t: Var,
    pub norm2: (Var, Var),
    pub channel: (Var, Var),
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub aff: Option<BoundAff>,
    pub mixer: BoundMixer,
}

/// A model's parameters registered in one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    config: ModelConfig,
    pub patch_embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub head: Var,
    leaves: Vec<Var>,
}

impl BoundModel {
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Logits `[K]` for one `[channels, H, W]` image.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let mut x = patch_embed(g, image, self.patch_embed, &self.config)?;
        for block in &self.blocks {
            x = aff_forward(g, x, block.aff.as_ref())?;
            x = mixer_layer_forward(g, x, &block.mixer)?;
        }
        self.classify(g, x)
    }

    /// Stacked logits `[B, K]`.
    pub fn forward_batch(&self, g: &mut Graph, images: &[&Tensor]) -> Result<Var> {
        let logits = images
            .iter()
            .map(|im| self.forward(g, im))
            .collect::<Result<Vec<_>>>()?;
        g.stack(&logits)
    }

    fn classify(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pooled = g.mean_axis(x, 0)?;
        let c = self.config.embed_dim;
        let row = g.reshape(pooled, &[1, c])?;
        let logits = g.matmul(row, self.head)?;
        g.reshape(logits, &[self.config.num_classes])
    }

    /// Runs up to and including layer `layer`, returning the features before
    /// its filter, after its filter and after its mixer.
    fn forward_taps(&self, g: &mut Graph, image: &Tensor, layer: usize) -> Result<(Var, Var, Var)> {
        let mut x = patch_embed(g, image, self.patch_embed, &self.config)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let before = x;
            let after_aff = aff_forward(g, x, block.aff.as_ref())?;
            x = mixer_layer_forward(g, after_aff, &block.mixer)?;
            if i == layer {
                return Ok((before, after_aff, x));
            }
        }
        Err(Error::Index {
            op: "probe",
            index: layer,
            size: self.blocks.len(),
        })
    }
}

// ------------------------------------------------------------- operations

/// Splits a `[channels, H, W]` image into non-overlapping `S×S` patches,
/// one row per patch in row-major grid order, each flattened as
/// `[channel, dy, dx]`.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (ch, s, size) = (config.channels_in, config.patch_size, config.image_size);
    if image.shape() != [ch, size, size] {
        return Err(Error::shape("patch_embed", image.shape(), &[ch, size, size]));
    }
    let grid = config.grid();
    let pd = config.patch_dim();
    let src = image.data();
    let mut out = vec![0.0; grid * grid * pd];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &mut out[(gy * grid + gx) * pd..(gy * grid + gx + 1) * pd];
            let mut k = 0;
            for c in 0..ch {
                for dy in 0..s {
                    let base = c * size * size + (gy * s + dy) * size + gx * s;
                    row[k..k + s].copy_from_slice(&src[base..base + s]);
                    k += s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![grid * grid, pd], out))
}

/// `X₁ = X₀·W_l`: `[T, S²·ch] · [S²·ch, C] → [T, C]`.
pub fn patch_embed(g: &mut Graph, image: &Tensor, w_l: Var, config: &ModelConfig) -> Result<Var> {
    let patches = g.constant(patchify(image, config)?);
    g.matmul(patches, w_l)
}

/// One mixer layer on `[T, C]` features:
/// token mixing `Z = X + W_p2ᵀ·σ(W_p1ᵀ·LN(X))`, then channel mixing
/// `out = Z + σ(LN(Z)·W_c1)·W_c2`.
pub fn mixer_layer_forward(g: &mut Graph, x: Var, layer: &BoundMixer) -> Result<Var> {
    let (t, c) = match g.shape(x) {
        [t, c] => (*t, *c),
        s => return Err(Error::dim("mixer_layer", format!("expected [T, C], got {s:?}"))),
    };
    if g.shape(layer.token_w1_t)[1] != t || g.shape(layer.channel.0)[0] != c {
        return Err(Error::shape("mixer_layer", &[t, c], g.shape(layer.token_w1_t)));
    }
    let h = g.layer_norm(x, layer.norm1.0, layer.norm1.1, LAYER_NORM_EPS)?;
    let h = g.matmul(layer.token_w1_t, h)?;
    let h = g.gelu(h);
    let h = g.matmul(layer.token_w2_t, h)?;
    let z = g.add(x, h)?;

    let h = g.layer_norm(z, layer.norm2.0, layer.norm2.1, LAYER_NORM_EPS)?;
    let h = g.matmul(h, layer.channel.0)?;
    let h = g.gelu(h);
    let h = g.matmul(h, layer.channel.1)?;
    g.add(z, h)
}

/// `F(X)` of `[T, C]` features, taken over the transposed `[C, T]` matrix.
pub fn spectrum(g: &mut Graph, x: Var) -> Result<ComplexVar> {
    let xt = g.transpose(x)?;
    let z = g.complex(xt, None)?;
    Ok(g.fft2(z))
}

fn check_filter(g: &Graph, x: Var, filter: ComplexVar) -> Result<()> {
    let s = g.shape(x);
    let f = g.shape(filter.packed());
    if s.len() != 2 || f[1..] != [s[1], s[0]] {
        return Err(Error::shape("lff", s, &f[1..]));
    }
    Ok(())
}

/// Learnable frequency filter: `Z_f = F(X) ⊙ W_filter`.
pub fn lff_forward(g: &mut Graph, x: Var, filter: ComplexVar) -> Result<ComplexVar> {
    check_filter(g, x, filter)?;
    let f = spectrum(g, x)?;
    g.complex_mul(f, filter)
}

/// Low-rank enhancement `W_upᵀ·M_SVD(W_downᵀ·F(X))`, with the real matrices
/// acting on the channel axis of each part.
pub fn lre_forward(g: &mut Graph, z_freq: ComplexVar, lre: &BoundLre) -> Result<ComplexVar> {
    let re = g.re(z_freq)?;
    let im = g.im(z_freq)?;
    let down_re = g.matmul(lre.w_down_t, re)?;
    let down_im = g.matmul(lre.w_down_t, im)?;
    let down = g.complex(down_re, Some(down_im))?;
    let low = g.truncated_svd_complex(down, lre.rank)?;
    let low_re = g.re(low)?;
    let low_im = g.im(low)?;
    let up_re = g.matmul(lre.w_up_t, low_re)?;
    let up_im = g.matmul(lre.w_up_t, low_im)?;
    g.complex(up_re, Some(up_im))
}

/// Adaptive Fourier filter on `[T, C]` features; identity when `aff` is `None`.
pub fn aff_forward(g: &mut Graph, x: Var, aff: Option<&BoundAff>) -> Result<Var> {
    let Some(aff) = aff else { return Ok(x) };
    check_filter(g, x, aff.filter)?;
    let f = spectrum(g, x)?;
    let mut z = g.complex_mul(f, aff.filter)?;
    if let Some(lre) = &aff.lre {
        let enhancement = lre_forward(g, f, lre)?;
        z = g.complex_add(z, enhancement)?;
    }
    let spatial = g.ifft2(z);
    let re = g.re(spatial)?;
    g.transpose(re)
}
