//! The variational autoencoder: encoder, decoder with mean and covariance
//! heads, and the regularised training objective.
//!
//! Architecture (all stride-2 layers use 4x4 kernels with padding 1):
//!
//! ```text
//! encoder: [Y | upsampled Cb Cr] -> levels x (conv s2, leaky) -> dense(hidden) -> dense(2 d_z)
//! decoder: z -> dense(hidden) -> dense -> reshape -> levels x (transposed conv s2, leaky)
//!   mean_y  head: 3x3 conv on the full-resolution trunk
//!   mean_c  head: 3x3 conv on the trunk level matching the chroma resolution
//!   cov     branch: 3x3 conv (leaky) -> 3x3 conv, producing per-pixel rows of L
//!                   (or basis weights W, mapped through B by a 1x1 conv)
//! ```
//!
//! Channels are `width * 2^i` at encoder level `i`. Pixel values are divided
//! by 255 before modelling, so densities are per unit-range intensities.

mod config;

use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use config::{ColorMode, Likelihood, ModelConfig};

use crate::autograd::{Tape, Var};
use crate::color::{upsample_chroma, Plane, YccImage};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::structured::ops::{OffDiagonalL1, StructuredQuad};
use crate::structured::{PackedCholesky, SparsityPattern};
use crate::tensor::Tensor;

pub const PIXEL_SCALE: f64 = 255.0;
const LEAK: f64 = 0.2;
const STRIDED_KERNEL: usize = 4;
/// Initial log standard deviation of the learned spherical scales.
pub const INIT_LOG_SIGMA: f64 = -2.0;
/// Scale applied to the fan-in initialisation of the covariance output layer.
const COV_OUTPUT_INIT_SCALE: f64 = 0.1;

/// Prefix shared by every covariance-branch parameter.
pub const COV_PREFIX: &str = "cov.";

/// Name of the learned luma log-scale of the spherical likelihood.
pub const Y_LOG_SIGMA: &str = "scale.y_log_sigma";
pub const C_LOG_SIGMA: &str = "scale.c_log_sigma";

/// Layers feeding a leaky ReLU get the variance-preserving gain
/// `sqrt(6 / (1 + a^2))` over the plain fan-in bound; linear outputs keep it.
fn layer_gain(name: &str) -> f64 {
    let linear = name == "enc.fc2" || name.starts_with("head.");
    if linear {
        1.0
    } else {
        (6.0 / (1.0 + LEAK * LEAK)).sqrt()
    }
}

fn scaled_init(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = fan_in_uniform(shape, fan_in, rng);
    t.data_mut().iter_mut().for_each(|v| *v *= gain);
    t
}

pub fn is_covariance_param(name: &str) -> bool {
    name.starts_with(COV_PREFIX)
}

fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// Model-ready tensors for a batch of images.
#[derive(Clone, Debug)]
pub struct Batch {
    pub len: usize,
    /// `[N,1,H,W]`, unit range.
    pub y: Tensor,
    /// `[N,2,h,w]`, unit range; colour mode only.
    pub chroma: Option<Tensor>,
    /// `[N,C,H,W]`, centred network input.
    pub encoder_input: Tensor,
    /// `[N,1,H,W]` known luma means that replace the mean head in the loss.
    pub fixed_mean_y: Option<Tensor>,
}

impl Batch {
    pub fn new(images: &[&YccImage], config: &ModelConfig) -> Result<Self> {
        let n = images.len();
        if n == 0 {
            return Err(Error::usage("empty batch"));
        }
        let s = config.image_size;
        let cs = config.chroma_size();
        let color = config.color == ColorMode::YCbCr;
        let mut y = Vec::with_capacity(n * s * s);
        let mut chroma = Vec::new();
        let mut enc = Vec::new();
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::config(format!(
                    "image is {}x{}, model expects {s}x{s}",
                    img.height(),
                    img.width()
                )));
            }
            y.extend(img.y.data.iter().map(|v| v / PIXEL_SCALE));
            enc.extend(img.y.data.iter().map(|v| v / PIXEL_SCALE - 0.5));
            if color {
                if img.factor != config.chroma_factor {
                    return Err(Error::config(format!(
                        "image chroma factor {} differs from model factor {}",
                        img.factor, config.chroma_factor
                    )));
                }
                chroma.extend(img.cb.data.iter().map(|v| v / PIXEL_SCALE));
                chroma.extend(img.cr.data.iter().map(|v| v / PIXEL_SCALE));
                let full = upsample_chroma(img, img.factor)?;
                enc.extend(full.cb.data.iter().map(|v| v / PIXEL_SCALE - 0.5));
                enc.extend(full.cr.data.iter().map(|v| v / PIXEL_SCALE - 0.5));
            }
        }
        let in_ch = if color { 3 } else { 1 };
        Ok(Batch {
            len: n,
            y: Tensor::new(vec![n, 1, s, s], y)?,
            chroma: if color {
                Some(Tensor::new(vec![n, 2, cs, cs], chroma)?)
            } else {
                None
            },
            encoder_input: Tensor::new(vec![n, in_ch, s, s], enc)?,
            fixed_mean_y: None,
        })
    }

    /// Pins the luma means to `means` (unit range, one plane per image).
    pub fn with_fixed_mean_y(mut self, means: &[Vec<f64>]) -> Result<Self> {
        let shape = self.y.shape().to_vec();
        if means.len() != self.len || means.iter().any(|m| m.len() != shape[2] * shape[3]) {
            return Err(Error::config("fixed means do not match the batch"));
        }
        self.fixed_mean_y = Some(Tensor::new(shape, means.concat())?);
        Ok(self)
    }

    /// Image `index` repeated `k` times.
    pub fn repeat(&self, index: usize, k: usize) -> Result<Batch> {
        fn rep(t: &Tensor, index: usize, k: usize) -> Result<Tensor> {
            let per = t.len() / t.shape()[0];
            let src = &t.data()[index * per..(index + 1) * per];
            let mut shape = t.shape().to_vec();
            shape[0] = k;
            Tensor::new(shape, src.repeat(k))
        }
        if index >= self.len {
            return Err(Error::usage(format!("image {index} of a batch of {}", self.len)));
        }
        Ok(Batch {
            len: k,
            y: rep(&self.y, index, k)?,
            chroma: self.chroma.as_ref().map(|c| rep(c, index, k)).transpose()?,
            encoder_input: rep(&self.encoder_input, index, k)?,
            fixed_mean_y: self.fixed_mean_y.as_ref().map(|m| rep(m, index, k)).transpose()?,
        })
    }
}

/// `q(z|x) = N(rho, omega^2 I)` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub rho: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Closed-form `KL(N(rho, omega^2) || N(0, I))`.
pub fn kl_divergence(q: &LatentGaussian) -> f64 {
    0.5 * q
        .rho
        .iter()
        .zip(&q.omega)
        .map(|(r, w)| w * w + r * r - 1.0 - (w * w).ln())
        .sum::<f64>()
}

/// `z = rho + omega * nu`, `nu ~ N(0, I)`.
pub fn reparameterize(q: &LatentGaussian, rng: &mut impl Rng) -> Vec<f64> {
    q.rho
        .iter()
        .zip(&q.omega)
        .map(|(r, w)| {
            let nu: f64 = rng.sample(StandardNormal);
            r + w * nu
        })
        .collect()
}

/// Standard-normal noise for a batch of latents.
pub fn latent_noise(n: usize, latent_dim: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..n * latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![n, latent_dim], data).expect("shape matches")
}

/// Luma covariance of one decoded image.
#[derive(Clone, Debug, PartialEq)]
pub enum LumaScale {
    Spherical(f64),
    /// Per-pixel standard deviations.
    Diagonal(Vec<f64>),
    Structured(PackedCholesky),
}

/// Decoder heads for one image, in unit-range intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub mean_y: Plane,
    /// `(Cb, Cr)` means at chroma resolution.
    pub mean_chroma: Option<(Plane, Plane)>,
    pub chroma_sigma: Option<[f64; 2]>,
    pub luma: LumaScale,
}

impl DecoderOutput {
    /// Predicted means as a `[0, 255]` image.
    pub fn mean_image(&self, factor: usize) -> Result<YccImage> {
        let up = |p: &Plane| p.map(|v| v * PIXEL_SCALE);
        let y = up(&self.mean_y);
        let (cb, cr) = match &self.mean_chroma {
            Some((cb, cr)) => (up(cb), up(cr)),
            None => {
                let (h, w) = (y.height / factor, y.width / factor);
                (Plane::filled(h, w, 128.0), Plane::filled(h, w, 128.0))
            }
        };
        YccImage::new(y, cb, cr, factor)
    }
}

fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: impl Fn(usize) -> f64) -> f64 {
    x.iter()
        .zip(mean)
        .enumerate()
        .map(|(i, (x, m))| {
            let s = sigma(i);
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - half_log_two_pi()
        })
        .sum()
}

/// `log p(x|z)` of a decoded image, computed without the tape.
pub fn likelihood_term(out: &DecoderOutput, x: &YccImage) -> Result<f64> {
    let xy: Vec<f64> = x.y.data.iter().map(|v| v / PIXEL_SCALE).collect();
    let mu = &out.mean_y.data;
    if xy.len() != mu.len() {
        return Err(Error::usage("image and decoder output differ in size"));
    }
    let mut total = match &out.luma {
        LumaScale::Spherical(s) => gaussian_log_density(&xy, mu, |_| *s),
        LumaScale::Diagonal(s) => gaussian_log_density(&xy, mu, |i| s[i]),
        LumaScale::Structured(l) => l.log_prob(mu, &xy)?,
    };
    if let (Some((mcb, mcr)), Some(sig)) = (&out.mean_chroma, out.chroma_sigma) {
        for (plane, mean, s) in [(&x.cb, mcb, sig[0]), (&x.cr, mcr, sig[1])] {
            let xc: Vec<f64> = plane.data.iter().map(|v| v / PIXEL_SCALE).collect();
            if xc.len() != mean.data.len() {
                return Err(Error::usage("chroma resolution differs from decoder output"));
            }
            total += gaussian_log_density(&xc, &mean.data, |_| s);
        }
    }
    if !total.is_finite() {
        return Err(Error::numeric("likelihood_term", "non-finite log-likelihood"));
    }
    Ok(total)
}

/// Encoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    /// `[N, d_z]`
    pub rho: Var,
    /// `[N, d_z]`
    pub log_omega: Var,
}

/// Decoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[N,1,H,W]`
    pub mean_y: Var,
    /// `[N,2,h,w]`
    pub mean_c: Option<Var>,
    /// `[N,slots,H,W]` rows of `L`, slot 0 as log-diagonal; absent in spherical mode.
    pub slots: Option<Var>,
}

/// Per-sample pieces of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    /// Scalar batch mean of the full objective.
    pub total: Var,
    /// `[N]` `log p(x|z)`
    pub log_likelihood: Var,
    /// `[N]` closed-form KL
    pub kl: Var,
    pub nll_mean: f64,
    pub kl_mean: f64,
    /// Batch mean of `alpha * ||x - mu||^2`.
    pub alpha_term: f64,
    /// Batch mean of `gamma * sum |L_ij|`, `i != j`.
    pub gamma_term: f64,
}

pub struct Model {
    config: ModelConfig,
    pattern: Option<Arc<SparsityPattern>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let s = config.image_size;
        let pattern = match config.likelihood {
            Likelihood::Spherical => None,
            Likelihood::Diagonal => Some(Arc::new(SparsityPattern::new(s, s, 1, 1)?)),
            Likelihood::Structured => Some(Arc::new(SparsityPattern::new(
                s,
                s,
                config.patch_size,
                config.dilation,
            )?)),
        };
        Ok(Model { config, pattern })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn pattern(&self) -> Option<&Arc<SparsityPattern>> {
        self.pattern.as_ref()
    }

    fn channels(&self, level: usize) -> usize {
        self.config.width << level
    }

    fn base_size(&self) -> usize {
        self.config.image_size >> self.config.levels
    }

    fn in_channels(&self) -> usize {
        match self.config.color {
            ColorMode::Gray => 1,
            ColorMode::YCbCr => 3,
        }
    }

    /// Trunk channels after decoder stage `i` (`0..levels`).
    fn decoder_channels(&self, stage: usize) -> usize {
        let lv = self.config.levels;
        self.channels(lv.saturating_sub(2 + stage).min(lv - 1))
    }

    /// Trunk feature index (0 = reshaped dense output) at chroma resolution.
    fn chroma_stage(&self) -> usize {
        let mut size = self.base_size();
        let mut idx = 0;
        while size < self.config.chroma_size() {
            size *= 2;
            idx += 1;
        }
        idx
    }

    fn feature_channels(&self, idx: usize) -> usize {
        if idx == 0 {
            self.channels(self.config.levels - 1)
        } else {
            self.decoder_channels(idx - 1)
        }
    }

    /// Parameter count of the covariance branch (including the basis).
    pub fn covariance_branch_size(&self) -> usize {
        let w = self.config.width;
        let outs = self.config.covariance_outputs();
        if outs == 0 {
            return 0;
        }
        let mut n = w * w * 9 + w + outs * w * 9 + outs;
        if self.config.uses_basis() {
            n += self.config.num_slots() * self.config.num_basis;
        }
        n
    }

    /// Seeded initial parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = STRIDED_KERNEL;
        let lv = self.config.levels;
        let conv = |store: &mut ParamStore, name: &str, shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng| {
            store.insert(format!("{name}.w"), scaled_init(&shape, fan_in, layer_gain(name), rng))?;
            let bias_len = if name.contains("up") { shape[1] } else { shape[0] };
            store.insert(format!("{name}.b"), Tensor::zeros(&[bias_len]))
        };

        let mut c_in = self.in_channels();
        for i in 0..lv {
            let c_out = self.channels(i);
            conv(&mut store, &format!("enc.conv{i}"), [c_out, c_in, k, k], c_in * k * k, &mut rng)?;
            c_in = c_out;
        }
        let base = self.base_size();
        let flat = self.channels(lv - 1) * base * base;
        let (h, d) = (self.config.hidden, self.config.latent_dim);
        let dense = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            store.insert(format!("{name}.w"), scaled_init(&[fan_in, fan_out], fan_in, layer_gain(name), rng))?;
            store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
        };
        dense(&mut store, "enc.fc1", flat, h, &mut rng)?;
        dense(&mut store, "enc.fc2", h, 2 * d, &mut rng)?;
        dense(&mut store, "dec.fc1", d, h, &mut rng)?;
        dense(&mut store, "dec.fc2", h, flat, &mut rng)?;

        let mut c_in = self.channels(lv - 1);
        for i in 0..lv {
            let c_out = self.decoder_channels(i);
            // each output pixel of a stride-2 transposed conv sees k*k/4 taps per channel
            conv(&mut store, &format!("dec.up{i}"), [c_in, c_out, k, k], c_in * k * k / 4, &mut rng)?;
            c_in = c_out;
        }
        let w = self.config.width;
        conv(&mut store, "head.mean_y", [1, w, 3, 3], w * 9, &mut rng)?;
        if self.config.color == ColorMode::YCbCr {
            let fc = self.feature_channels(self.chroma_stage());
            conv(&mut store, "head.mean_c", [2, fc, 3, 3], fc * 9, &mut rng)?;
        }
        store.insert(Y_LOG_SIGMA, Tensor::scalar(INIT_LOG_SIGMA))?;
        if self.config.color == ColorMode::YCbCr {
            store.insert(C_LOG_SIGMA, Tensor::full(&[2], INIT_LOG_SIGMA))?;
        }

        let outs = self.config.covariance_outputs();
        if outs > 0 {
            conv(&mut store, "cov.conv1", [w, w, 3, 3], w * 9, &mut rng)?;
            let mut out_w = fan_in_uniform(&[outs, w, 3, 3], w * 9, &mut rng);
            out_w.data_mut().iter_mut().for_each(|v| *v *= COV_OUTPUT_INIT_SCALE);
            store.insert("cov.conv2.w", out_w)?;
            let mut bias = Tensor::zeros(&[outs]);
            // start from the same precision as the initial spherical scale
            bias.data_mut()[0] = -INIT_LOG_SIGMA;
            store.insert("cov.conv2.b", bias)?;
            if self.config.uses_basis() {
                let m = self.config.num_slots();
                let nb = self.config.num_basis;
                let mut b = fan_in_uniform(&[m, nb], nb, &mut rng);
                for j in 0..nb {
                    b.data_mut()[j] = if j == 0 { 1.0 } else { 0.0 };
                }
                store.insert("cov.basis", b)?;
            }
        }
        Ok(store)
    }

    /// Whether `name` influences the loss under `mode`.
    pub fn uses_param(&self, name: &str, mode: Likelihood) -> bool {
        match mode {
            Likelihood::Spherical => !is_covariance_param(name),
            _ => name != Y_LOG_SIGMA,
        }
    }

    fn check_mode(&self, mode: Likelihood) -> Result<()> {
        if mode != Likelihood::Spherical && mode != self.config.likelihood {
            return Err(Error::config(format!(
                "a {} model cannot evaluate a {mode} likelihood",
                self.config.likelihood
            )));
        }
        Ok(())
    }

    fn conv_layer(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = tape.conv2d(x, p.var(&format!("{name}.w"))?, stride, pad)?;
        tape.add_bias(y, p.var(&format!("{name}.b"))?)
    }

    fn dense_layer(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(&format!("{name}.w"))?)?;
        tape.add_bias(y, p.var(&format!("{name}.b"))?)
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<Posterior> {
        let n = batch.len;
        let mut h = tape.constant(batch.encoder_input.clone())?;
        for i in 0..self.config.levels {
            h = self.conv_layer(tape, p, &format!("enc.conv{i}"), h, 2, 1)?;
            h = tape.leaky_relu(h, LEAK)?;
        }
        let flat = tape.value(h).len() / n;
        h = tape.reshape(h, &[n, flat])?;
        h = self.dense_layer(tape, p, "enc.fc1", h)?;
        h = tape.leaky_relu(h, LEAK)?;
        let out = self.dense_layer(tape, p, "enc.fc2", h)?;
        let d = self.config.latent_dim;
        Ok(Posterior {
            rho: tape.slice_channels(out, 0, d)?,
            log_omega: tape.slice_channels(out, d, d)?,
        })
    }

    /// `z = rho + exp(log_omega) * noise`
    pub fn sample_latent(&self, tape: &mut Tape, q: &Posterior, noise: &Tensor) -> Result<Var> {
        let nu = tape.constant(noise.clone())?;
        let omega = tape.exp(q.log_omega)?;
        let scaled = tape.mul(omega, nu)?;
        tape.add(q.rho, scaled)
    }

    /// Per-sample `KL(q || N(0, I))`, `[N]`.
    pub fn kl(&self, tape: &mut Tape, q: &Posterior) -> Result<Var> {
        let two_log = tape.scale(q.log_omega, 2.0)?;
        let var = tape.exp(two_log)?;
        let rho_sq = tape.square(q.rho)?;
        let a = tape.add(var, rho_sq)?;
        let b = tape.sub(a, two_log)?;
        let c = tape.add_scalar(b, -1.0)?;
        let s = tape.sum_per_sample(c)?;
        tape.scale(s, 0.5)
    }

    pub fn decode(&self, tape: &mut Tape, p: &Bound, z: Var, mode: Likelihood) -> Result<Decoded> {
        self.check_mode(mode)?;
        let n = tape.shape(z)[0];
        let lv = self.config.levels;
        let base = self.base_size();
        let mut h = self.dense_layer(tape, p, "dec.fc1", z)?;
        h = tape.leaky_relu(h, LEAK)?;
        h = self.dense_layer(tape, p, "dec.fc2", h)?;
        h = tape.leaky_relu(h, LEAK)?;
        h = tape.reshape(h, &[n, self.channels(lv - 1), base, base])?;
        let mut features = vec![h];
        for i in 0..lv {
            let name = format!("dec.up{i}");
            h = tape.conv_transpose2d(h, p.var(&format!("{name}.w"))?, 2, 1)?;
            h = tape.add_bias(h, p.var(&format!("{name}.b"))?)?;
            h = tape.leaky_relu(h, LEAK)?;
            features.push(h);
        }
        let mean_y = self.conv_layer(tape, p, "head.mean_y", h, 1, 1)?;
        let mean_y = tape.add_scalar(mean_y, 0.5)?;
        let mean_c = if self.config.color == ColorMode::YCbCr {
            let f = features[self.chroma_stage()];
            let m = self.conv_layer(tape, p, "head.mean_c", f, 1, 1)?;
            Some(tape.add_scalar(m, 0.5)?)
        } else {
            None
        };
        let slots = if mode == Likelihood::Spherical {
            None
        } else {
            let c = self.conv_layer(tape, p, "cov.conv1", h, 1, 1)?;
            let c = tape.leaky_relu(c, LEAK)?;
            let raw = self.conv_layer(tape, p, "cov.conv2", c, 1, 1)?;
            if self.config.uses_basis() {
                let b = p.var("cov.basis")?;
                let kernel = tape.reshape(b, &[self.config.num_slots(), self.config.num_basis, 1, 1])?;
                Some(tape.conv2d(raw, kernel, 1, 0)?)
            } else {
                Some(raw)
            }
        };
        Ok(Decoded { mean_y, mean_c, slots })
    }

    /// Per-sample `sum log N(x; mu, exp(log_sigma)^2)` with one scale per channel.
    fn spherical_log_density(&self, tape: &mut Tape, resid: Var, log_sigma: Var) -> Result<Var> {
        let shape = tape.shape(resid).to_vec();
        let ls = tape.reshape(log_sigma, &[1, shape[1], 1, 1])?;
        let ls = tape.expand(ls, &shape)?;
        let neg2 = tape.scale(ls, -2.0)?;
        let prec = tape.exp(neg2)?;
        let sq = tape.square(resid)?;
        let quad = tape.mul(sq, prec)?;
        let half = tape.scale(quad, -0.5)?;
        let t = tape.sub(half, ls)?;
        let t = tape.add_scalar(t, -half_log_two_pi())?;
        tape.sum_per_sample(t)
    }

    /// `[N]` log-likelihood of the batch under decoded outputs.
    pub fn log_likelihood(&self, tape: &mut Tape, p: &Bound, dec: &Decoded, batch: &Batch, mode: Likelihood) -> Result<Var> {
        self.check_mode(mode)?;
        let x = tape.constant(batch.y.clone())?;
        let resid = tape.sub(x, dec.mean_y)?;
        let n_p = self.config.num_pixels() as f64;
        let mut ll = match mode {
            Likelihood::Spherical => self.spherical_log_density(tape, resid, p.var(Y_LOG_SIGMA)?)?,
            Likelihood::Diagonal => {
                // slot 0 is log(1/sigma)
                let raw = dec.slots.ok_or_else(|| Error::usage("decoder ran without covariance branch"))?;
                let two = tape.scale(raw, 2.0)?;
                let prec = tape.exp(two)?;
                let sq = tape.square(resid)?;
                let quad = tape.mul(sq, prec)?;
                let half = tape.scale(quad, -0.5)?;
                let t = tape.add(half, raw)?;
                let s = tape.sum_per_sample(t)?;
                tape.add_scalar(s, -n_p * half_log_two_pi())?
            }
            Likelihood::Structured => {
                let slots = dec.slots.ok_or_else(|| Error::usage("decoder ran without covariance branch"))?;
                let pattern = self.pattern.clone().expect("structured model has a pattern");
                let quad = tape.custom(Rc::new(StructuredQuad::new(pattern)), &[slots, resid])?;
                let log_diag = tape.slice_channels(slots, 0, 1)?;
                // 0.5 log|LL^T| = sum_p log L_pp
                let half_log_det = tape.sum_per_sample(log_diag)?;
                let half_quad = tape.scale(quad, -0.5)?;
                let s = tape.add(half_log_det, half_quad)?;
                tape.add_scalar(s, -n_p * half_log_two_pi())?
            }
        };
        if let (Some(mc), Some(xc)) = (dec.mean_c, &batch.chroma) {
            let xc = tape.constant(xc.clone())?;
            let rc = tape.sub(xc, mc)?;
            let lc = self.spherical_log_density(tape, rc, p.var(C_LOG_SIGMA)?)?;
            ll = tape.add(ll, lc)?;
        }
        Ok(ll)
    }

    /// Full objective for one reparameterised draw per image:
    /// `-log p(x|z) + beta KL + alpha ||x - mu||^2 + gamma sum_{i != j} |L_ij|`, averaged over the batch.
    pub fn loss(&self, tape: &mut Tape, p: &Bound, batch: &Batch, noise: &Tensor, mode: Likelihood) -> Result<LossOutput> {
        let q = self.encode(tape, p, batch)?;
        let z = self.sample_latent(tape, &q, noise)?;
        let mut dec = self.decode(tape, p, z, mode)?;
        if let Some(m) = &batch.fixed_mean_y {
            dec.mean_y = tape.constant(m.clone())?;
        }
        let ll = self.log_likelihood(tape, p, &dec, batch, mode)?;
        let kl = self.kl(tape, &q)?;
        let n = batch.len as f64;

        let nll = tape.scale(ll, -1.0)?;
        let beta_kl = tape.scale(kl, self.config.beta)?;
        let mut per_sample = tape.add(nll, beta_kl)?;

        let mut alpha_term = 0.0;
        if self.config.alpha > 0.0 {
            let x = tape.constant(batch.y.clone())?;
            let r = tape.sub(x, dec.mean_y)?;
            let sq = tape.square(r)?;
            let mut sq_sum = tape.sum_per_sample(sq)?;
            if let (Some(mc), Some(xc)) = (dec.mean_c, &batch.chroma) {
                let xc = tape.constant(xc.clone())?;
                let rc = tape.sub(xc, mc)?;
                let sqc = tape.square(rc)?;
                let sc = tape.sum_per_sample(sqc)?;
                sq_sum = tape.add(sq_sum, sc)?;
            }
            let a = tape.scale(sq_sum, self.config.alpha)?;
            alpha_term = tape.value(a).data().iter().sum::<f64>() / n;
            per_sample = tape.add(per_sample, a)?;
        }

        let mut gamma_term = 0.0;
        if self.config.gamma > 0.0 && mode == Likelihood::Structured {
            let slots = dec.slots.expect("structured decode has slots");
            let pattern = self.pattern.clone().expect("structured model has a pattern");
            let l1 = tape.custom(Rc::new(OffDiagonalL1::new(pattern)), &[slots])?;
            let g = tape.scale(l1, self.config.gamma)?;
            gamma_term = tape.value(g).data().iter().sum::<f64>() / n;
            per_sample = tape.add(per_sample, g)?;
        }

        let total = tape.mean(per_sample)?;
        let nll_mean = -tape.value(ll).data().iter().sum::<f64>() / n;
        let kl_mean = tape.value(kl).data().iter().sum::<f64>() / n;
        Ok(LossOutput {
            total,
            log_likelihood: ll,
            kl,
            nll_mean,
            kl_mean,
            alpha_term,
            gamma_term,
        })
    }

    /// Posterior parameters for each image.
    pub fn encode_images(&self, params: &ParamStore, batch: &Batch) -> Result<Vec<LatentGaussian>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, &|_| false)?;
        let q = self.encode(&mut tape, &p, batch)?;
        let d = self.config.latent_dim;
        let rho = tape.value(q.rho).data();
        let lo = tape.value(q.log_omega).data();
        Ok((0..batch.len)
            .map(|i| LatentGaussian {
                rho: rho[i * d..(i + 1) * d].to_vec(),
                omega: lo[i * d..(i + 1) * d].iter().map(|v| v.exp()).collect(),
            })
            .collect())
    }

    /// Decoder heads for each latent vector.
    pub fn decode_latents(&self, params: &ParamStore, latents: &[Vec<f64>], mode: Likelihood) -> Result<Vec<DecoderOutput>> {
        let d = self.config.latent_dim;
        if latents.iter().any(|z| z.len() != d) {
            return Err(Error::usage(format!("latent vectors must have length {d}")));
        }
        let n = latents.len();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, &|_| false)?;
        let z = tape.constant(Tensor::new(vec![n, d], latents.concat())?)?;
        let dec = self.decode(&mut tape, &p, z, mode)?;
        self.collect_outputs(&tape, params, &dec, n, mode)
    }

    fn collect_outputs(&self, tape: &Tape, params: &ParamStore, dec: &Decoded, n: usize, mode: Likelihood) -> Result<Vec<DecoderOutput>> {
        let s = self.config.image_size;
        let cs = self.config.chroma_size();
        let n_p = s * s;
        let mean_y = tape.value(dec.mean_y).data();
        let chroma_sigma = match params.get(C_LOG_SIGMA) {
            Some(c) => Some([c.value.data()[0].exp(), c.value.data()[1].exp()]),
            None => None,
        };
        let y_sigma = params.value(Y_LOG_SIGMA)?.data()[0].exp();
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let mean_chroma = match dec.mean_c {
                Some(mc) => {
                    let v = &tape.value(mc).data()[i * 2 * cs * cs..(i + 1) * 2 * cs * cs];
                    Some((
                        Plane::new(cs, cs, v[..cs * cs].to_vec())?,
                        Plane::new(cs, cs, v[cs * cs..].to_vec())?,
                    ))
                }
                None => None,
            };
            let luma = match mode {
                Likelihood::Spherical => LumaScale::Spherical(y_sigma),
                Likelihood::Diagonal => {
                    let raw = &tape.value(dec.slots.expect("diagonal slots")).data()[i * n_p..(i + 1) * n_p];
                    LumaScale::Diagonal(raw.iter().map(|r| (-r).exp()).collect())
                }
                Likelihood::Structured => {
                    let m = self.config.num_slots();
                    let raw = &tape.value(dec.slots.expect("structured slots")).data()[i * m * n_p..(i + 1) * m * n_p];
                    let pattern = self.pattern.clone().expect("structured pattern");
                    LumaScale::Structured(PackedCholesky::from_slots(pattern, raw)?)
                }
            };
            outs.push(DecoderOutput {
                mean_y: Plane::new(s, s, mean_y[i * n_p..(i + 1) * n_p].to_vec())?,
                mean_chroma,
                chroma_sigma,
                luma,
            });
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests;
