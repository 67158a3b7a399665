//! Evaluation metrics (importance-weighted NLL bound, posterior KL, RGB mean
//! squared error) and image dumps of reconstructions and samples.
//!
//! NLL bounds are per image, in nats, over the modelled representation
//! (luma plus subsampled chroma, or luma alone in grayscale mode) with
//! intensities scaled to unit range.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Tape;
use crate::color::{upsample_chroma, ycbcr_to_rgb, Plane, RgbImage, YccImage};
use crate::data::pnm::{write_pgm, write_ppm};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{kl_divergence, Batch, ColorMode, LatentGaussian, LumaScale, Model, DecoderOutput, PIXEL_SCALE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_IWAE_SAMPLES: usize = 500;
/// Latents decoded per tape when evaluating importance weights.
const IWAE_CHUNK: usize = 50;
/// Pixel offset mapped to the ends of the display range when rendering noise.
pub const NOISE_DISPLAY_RANGE: f64 = 64.0;

fn log_std_normal(v: &[f64]) -> f64 {
    v.iter().map(|x| -0.5 * x * x - 0.5 * (2.0 * PI).ln()).sum()
}

/// `log p(x|z_k) + log p(z_k) - log q(z_k|x)` for `z_k = rho + omega * noise_k`.
pub fn log_importance_weights(model: &Model, params: &ParamStore, x: &YccImage, noises: &[Vec<f64>]) -> Result<Vec<f64>> {
    let config = model.config();
    let batch = Batch::new(&[x], config)?;
    let q = model.encode_images(params, &batch)?.remove(0);
    let d = config.latent_dim;
    let mut out = Vec::with_capacity(noises.len());
    for chunk in noises.chunks(IWAE_CHUNK) {
        let zs: Vec<Vec<f64>> = chunk
            .iter()
            .map(|nu| q.rho.iter().zip(&q.omega).zip(nu).map(|((r, w), n)| r + w * n).collect())
            .collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, &|_| false)?;
        let z = tape.constant(Tensor::new(vec![chunk.len(), d], zs.concat())?)?;
        let dec = model.decode(&mut tape, &p, z, config.likelihood)?;
        let reps = batch.repeat(0, chunk.len())?;
        let ll = model.log_likelihood(&mut tape, &p, &dec, &reps, config.likelihood)?;
        for (k, nu) in chunk.iter().enumerate() {
            let log_q = log_std_normal(nu) - q.omega.iter().map(|w| w.ln()).sum::<f64>();
            out.push(tape.value(ll).data()[k] + log_std_normal(&zs[k]) - log_q);
        }
    }
    Ok(out)
}

/// `-log(1/K sum_k exp(l_k))` with the maximum subtracted first.
pub fn iwae_from_log_weights(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(Error::usage("importance bound needs at least one sample"));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numeric("iwae_nll", format!("log-weights are not finite (max {max})")));
    }
    let sum: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
    Ok(-(max + sum.ln() - (log_w.len() as f64).ln()))
}

/// Importance-weighted NLL bound with `k` latent samples drawn from `rng`.
pub fn iwae_nll_with_rng(model: &Model, params: &ParamStore, x: &YccImage, k: usize, rng: &mut impl Rng) -> Result<f64> {
    if k == 0 {
        return Err(Error::usage("K must be at least 1"));
    }
    let d = model.config().latent_dim;
    let noises: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    iwae_from_log_weights(&log_importance_weights(model, params, x, &noises)?)
}

pub fn iwae_nll(model: &Model, params: &ParamStore, x: &YccImage, k: usize, seed: u64) -> Result<f64> {
    iwae_nll_with_rng(model, params, x, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Generator for image `index` of an evaluation run.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn posteriors(model: &Model, params: &ParamStore, data: &Dataset) -> Result<Vec<LatentGaussian>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(64) {
        let imgs: Vec<&YccImage> = chunk.iter().map(|s| &s.ycc).collect();
        out.extend(model.encode_images(params, &Batch::new(&imgs, model.config())?)?);
    }
    Ok(out)
}

/// Per-image closed-form KL of the posterior to the prior.
pub fn kl_values(model: &Model, params: &ParamStore, data: &Dataset) -> Result<Vec<f64>> {
    Ok(posteriors(model, params, data)?.iter().map(kl_divergence).collect())
}

pub fn kl_metric(model: &Model, params: &ParamStore, data: &Dataset) -> Result<f64> {
    let v = kl_values(model, params, data)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean squared difference over all channels of two equally sized images.
pub fn mse_rgb(a: &RgbImage, b: &RgbImage) -> f64 {
    let pairs = [(&a.r, &b.r), (&a.g, &b.g), (&a.b, &b.b)];
    let n: usize = pairs.iter().map(|(p, _)| p.data.len()).sum();
    pairs
        .iter()
        .flat_map(|(p, q)| p.data.iter().zip(&q.data).map(|(x, y)| (x - y) * (x - y)))
        .sum::<f64>()
        / n as f64
}

/// RGB image of the decoder means in `[0, 255]`.
pub fn mean_rgb(out: &DecoderOutput, config_factor: usize, color: ColorMode) -> Result<RgbImage> {
    let ycc = out.mean_image(config_factor)?;
    match color {
        ColorMode::YCbCr => ycbcr_to_rgb(&upsample_chroma(&ycc, config_factor)?),
        ColorMode::Gray => {
            let y = ycc.y.clamped();
            RgbImage::new(y.clone(), y.clone(), y)
        }
    }
}

/// Decoder means at the posterior mean of every image.
pub fn reconstruct(model: &Model, params: &ParamStore, data: &[Sample]) -> Result<Vec<DecoderOutput>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let imgs: Vec<&YccImage> = chunk.iter().map(|s| &s.ycc).collect();
        let qs = model.encode_images(params, &Batch::new(&imgs, model.config())?)?;
        let zs: Vec<Vec<f64>> = qs.into_iter().map(|q| q.rho).collect();
        out.extend(model.decode_latents(params, &zs, model.config().likelihood)?);
    }
    Ok(out)
}

/// Per-image MSE between the input RGB and the RGB decoded from the
/// predicted means (no pixel noise), on the `[0, 255]` scale.
pub fn mse_values(model: &Model, params: &ParamStore, data: &Dataset) -> Result<Vec<f64>> {
    let config = model.config();
    let outs = reconstruct(model, params, &data.samples)?;
    outs.iter()
        .zip(&data.samples)
        .map(|(o, s)| Ok(mse_rgb(&s.rgb, &mean_rgb(o, config.chroma_factor, config.color)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stat { mean, std: var.sqrt() }
    }

    pub fn std_error(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

pub fn mse_metric(model: &Model, params: &ParamStore, data: &Dataset) -> Result<Stat> {
    Ok(Stat::of(&mse_values(model, params, data)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub index: usize,
    pub nll: f64,
    pub kl: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples_k: usize,
    pub nll: Stat,
    pub kl_mean: f64,
    pub mse: Stat,
    pub records: Vec<ImageRecord>,
}

impl EvalReport {
    pub fn from_records(samples_k: usize, records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::usage("no images evaluated"));
        }
        let col = |f: fn(&ImageRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let nll = Stat::of(&col(|r| r.nll));
        let kl_mean = Stat::of(&col(|r| r.kl)).mean;
        let mse = Stat::of(&col(|r| r.mse));
        Ok(EvalReport { samples_k, nll, kl_mean, mse, records })
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images  {}", self.records.len());
        let _ = writeln!(s, "K       {}", self.samples_k);
        let _ = writeln!(s, "NLL     {:.3} ± {:.3}", self.nll.mean, self.nll.std);
        let _ = writeln!(s, "KL      {:.3}", self.kl_mean);
        let _ = writeln!(s, "MSE     {:.3} ± {:.3}", self.mse.mean, self.mse.std);
        s
    }

    /// One JSON object per image, then a summary object.
    pub fn records_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{{\"index\":{},\"nll\":{:?},\"kl\":{:?},\"mse\":{:?}}}",
                r.index, r.nll, r.kl, r.mse
            );
        }
        let _ = writeln!(
            s,
            "{{\"summary\":true,\"images\":{},\"k\":{},\"nll_mean\":{:?},\"nll_std\":{:?},\"kl_mean\":{:?},\"mse_mean\":{:?},\"mse_std\":{:?}}}",
            self.records.len(),
            self.samples_k,
            self.nll.mean,
            self.nll.std,
            self.kl_mean,
            self.mse.mean,
            self.mse.std
        );
        s
    }
}

/// All metrics for every image; image `i` draws its latents from `image_rng(seed, i)`.
pub fn evaluate(model: &Model, params: &ParamStore, data: &Dataset, k: usize, seed: u64) -> Result<EvalReport> {
    let kls = kl_values(model, params, data)?;
    let mses = mse_values(model, params, data)?;
    let mut records = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let nll = iwae_nll_with_rng(model, params, &s.ycc, k, &mut image_rng(seed, i))?;
        records.push(ImageRecord { index: i, nll, kl: kls[i], mse: mses[i] });
    }
    EvalReport::from_records(k, records)
}

/// One draw of luma noise (unit range) from the decoded covariance.
pub fn sample_luma_noise(out: &DecoderOutput, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = out.mean_y.data.len();
    Ok(match &out.luma {
        LumaScale::Spherical(s) => (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
        LumaScale::Diagonal(s) => s.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect(),
        LumaScale::Structured(l) => l.sample(&vec![0.0; n], rng)?,
    })
}

/// Images for one panel set, all in `[0, 255]` pixel units (unclamped).
#[derive(Clone, Debug)]
pub struct Panels {
    pub input: Option<RgbImage>,
    pub mean: RgbImage,
    /// Luma noise rendered around mid-gray: `[-64, 64]` maps to `[0, 255]`.
    pub noise: Plane,
    pub mean_plus_noise: RgbImage,
    /// `x - mu` per RGB channel, only for reconstructions.
    pub residual: Option<RgbImage>,
}

fn to_rgb(ycc: &YccImage, color: ColorMode) -> Result<RgbImage> {
    match color {
        ColorMode::YCbCr => ycbcr_to_rgb(&upsample_chroma(ycc, ycc.factor)?),
        ColorMode::Gray => RgbImage::new(ycc.y.clone(), ycc.y.clone(), ycc.y.clone()),
    }
}

/// Mean, luma noise sample and their sum for one decoded latent; with an
/// input, also the input and the residual `x - mu`.
pub fn panels(model: &Model, out: &DecoderOutput, input: Option<&Sample>, rng: &mut impl Rng) -> Result<Panels> {
    let config = model.config();
    let mean_ycc = out.mean_image(config.chroma_factor)?;
    let mean = to_rgb(&mean_ycc, config.color)?;
    let eps: Vec<f64> = sample_luma_noise(out, rng)?.iter().map(|e| e * PIXEL_SCALE).collect();
    let noise = Plane::new(
        mean_ycc.y.height,
        mean_ycc.y.width,
        eps.iter().map(|e| 127.5 + e * 127.5 / NOISE_DISPLAY_RANGE).collect(),
    )?;
    let mut noisy = mean_ycc.clone();
    noisy.y.data.iter_mut().zip(&eps).for_each(|(y, e)| *y += e);
    let mean_plus_noise = to_rgb(&noisy, config.color)?;
    let (input_rgb, residual) = match input {
        Some(s) => {
            let x = match config.color {
                ColorMode::YCbCr => s.rgb.clone(),
                ColorMode::Gray => to_rgb(&s.ycc, ColorMode::Gray)?,
            };
            let diff = |a: &Plane, b: &Plane| Plane::new(a.height, a.width, a.data.iter().zip(&b.data).map(|(p, q)| p - q).collect());
            let residual = RgbImage {
                r: diff(&x.r, &mean.r)?,
                g: diff(&x.g, &mean.g)?,
                b: diff(&x.b, &mean.b)?,
            };
            (Some(x), Some(residual))
        }
        None => (None, None),
    };
    Ok(Panels { input: input_rgb, mean, noise, mean_plus_noise, residual })
}

/// Residuals are shifted by 128 for display.
fn write_panel(path: &Path, img: &RgbImage, color: ColorMode, offset: f64) -> Result<()> {
    let shifted;
    let img = if offset != 0.0 {
        let s = |p: &Plane| p.map(|v| v + offset);
        shifted = RgbImage { r: s(&img.r), g: s(&img.g), b: s(&img.b) };
        &shifted
    } else {
        img
    };
    match color {
        ColorMode::YCbCr => write_ppm(path, img),
        ColorMode::Gray => write_pgm(path, &img.r),
    }
}

/// Writes `{prefix}_input`, `_mean`, `_noise`, `_mean_noise` and `_residual`
/// images (`.ppm` in colour, `.pgm` in grayscale; the noise is always `.pgm`).
/// Values are clamped to `[0, 255]` on writing.
pub fn write_panels(dir: &Path, prefix: &str, panels: &Panels, color: ColorMode) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = match color {
        ColorMode::YCbCr => "ppm",
        ColorMode::Gray => "pgm",
    };
    let mut written = Vec::new();
    let mut put = |name: &str, img: &RgbImage, offset: f64| -> Result<()> {
        let path = dir.join(format!("{prefix}_{name}.{ext}"));
        write_panel(&path, img, color, offset)?;
        written.push(path);
        Ok(())
    };
    if let Some(x) = &panels.input {
        put("input", x, 0.0)?;
    }
    put("mean", &panels.mean, 0.0)?;
    put("mean_noise", &panels.mean_plus_noise, 0.0)?;
    if let Some(r) = &panels.residual {
        put("residual", r, 128.0)?;
    }
    let noise_path = dir.join(format!("{prefix}_noise.pgm"));
    write_pgm(&noise_path, &panels.noise)?;
    written.push(noise_path);
    Ok(written)
}

/// `emit_visuals`: reconstruction panels for each sample, named `recon_NNN_*`.
pub fn emit_visuals(model: &Model, params: &ParamStore, samples: &[Sample], seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let outs = reconstruct(model, params, samples)?;
    let mut files = Vec::new();
    for (i, (out, s)) in outs.iter().zip(samples).enumerate() {
        let p = panels(model, out, Some(s), &mut image_rng(seed, i))?;
        files.extend(write_panels(out_dir, &format!("recon_{i:03}"), &p, model.config().color)?);
    }
    Ok(files)
}

/// Decodes `n` prior draws and writes `sample_NNN_*` panels.
pub fn emit_samples(model: &Model, params: &ParamStore, n: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let d = model.config().latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let outs = model.decode_latents(params, &zs, model.config().likelihood)?;
    let mut files = Vec::new();
    for (i, out) in outs.iter().enumerate() {
        let p = panels(model, out, None, &mut image_rng(seed, i))?;
        files.extend(write_panels(out_dir, &format!("sample_{i:03}"), &p, model.config().color)?);
    }
    Ok(files)
}
