use std::fmt;
use std::str::FromStr;

use crate::color::chroma_factor_for;
use crate::error::{Error, Result};

/// Output distribution over the luma plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Likelihood {
    /// One learned variance for the whole plane.
    Spherical,
    /// Per-pixel variance predicted from `z`.
    Diagonal,
    /// Sparse-Cholesky precision predicted from `z`.
    Structured,
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Likelihood::Spherical => "spherical",
            Likelihood::Diagonal => "diagonal",
            Likelihood::Structured => "structured",
        })
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spherical" => Ok(Likelihood::Spherical),
            "diagonal" => Ok(Likelihood::Diagonal),
            "structured" => Ok(Likelihood::Structured),
            other => Err(Error::config(format!("unknown likelihood {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMode {
    Gray,
    YCbCr,
}

impl fmt::Display for ColorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorMode::Gray => "gray",
            ColorMode::YCbCr => "ycbcr",
        })
    }
}

impl FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(ColorMode::Gray),
            "ycbcr" => Ok(ColorMode::YCbCr),
            other => Err(Error::config(format!("unknown color mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side length in pixels.
    pub image_size: usize,
    pub color: ColorMode,
    /// Chroma planes are `image_size / chroma_factor` on a side.
    pub chroma_factor: usize,
    pub latent_dim: usize,
    /// Channels of the first encoder layer; doubles per level.
    pub width: usize,
    /// Number of stride-2 stages in the encoder (and decoder).
    pub levels: usize,
    /// Width of the hidden dense layer on both sides of the latent.
    pub hidden: usize,
    pub patch_size: usize,
    pub dilation: usize,
    /// Basis size for the covariance weights; 0 predicts `L` directly.
    pub num_basis: usize,
    pub likelihood: Likelihood,
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            color: ColorMode::YCbCr,
            chroma_factor: chroma_factor_for(64),
            latent_dim: 64,
            width: 32,
            levels: 4,
            hidden: 512,
            patch_size: 3,
            dilation: 1,
            num_basis: 0,
            likelihood: Likelihood::Structured,
            beta: 1.0,
            alpha: 10.0,
            gamma: 0.001,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.image_size == 0 || self.image_size % (1 << self.levels) != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of 2^levels = {}",
                self.image_size,
                1usize << self.levels
            ));
        }
        if self.latent_dim == 0 || self.width == 0 || self.hidden == 0 {
            return fail("latent_dim, width and hidden must be positive".into());
        }
        if self.color == ColorMode::YCbCr {
            let f = self.chroma_factor;
            if f == 0 || !f.is_power_of_two() || f > (1 << self.levels) || self.image_size % f != 0 {
                return fail(format!(
                    "chroma_factor {f} must be a power of two dividing the image and at most 2^levels"
                ));
            }
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return fail(format!("patch_size {} must be odd", self.patch_size));
        }
        if self.likelihood == Likelihood::Structured && self.patch_size < 3 {
            return fail("structured likelihood needs patch_size >= 3".into());
        }
        if self.dilation == 0 {
            return fail("dilation must be >= 1".into());
        }
        if !(self.beta > 0.0) || !(self.alpha >= 0.0) || !(self.gamma >= 0.0) {
            return fail(format!(
                "need beta > 0, alpha >= 0, gamma >= 0 (got {}, {}, {})",
                self.beta, self.alpha, self.gamma
            ));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn chroma_size(&self) -> usize {
        self.image_size / self.chroma_factor
    }

    /// Dimensions modelled per image: luma plus (in colour mode) both chroma planes.
    pub fn data_dims(&self) -> usize {
        match self.color {
            ColorMode::Gray => self.num_pixels(),
            ColorMode::YCbCr => self.num_pixels() + 2 * self.chroma_size() * self.chroma_size(),
        }
    }

    /// `(n_f^2 - 1)/2 + 1`
    pub fn num_slots(&self) -> usize {
        (self.patch_size * self.patch_size - 1) / 2 + 1
    }

    pub fn uses_basis(&self) -> bool {
        self.likelihood == Likelihood::Structured && self.num_basis > 0
    }

    /// Channels produced by the covariance branch, 0 when it is absent.
    pub fn covariance_outputs(&self) -> usize {
        match self.likelihood {
            Likelihood::Spherical => 0,
            Likelihood::Diagonal => 1,
            Likelihood::Structured if self.num_basis > 0 => self.num_basis,
            Likelihood::Structured => self.num_slots(),
        }
    }

    /// Flat `key = value` pairs covering every field.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("color", self.color.to_string()),
            ("chroma_factor", self.chroma_factor.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("width", self.width.to_string()),
            ("levels", self.levels.to_string()),
            ("hidden", self.hidden.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("dilation", self.dilation.to_string()),
            ("num_basis", self.num_basis.to_string()),
            ("likelihood", self.likelihood.to_string()),
            ("beta", format!("{:?}", self.beta)),
            ("alpha", format!("{:?}", self.alpha)),
            ("gamma", format!("{:?}", self.gamma)),
        ]
    }

    /// Applies one `key = value` pair; returns `false` for keys this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "color" => self.color = value.parse()?,
            "chroma_factor" => self.chroma_factor = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "dilation" => self.dilation = parse(key, value)?,
            "num_basis" => self.num_basis = parse(key, value)?,
            "likelihood" => self.likelihood = value.parse()?,
            "beta" => self.beta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.chroma_size(), 16);
        assert_eq!(c.num_slots(), 5);
        assert_eq!(c.data_dims(), 64 * 64 + 2 * 16 * 16);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = [
            ModelConfig { patch_size: 1, ..Default::default() },
            ModelConfig { beta: 0.0, ..Default::default() },
            ModelConfig { gamma: -1.0, ..Default::default() },
            ModelConfig { image_size: 40, ..Default::default() },
            ModelConfig { chroma_factor: 3, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        // diagonal mode does not need a neighbourhood
        ModelConfig { patch_size: 1, likelihood: Likelihood::Diagonal, ..Default::default() }
            .validate()
            .unwrap();
    }

    #[test]
    fn pairs_round_trip() {
        let c = ModelConfig {
            beta: 5.0,
            alpha: 0.1,
            likelihood: Likelihood::Diagonal,
            color: ColorMode::Gray,
            ..Default::default()
        };
        let mut back = ModelConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.set("nonsense", "1").unwrap());
    }
}
