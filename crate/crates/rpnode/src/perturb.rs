//! Gaussian companion images. During training every support and query image
//! gets a perturbed twin; the twins feed the cluster and consistency losses
//! while prototypes always come from the clean images.

use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::chacha;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `x * (1 + m)` with `m ~ N(0, sigma^2)` per pixel.
    Multiplicative,
    /// `x + m`; ablation mode.
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub sigma: f64,
    pub seed: u64,
    /// Companions drawn per image each step. More than one is an ablation.
    pub companions: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mode: NoiseMode::Multiplicative,
            sigma: 0.1,
            seed: 0,
            companions: 1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("noise.sigma must be positive, got {}", self.sigma)));
        }
        if self.companions == 0 {
            return Err(Error::Config("noise.companions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws the Gaussian companion of an image. Output pixels are clipped to
/// `[0, 1]`; the draw is fully determined by `cfg.seed`.
pub fn gaussian_companion(image: &ImageTensor, cfg: &NoiseConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let mut rng = chacha(cfg.seed);
    let normal = Normal::new(0.0, cfg.sigma).expect("sigma validated positive");
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&x| {
            let m = normal.sample(&mut rng);
            let v = match cfg.mode {
                NoiseMode::Multiplicative => x * (1.0 + m),
                NoiseMode::Additive => x + m,
            };
            let v = v.clamp(0.0, 1.0);
            // Normalize a possible negative zero from x * (1 + m).
            if v == 0.0 {
                0.0
            } else {
                v
            }
        })
        .collect();
    ImageTensor::new(image.height(), image.width(), data)
}
