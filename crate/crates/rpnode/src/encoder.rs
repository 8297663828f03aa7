//! Grayscale CNN encoder: a stack of 3x3 conv + ReLU stages with 2x2 max
//! pooling between them. Spatial size shrinks by `downsample_factor`, the
//! channel count follows `stage_channels`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvLayer, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, role};

/// Feature maps are plain `[channels, h, w]` tensors.
pub type FeatureMap = Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub downsample_factor: usize,
    pub weight_init: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: vec![16, 32, 64],
            downsample_factor: 4,
            weight_init: "he_normal".into(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("encoder.stage_channels must not be empty".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("encoder.stage_channels entries must be positive".into()));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "encoder.downsample_factor must be a power of two, got {}",
                self.downsample_factor
            )));
        }
        // One 2x pooling between consecutive stages fixes the total factor.
        let implied = 1usize << (self.stage_channels.len() - 1);
        if self.downsample_factor != implied {
            return Err(Error::Config(format!(
                "encoder.downsample_factor {} is inconsistent with {} stages (expected {})",
                self.downsample_factor,
                self.stage_channels.len(),
                implied
            )));
        }
        if self.weight_init != "he_normal" {
            return Err(Error::Config(format!("unknown encoder.weight_init scheme '{}'", self.weight_init)));
        }
        Ok(())
    }

    /// Channel count of the final feature map.
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }
}

/// A grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "image data".into(),
                expected: vec![height, width],
                got: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Config("image values must be finite and within [0, 1]".into()));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Single-channel input tensor `[1, h, w]` for the encoder.
    pub fn to_input(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.data.clone())
    }

    /// Rebuilds an image from a `[1, h, w]` tensor that is already known to be
    /// clipped to `[0, 1]` (attack and noise outputs).
    pub fn from_input(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::ShapeMismatch {
                context: "image tensor".into(),
                expected: vec![1],
                got: s.to_vec(),
            });
        }
        ImageTensor::new(s[1], s[2], t.data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stages: Vec<ConvLayer>,
}

impl EncoderParams {
    pub fn attach(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            stages: self.stages.iter().map(|l| l.attach(tape)).collect(),
        }
    }
}

/// Tape-attached encoder parameters.
pub struct EncoderVars {
    pub stages: Vec<(Var, Var)>,
}

/// Seeded parameter initialization for the configured architecture.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut stages = Vec::with_capacity(cfg.stage_channels.len());
    let mut in_ch = 1;
    for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
        stages.push(ConvLayer::he_init(out_ch, in_ch, 3, derive_seed(seed, &[role::INIT_ENCODER, i as u64])));
        in_ch = out_ch;
    }
    Ok(EncoderParams { stages })
}

/// Runs the encoder on an already-registered `[1, h, w]` input var. The caller
/// is responsible for divisibility of h and w by the downsample factor (the
/// pooling op enforces evenness as a backstop).
pub fn encode_on_tape(tape: &mut Tape, vars: &EncoderVars, image: Var) -> Var {
    let last = vars.stages.len() - 1;
    let mut x = image;
    for (i, &(k, b)) in vars.stages.iter().enumerate() {
        x = tape.conv2d(x, k, b);
        x = tape.relu(x);
        if i != last {
            x = tape.max_pool2(x);
        }
    }
    x
}

/// Value-level convenience: validates the input size and returns the feature
/// map `[d, h/f, w/f]`.
pub fn encode(image: &ImageTensor, cfg: &EncoderConfig, params: &EncoderParams) -> Result<FeatureMap> {
    cfg.validate()?;
    let f = cfg.downsample_factor;
    if image.height() % f != 0 || image.width() % f != 0 {
        return Err(Error::Config(format!(
            "image size {}x{} is not divisible by downsample factor {}",
            image.height(),
            image.width(),
            f
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(image.to_input());
    let vars = params.attach(&mut tape);
    let out = encode_on_tape(&mut tape, &vars, leaf);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            stage_channels: vec![4, 8, 8],
            downsample_factor: 4,
            weight_init: "he_normal".into(),
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = crate::rng::chacha(seed);
        ImageTensor::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape_follows_config() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let z = encode(&random_image(32, 24, 2), &cfg, &params).unwrap();
        assert_eq!(z.shape(), &[8, 8, 6]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let err = encode(&random_image(30, 32, 2), &cfg, &params).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn config_validation_catches_factor_stage_mismatch() {
        let cfg = EncoderConfig {
            stage_channels: vec![4, 8],
            downsample_factor: 4,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            stage_channels: vec![4, 8],
            downsample_factor: 3,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            weight_init: "uniform".into(),
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("weight_init"));
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let cfg = small_cfg();
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 6).unwrap();
        assert_ne!(a, c, "different seeds must change at least one parameter");
    }

    #[test]
    fn zero_image_encodes_to_zero_features() {
        // Biases start at zero, so conv/ReLU/pool all preserve exact zeros.
        let cfg = small_cfg();
        let params = init_params(&cfg, 7).unwrap();
        let img = ImageTensor::new(16, 16, vec![0.0; 256]).unwrap();
        let z = encode(&img, &cfg, &params).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interior_features_shift_with_the_input() {
        // Two crops of one wide image, offset by two feature cells. Interior
        // cells whose receptive fields avoid the padding must match exactly.
        let cfg = small_cfg();
        let params = init_params(&cfg, 8).unwrap();
        let f = cfg.downsample_factor;
        let wide = random_image(48, 64, 9);
        let crop = |x0: usize| {
            let mut data = Vec::with_capacity(48 * 48);
            for y in 0..48 {
                data.extend_from_slice(&wide.data()[y * 64 + x0..y * 64 + x0 + 48]);
            }
            ImageTensor::new(48, 48, data).unwrap()
        };
        let za = encode(&crop(0), &cfg, &params).unwrap();
        let zb = encode(&crop(2 * f), &cfg, &params).unwrap();
        let (d, fh, fw) = (za.shape()[0], za.shape()[1], za.shape()[2]);
        // Receptive field of the 3-stage net is 18 px, under 3 feature cells.
        let margin = 3;
        let mut compared = 0;
        for c in 0..d {
            for y in 0..fh {
                for x in margin + 2..fw - margin {
                    let a = za.data()[c * fh * fw + y * fw + x];
                    let b = zb.data()[c * fh * fw + y * fw + (x - 2)];
                    assert_eq!(a, b, "feature cell ({c},{y},{x}) not covariant");
                    compared += 1;
                }
            }
        }
        assert!(compared > 100, "too few interior cells compared: {compared}");
    }

    #[test]
    fn feature_magnitudes_stay_bounded_on_unit_images() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 10).unwrap();
        let z = encode(&random_image(32, 32, 11), &cfg, &params).unwrap();
        let m = z.linf_norm();
        assert!(m < 100.0, "feature magnitude {m} exceeds the pinned bound");
        assert!(m > 1e-6, "features collapsed to zero");
    }

    #[test]
    fn image_constructor_rejects_out_of_range_values() {
        assert!(ImageTensor::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(ImageTensor::new(2, 2, vec![0.0; 3]).is_err());
    }
}
