//! Run configuration: one TOML file drives data generation, training,
//! evaluation and the attack sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackFamily, AttackSpec, AttackTarget};
use crate::encoder::EncoderConfig;
use crate::episodes::{EpisodeRequest, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelVariant;
use crate::ode::{SolverConfig, SolverMethod};
use crate::perturb::NoiseConfig;

/// Gradient descent with momentum and optional step decay. Decay multiplies
/// the rate by `decay_factor` every `decay_every` steps; zero disables it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 1e-3, momentum: 0.9, decay_factor: 0.5, decay_every: 8000 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        Ok(())
    }
}

/// Episode shape and counts for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub train_episodes: usize,
    pub test_episodes: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { n_way: 1, k_shot: 1, n_query: 1, train_episodes: 20000, test_episodes: 200 }
    }
}

impl EpisodeConfig {
    pub fn request(&self) -> EpisodeRequest {
        EpisodeRequest { n_way: self.n_way, k_shot: self.k_shot, n_query: self.n_query }
    }

    pub fn validate(&self) -> Result<()> {
        self.request().validate()?;
        if self.n_query == 0 {
            return Err(Error::Config("training and evaluation need n_query >= 1".into()));
        }
        if self.test_episodes == 0 {
            return Err(Error::Config("test_episodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One attack in the evaluation sweep. Omitted fields take the family's
/// conventional values: fgsm is single-step at full epsilon, bim splits
/// epsilon across iterations, pgd steps at a quarter epsilon from a random
/// start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub target: AttackTarget,
    pub epsilon: f64,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: Option<bool>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl AttackConfig {
    pub fn to_spec(&self) -> Result<AttackSpec> {
        let mut spec = match self.family {
            AttackFamily::Fgsm => AttackSpec::fgsm(self.target, self.epsilon),
            AttackFamily::Bim => AttackSpec::bim(self.target, self.epsilon, self.iterations.unwrap_or(10)),
            AttackFamily::Pgd => {
                AttackSpec::pgd(self.target, self.epsilon, self.iterations.unwrap_or(10), self.seed.unwrap_or(0))
            }
        };
        if let Some(i) = self.iterations {
            spec.iterations = i;
            if self.family == AttackFamily::Bim && self.step_size.is_none() {
                spec.step_size = self.epsilon / i.max(1) as f64;
            }
        }
        if let Some(s) = self.step_size {
            spec.step_size = s;
        }
        if let Some(r) = self.random_start {
            spec.random_start = r;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Evaluation settings shared by every variant and run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Base seed for evaluation episodes; independent of the run seeds so all
    /// variants face the same test episodes.
    pub seed: u64,
    pub attacks: Vec<AttackConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 777,
            attacks: vec![
                AttackConfig {
                    family: AttackFamily::Fgsm,
                    target: AttackTarget::Query,
                    epsilon: 0.02,
                    iterations: None,
                    step_size: None,
                    random_start: None,
                    seed: None,
                },
                AttackConfig {
                    family: AttackFamily::Fgsm,
                    target: AttackTarget::Query,
                    epsilon: 0.04,
                    iterations: None,
                    step_size: None,
                    random_start: None,
                    seed: None,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: ModelVariant,
    /// Independent training runs; reported numbers average across them.
    pub seeds: Vec<u64>,
    pub temperature: f64,
    /// Feeds integration time to the dynamics as an extra input channel.
    pub time_conditioning: bool,
    /// Perturbation budget for the adversarially trained baseline.
    pub sat_epsilon: f64,
    /// Collapse the baseline's three sub-updates into one optimizer step.
    pub sat_joint_update: bool,
    pub encoder: EncoderConfig,
    pub solver: SolverConfig,
    pub noise: NoiseConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub episodes: EpisodeConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: ModelVariant::Rpnode,
            seeds: vec![17, 43],
            temperature: 20.0,
            time_conditioning: true,
            sat_epsilon: 0.025,
            sat_joint_update: false,
            encoder: EncoderConfig::default(),
            solver: SolverConfig::default(),
            noise: NoiseConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            episodes: EpisodeConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small preset that trains in minutes on a CPU while preserving every
    /// mechanism: 32x32 images, a narrow encoder, a short ODE grid and a
    /// thousand episodes. The loss weights and noise level are retuned for
    /// this scale (`configs/benchmark.toml` mirrors the preset); the
    /// full-scale defaults in `RunConfig::default` are too weak for the
    /// regularizers to matter over so few episodes.
    pub fn benchmark() -> Self {
        RunConfig {
            encoder: EncoderConfig {
                stage_channels: vec![8, 16, 16],
                downsample_factor: 4,
                weight_init: "he_normal".into(),
            },
            solver: SolverConfig { method: SolverMethod::Rk4Fixed, steps: 4, ..SolverConfig::default() },
            noise: NoiseConfig { sigma: 0.08, ..NoiseConfig::default() },
            weights: LossWeights { alpha: 0.35, beta: 0.05 },
            optimizer: OptimizerConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                decay_factor: 0.5,
                decay_every: 500,
            },
            episodes: EpisodeConfig {
                n_way: 1,
                k_shot: 1,
                n_query: 1,
                train_episodes: 1000,
                test_episodes: 200,
            },
            synth: SynthConfig {
                image_size: [32, 32],
                organ_contrast: 0.18,
                texture_noise: 0.03,
                distractors: 3,
                ..SynthConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one run seed is required".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.sat_epsilon.is_finite() && self.sat_epsilon >= 0.0) {
            return Err(Error::Config(format!("sat_epsilon must be non-negative, got {}", self.sat_epsilon)));
        }
        self.encoder.validate()?;
        self.solver.validate()?;
        self.noise.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.episodes.validate()?;
        self.synth.validate()?;
        let [h, w] = self.synth.image_size;
        let f = self.encoder.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "synthetic image size {h}x{w} is not divisible by the encoder downsample factor {f}"
            )));
        }
        for a in &self.eval.attacks {
            a.to_spec()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
