//! Gradient-sign attacks on episode images.
//!
//! All three families ascend the sign of the query cross-entropy gradient,
//! differing only in step schedule and random start. The target side is
//! either the query images (gradient of the query loss with respect to each
//! query) or the support images (gradient of the same query loss with
//! respect to the support, through the prototypes). One attack never touches
//! both sides. Every output pixel stays inside the L-infinity ball of radius
//! epsilon around the clean pixel, measured in f64, and inside `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{episode_graph, FssModel};
use crate::rng::{chacha, derive_seed, role};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackFamily {
    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Bim => "bim",
            AttackFamily::Pgd => "pgd",
        }
    }
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "bim" => Ok(AttackFamily::Bim),
            "pgd" => Ok(AttackFamily::Pgd),
            _ => Err(Error::Config(format!("unknown attack family '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    Query,
    Support,
}

impl AttackTarget {
    pub fn name(self) -> &'static str {
        match self {
            AttackTarget::Query => "query",
            AttackTarget::Support => "support",
        }
    }
}

impl std::fmt::Display for AttackTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(AttackTarget::Query),
            "support" => Ok(AttackTarget::Support),
            _ => Err(Error::Config(format!("unknown attack target '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub target: AttackTarget,
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub random_start: bool,
    /// Base seed for the random start; ignored when `random_start` is false.
    pub seed: u64,
}

impl AttackSpec {
    /// Single full-epsilon step, no random start.
    pub fn fgsm(target: AttackTarget, epsilon: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            target,
            epsilon,
            iterations: 1,
            step_size: epsilon,
            random_start: false,
            seed: 0,
        }
    }

    /// Iterated steps of `epsilon / iterations`, starting from the clean image.
    pub fn bim(target: AttackTarget, epsilon: f64, iterations: usize) -> Self {
        AttackSpec {
            family: AttackFamily::Bim,
            target,
            epsilon,
            iterations,
            step_size: epsilon / iterations.max(1) as f64,
            random_start: false,
            seed: 0,
        }
    }

    /// Iterated quarter-epsilon steps from a seeded uniform start in the ball.
    pub fn pgd(target: AttackTarget, epsilon: f64, iterations: usize, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            target,
            epsilon,
            iterations,
            step_size: epsilon / 4.0,
            random_start: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("attack epsilon must be positive, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("attack needs at least one iteration".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!("attack step size must be positive, got {}", self.step_size)));
        }
        if self.family == AttackFamily::Fgsm && self.iterations != 1 {
            return Err(Error::Config("fgsm is single-step; use bim or pgd for iterated attacks".into()));
        }
        Ok(())
    }

    /// Seed variant for one evaluation episode, so random starts differ per
    /// episode but stay reproducible.
    pub fn for_episode(&self, episode_seed: u64) -> AttackSpec {
        AttackSpec { seed: derive_seed(self.seed, &[role::ATTACK, episode_seed]), ..*self }
    }
}

/// Attacked episode plus diagnostics.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub episode: Episode,
    /// True when some iteration saw an exactly zero gradient on every
    /// targeted pixel; those iterations leave the images unchanged.
    pub zero_gradient: bool,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One representable value closer to `target`.
fn toward(v: f64, target: f64) -> f64 {
    if v == target {
        return v;
    }
    let up = v < target;
    if v == 0.0 {
        return if up { f64::from_bits(1) } else { -f64::from_bits(1) };
    }
    let bits = v.to_bits();
    let next = if (v > 0.0) == up { bits + 1 } else { bits - 1 };
    f64::from_bits(next)
}

/// Projects onto the intersection of the epsilon ball around `x0` and
/// `[0, 1]`. The ball bound holds exactly under f64 comparison: if rounding
/// in `x0 +/- epsilon` lands a hair outside, the value walks back in.
fn project(x: f64, x0: f64, epsilon: f64) -> f64 {
    let mut v = x.clamp(x0 - epsilon, x0 + epsilon).clamp(0.0, 1.0);
    while (v - x0).abs() > epsilon {
        v = toward(v, x0);
    }
    if v == 0.0 {
        v = 0.0;
    }
    v
}

fn with_images(episode: &Episode, target: AttackTarget, images: &[ImageTensor]) -> Episode {
    let mut out = episode.clone();
    let side = match target {
        AttackTarget::Query => &mut out.query,
        AttackTarget::Support => &mut out.support,
    };
    assert_eq!(side.len(), images.len());
    for (slot, img) in side.iter_mut().zip(images) {
        slot.0 = img.clone();
    }
    out
}

/// Runs the attack described by `spec` against one episode.
pub fn attack_episode(model: &FssModel, episode: &Episode, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    let originals: Vec<ImageTensor> = match spec.target {
        AttackTarget::Query => episode.query.iter().map(|(i, _)| i.clone()).collect(),
        AttackTarget::Support => episode.support.iter().map(|(i, _)| i.clone()).collect(),
    };
    let mut current: Vec<Vec<f64>> = originals.iter().map(|i| i.data().to_vec()).collect();

    if spec.random_start {
        let mut rng = chacha(derive_seed(spec.seed, &[role::PGD_START]));
        for (img, orig) in current.iter_mut().zip(&originals) {
            for (v, &x0) in img.iter_mut().zip(orig.data()) {
                let offset = rng.gen_range(-spec.epsilon..=spec.epsilon);
                *v = project(x0 + offset, x0, spec.epsilon);
            }
        }
    }

    let mut zero_gradient = false;
    for _ in 0..spec.iterations {
        let staged: Vec<ImageTensor> = current
            .iter()
            .zip(&originals)
            .map(|(d, o)| ImageTensor::new(o.height(), o.width(), d.clone()))
            .collect::<Result<_>>()?;
        let ep = with_images(episode, spec.target, &staged);
        let graph = episode_graph(model, &ep)?;
        let grads = graph.tape.backward(graph.query_ce);
        let leaves: Vec<_> = match spec.target {
            AttackTarget::Query => graph.queries.iter().map(|q| q.leaf).collect(),
            AttackTarget::Support => graph.support_leaves.clone(),
        };

        let mut any_nonzero = false;
        for (i, leaf) in leaves.iter().enumerate() {
            if let Some(g) = grads.get(*leaf) {
                for ((v, &gv), &x0) in current[i].iter_mut().zip(g.data()).zip(originals[i].data()) {
                    if gv != 0.0 {
                        any_nonzero = true;
                    }
                    *v = project(*v + spec.step_size * sign(gv), x0, spec.epsilon);
                }
            }
        }
        if !any_nonzero {
            zero_gradient = true;
            log::warn!(
                "{} {} attack saw an all-zero gradient; images left unchanged this iteration",
                spec.family,
                spec.target
            );
        }
    }

    let attacked: Vec<ImageTensor> = current
        .iter()
        .zip(&originals)
        .map(|(d, o)| ImageTensor::new(o.height(), o.width(), d.clone()))
        .collect::<Result<_>>()?;
    Ok(AttackOutcome { episode: with_images(episode, spec.target, &attacked), zero_gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::episodes::{generate_synthetic, sample_episode, EpisodeRequest, SynthConfig};
    use crate::model::{forward_episode, ModelVariant};
    use crate::ode::SolverConfig;

    fn model(seed: u64) -> FssModel {
        let encoder_cfg = EncoderConfig {
            stage_channels: vec![4, 8],
            downsample_factor: 2,
            weight_init: "he_normal".into(),
        };
        let solver = SolverConfig { steps: 2, ..SolverConfig::default() };
        FssModel::new(ModelVariant::Rpnode, &encoder_cfg, &solver, true, 20.0, seed).unwrap()
    }

    fn episode(seed: u64) -> Episode {
        let ds = generate_synthetic(&SynthConfig {
            image_size: [16, 16],
            train_subjects: 3,
            val_subjects: 0,
            test_subjects: 1,
            slices_per_subject: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        sample_episode(&ds.train, EpisodeRequest { n_way: 1, k_shot: 1, n_query: 1 }, None, seed).unwrap()
    }

    fn linf(a: &ImageTensor, b: &ImageTensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn assert_in_ball(adv: &Episode, clean: &Episode, target: AttackTarget, eps: f64) {
        let (a, c) = match target {
            AttackTarget::Query => (&adv.query, &clean.query),
            AttackTarget::Support => (&adv.support, &clean.support),
        };
        for ((ai, _), (ci, _)) in a.iter().zip(c) {
            for (x, x0) in ai.data().iter().zip(ci.data()) {
                assert!((x - x0).abs() <= eps, "|{x} - {x0}| = {} > {eps}", (x - x0).abs());
                assert!((0.0..=1.0).contains(x));
            }
        }
    }

    #[test]
    fn fgsm_stays_in_the_ball_and_actually_moves() {
        let m = model(1);
        let ep = episode(2);
        let eps = 0.05;
        let out = attack_episode(&m, &ep, &AttackSpec::fgsm(AttackTarget::Query, eps)).unwrap();
        assert!(!out.zero_gradient);
        assert_in_ball(&out.episode, &ep, AttackTarget::Query, eps);
        assert!(linf(&out.episode.query[0].0, &ep.query[0].0) > eps * 0.5);
        // The support side is untouched.
        assert_eq!(out.episode.support, ep.support);
    }

    #[test]
    fn support_attack_touches_only_the_support() {
        let m = model(3);
        let ep = episode(4);
        let eps = 0.04;
        let out = attack_episode(&m, &ep, &AttackSpec::fgsm(AttackTarget::Support, eps)).unwrap();
        assert!(!out.zero_gradient);
        assert_in_ball(&out.episode, &ep, AttackTarget::Support, eps);
        assert!(linf(&out.episode.support[0].0, &ep.support[0].0) > 0.0);
        assert_eq!(out.episode.query, ep.query);
    }

    #[test]
    fn single_step_pgd_without_random_start_is_fgsm() {
        let m = model(5);
        let ep = episode(6);
        let eps = 0.03;
        let fgsm = attack_episode(&m, &ep, &AttackSpec::fgsm(AttackTarget::Query, eps)).unwrap();
        let pgd_spec = AttackSpec {
            family: AttackFamily::Pgd,
            target: AttackTarget::Query,
            epsilon: eps,
            iterations: 1,
            step_size: eps,
            random_start: false,
            seed: 0,
        };
        let pgd = attack_episode(&m, &ep, &pgd_spec).unwrap();
        assert_eq!(fgsm.episode.query[0].0.data(), pgd.episode.query[0].0.data());
    }

    #[test]
    fn iterated_attacks_respect_the_ball() {
        let m = model(7);
        let ep = episode(8);
        for spec in [
            AttackSpec::bim(AttackTarget::Query, 0.04, 4),
            AttackSpec::pgd(AttackTarget::Query, 0.04, 5, 11),
            AttackSpec::pgd(AttackTarget::Support, 0.02, 3, 12),
        ] {
            let out = attack_episode(&m, &ep, &spec).unwrap();
            assert_in_ball(&out.episode, &ep, spec.target, spec.epsilon);
        }
    }

    #[test]
    fn bim_constructor_divides_epsilon_across_iterations() {
        let spec = AttackSpec::bim(AttackTarget::Query, 0.04, 8);
        assert!((spec.step_size - 0.005).abs() < 1e-15);
        assert!(!spec.random_start);
        let pgd = AttackSpec::pgd(AttackTarget::Query, 0.04, 8, 0);
        assert!((pgd.step_size - 0.01).abs() < 1e-15);
        assert!(pgd.random_start);
    }

    #[test]
    fn pgd_random_start_is_seed_deterministic() {
        let m = model(9);
        let ep = episode(10);
        let a = attack_episode(&m, &ep, &AttackSpec::pgd(AttackTarget::Query, 0.03, 2, 21)).unwrap();
        let b = attack_episode(&m, &ep, &AttackSpec::pgd(AttackTarget::Query, 0.03, 2, 21)).unwrap();
        let c = attack_episode(&m, &ep, &AttackSpec::pgd(AttackTarget::Query, 0.03, 2, 22)).unwrap();
        assert_eq!(a.episode.query[0].0.data(), b.episode.query[0].0.data());
        assert_ne!(a.episode.query[0].0.data(), c.episode.query[0].0.data());
    }

    #[test]
    fn zero_gradient_flags_and_leaves_images_unchanged() {
        // Zeroed encoder parameters make every feature map zero, so the
        // prediction is uniform and independent of the images.
        let mut m = model(13);
        for (_, t) in m.named_params_mut() {
            t.data_mut().fill(0.0);
        }
        let ep = episode(14);
        let out = attack_episode(&m, &ep, &AttackSpec::fgsm(AttackTarget::Query, 0.05)).unwrap();
        assert!(out.zero_gradient);
        assert_eq!(out.episode.query[0].0.data(), ep.query[0].0.data());
    }

    #[test]
    fn attack_raises_the_query_loss() {
        let m = model(15);
        let ep = episode(16);
        let clean = forward_episode(&m, &ep).unwrap().query_ce;
        let out = attack_episode(&m, &ep, &AttackSpec::fgsm(AttackTarget::Query, 0.05)).unwrap();
        let attacked = forward_episode(&m, &out.episode).unwrap().query_ce;
        assert!(
            attacked > clean,
            "fgsm should not lower the query loss: clean {clean}, attacked {attacked}"
        );
    }

    #[test]
    fn projection_is_exact_even_at_awkward_magnitudes() {
        for &(x0, eps) in &[(0.1, 1e-3), (0.3000000000000004, 2.5e-9), (0.999, 0.02), (0.0, 0.07)] {
            for k in -40i32..=40 {
                let x = x0 + f64::from(k) * eps * 0.07;
                let v = project(x, x0, eps);
                assert!((v - x0).abs() <= eps);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.0), 1.0);
        assert_eq!(sign(-2.0), -1.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(AttackSpec::fgsm(AttackTarget::Query, 0.0).validate().is_err());
        assert!(AttackSpec::fgsm(AttackTarget::Query, -0.1).validate().is_err());
        assert!(AttackSpec { iterations: 0, ..AttackSpec::bim(AttackTarget::Query, 0.1, 1) }.validate().is_err());
        assert!(AttackSpec { iterations: 3, ..AttackSpec::fgsm(AttackTarget::Query, 0.1) }.validate().is_err());
    }
}
