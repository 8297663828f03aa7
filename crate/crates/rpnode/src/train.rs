//! Episodic training, evaluation, and the experiment driver.
//!
//! A training step builds one episode graph, adds the Gaussian-companion
//! branches when the variant asks for them, backpropagates the combined loss
//! and applies one SGD update. The adversarially trained baseline instead
//! runs three sub-steps per episode, regenerating its attacks from the
//! current parameters. Everything is keyed off derived seeds, so a rerun of
//! the same configuration reproduces every byte of output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attacks::{attack_episode, AttackSpec, AttackTarget};
use crate::autodiff::{Tensor, Var};
use crate::config::{OptimizerConfig, RunConfig};
use crate::episodes::{sample_episode, Dataset, Episode, EpisodeRequest, Subject};
use crate::error::{Error, Result};
use crate::losses::{cluster_loss_on_tape, total_loss_on_tape, LossWeights};
use crate::metrics::{dice, dice_stats, write_csv, DiceStats, MetricsRow};
use crate::model::{add_query_branch, episode_graph, forward_episode, EpisodeGraph, FssModel, ModelVariant};
use crate::perturb::{gaussian_companion, NoiseConfig};
use crate::rng::{derive_seed, role};

/// Gradient descent with momentum and optional step decay.
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: BTreeMap<String, Tensor>,
    steps_taken: usize,
}

impl Sgd {
    pub fn new(cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd { cfg: *cfg, velocity: BTreeMap::new(), steps_taken: 0 })
    }

    /// Rate after the decay schedule, before the next update.
    pub fn current_rate(&self) -> f64 {
        if self.cfg.decay_every == 0 {
            return self.cfg.learning_rate;
        }
        let drops = (self.steps_taken / self.cfg.decay_every) as i32;
        self.cfg.learning_rate * self.cfg.decay_factor.powi(drops)
    }

    /// One heavy-ball update: `v = momentum v + g`, `p -= rate v`. Parameters
    /// without a gradient still decay their velocity.
    pub fn apply(&mut self, model: &mut FssModel, grads: &BTreeMap<String, Tensor>) {
        let rate = self.current_rate();
        for (name, param) in model.named_params_mut() {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            v.scale_assign(self.cfg.momentum);
            if let Some(g) = grads.get(&name) {
                v.add_scaled_assign(g, 1.0);
            }
            param.add_scaled_assign(v, -rate);
        }
        self.steps_taken += 1;
    }
}

/// Loss values observed in one training step. Variants without companion
/// branches report zero for the auxiliary terms.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub cross_entropy: f64,
    pub consistency: f64,
    pub cluster: f64,
    pub total: f64,
}

fn grads_by_name(graph: EpisodeGraph<'_>, root: Var, step: usize, episode_seed: u64) -> Result<BTreeMap<String, Tensor>> {
    let total = graph.tape.value(root).item();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { step, episode_seed, detail: format!("loss = {total}") });
    }
    let names = graph.attached.names.clone();
    let mut grads = graph.tape.backward(root);
    let mut out = BTreeMap::new();
    for (name, var) in names {
        if let Some(t) = grads.take(var) {
            out.insert(name, t);
        }
    }
    Ok(out)
}

/// One episodic update: clean episode graph, companion branches when the
/// variant uses them, a single optimizer step on the combined loss.
pub fn train_step(
    model: &mut FssModel,
    episode: &Episode,
    weights: &LossWeights,
    noise: &NoiseConfig,
    opt: &mut Sgd,
    run_seed: u64,
    step: usize,
) -> Result<StepReport> {
    let use_companions = model.variant.uses_companions();
    let (report, grads) = {
        let mut graph = episode_graph(&*model, episode)?;
        let (root, con, cl) = if use_companions {
            // Cluster pairs: each clean support feature map against each of
            // its companions, averaged over every pair.
            let mut anchors = Vec::new();
            let mut companions = Vec::new();
            for (k, (img, _)) in episode.support.iter().enumerate() {
                for c in 0..noise.companions {
                    let cfg = NoiseConfig {
                        seed: derive_seed(run_seed, &[role::NOISE_SUPPORT, noise.seed, step as u64, k as u64, c as u64]),
                        ..*noise
                    };
                    let comp = gaussian_companion(img, &cfg)?;
                    let (_, z) = graph.attached.image_features(&mut graph.tape, &comp)?;
                    anchors.push(graph.support_features[k]);
                    companions.push(z);
                }
            }
            let cl = cluster_loss_on_tape(&mut graph.tape, &anchors, &companions)?;

            // Consistency: companion queries predicted against the clean
            // ground truth, averaged over every branch.
            let mut acc: Option<Var> = None;
            let mut branches = 0usize;
            for (q, (img, gt)) in episode.query.iter().enumerate() {
                for c in 0..noise.companions {
                    let cfg = NoiseConfig {
                        seed: derive_seed(run_seed, &[role::NOISE_QUERY, noise.seed, step as u64, q as u64, c as u64]),
                        ..*noise
                    };
                    let comp = gaussian_companion(img, &cfg)?;
                    let b = add_query_branch(&mut graph.tape, &graph.attached, graph.protos, &graph.class_ids, &comp, gt)?;
                    acc = Some(match acc {
                        Some(a) => graph.tape.add(a, b.ce),
                        None => b.ce,
                    });
                    branches += 1;
                }
            }
            let con = graph.tape.div_scalar(acc.expect("episode has queries"), branches as f64);
            let root = total_loss_on_tape(&mut graph.tape, graph.query_ce, con, cl, weights);
            (root, Some(con), Some(cl))
        } else {
            (graph.query_ce, None, None)
        };
        let report = StepReport {
            cross_entropy: graph.tape.value(graph.query_ce).item(),
            consistency: con.map_or(0.0, |v| graph.tape.value(v).item()),
            cluster: cl.map_or(0.0, |v| graph.tape.value(v).item()),
            total: graph.tape.value(root).item(),
        };
        (report, grads_by_name(graph, root, step, episode.seed)?)
    };
    opt.apply(model, &grads);
    Ok(report)
}

/// Losses seen by the three sub-steps of one adversarial-training episode.
#[derive(Clone, Copy, Debug)]
pub struct SatStepReport {
    pub clean: f64,
    pub support_adversarial: f64,
    pub query_adversarial: f64,
}

fn ce_grads(model: &FssModel, episode: &Episode, step: usize) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let graph = episode_graph(model, episode)?;
    let ce = graph.tape.value(graph.query_ce).item();
    let root = graph.query_ce;
    Ok((ce, grads_by_name(graph, root, step, episode.seed)?))
}

/// Standard adversarial training: a clean update, then updates on
/// support-attacked and query-attacked copies of the episode, each attack
/// regenerated from the parameters of the moment. With `joint_update` the
/// three gradients sum into one optimizer step. A zero epsilon skips the
/// attacked sub-steps entirely.
pub fn train_step_sat(
    model: &mut FssModel,
    episode: &Episode,
    sat_epsilon: f64,
    joint_update: bool,
    opt: &mut Sgd,
    step: usize,
) -> Result<SatStepReport> {
    let mut joint: BTreeMap<String, Tensor> = BTreeMap::new();
    let absorb = |acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>| {
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(t) => t.add_scaled_assign(&g, 1.0),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    };

    let (clean, grads) = ce_grads(model, episode, step)?;
    if joint_update {
        absorb(&mut joint, grads);
    } else {
        opt.apply(model, &grads);
    }

    let mut support_adversarial = 0.0;
    let mut query_adversarial = 0.0;
    if sat_epsilon > 0.0 {
        for target in [AttackTarget::Support, AttackTarget::Query] {
            let adv = attack_episode(&*model, episode, &AttackSpec::fgsm(target, sat_epsilon))?;
            let (ce, grads) = ce_grads(model, &adv.episode, step)?;
            match target {
                AttackTarget::Support => support_adversarial = ce,
                AttackTarget::Query => query_adversarial = ce,
            }
            if joint_update {
                absorb(&mut joint, grads);
            } else {
                opt.apply(model, &grads);
            }
        }
    }
    if joint_update {
        opt.apply(model, &joint);
    }
    Ok(SatStepReport { clean, support_adversarial, query_adversarial })
}

/// Trains one model from scratch on the training split.
pub fn train(cfg: &RunConfig, dataset: &Dataset, run_seed: u64) -> Result<FssModel> {
    cfg.validate()?;
    let mut model = FssModel::new(
        cfg.variant,
        &cfg.encoder,
        &cfg.solver,
        cfg.time_conditioning,
        cfg.temperature,
        run_seed,
    )?;
    let mut opt = Sgd::new(&cfg.optimizer)?;
    let request = cfg.episodes.request();
    for step in 0..cfg.episodes.train_episodes {
        let ep_seed = derive_seed(run_seed, &[role::EPISODE, step as u64]);
        let episode = sample_episode(&dataset.train, request, None, ep_seed)?;
        match cfg.variant {
            ModelVariant::Sat => {
                let r = train_step_sat(&mut model, &episode, cfg.sat_epsilon, cfg.sat_joint_update, &mut opt, step)?;
                if (step + 1) % 100 == 0 {
                    log::info!(
                        "{} seed {run_seed} step {}: clean {:.4} adv_s {:.4} adv_q {:.4}",
                        cfg.variant,
                        step + 1,
                        r.clean,
                        r.support_adversarial,
                        r.query_adversarial
                    );
                }
            }
            _ => {
                let r = train_step(&mut model, &episode, &cfg.weights, &cfg.noise, &mut opt, run_seed, step)?;
                if (step + 1) % 100 == 0 {
                    log::info!(
                        "{} seed {run_seed} step {}: ce {:.4} con {:.4} cl {:.4} total {:.4}",
                        cfg.variant,
                        step + 1,
                        r.cross_entropy,
                        r.consistency,
                        r.cluster,
                        r.total
                    );
                }
            }
        }
    }
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub episodes: usize,
    pub request: EpisodeRequest,
    /// Base seed; episode `i` uses a value derived from it, so every model
    /// evaluated with the same options sees the same episodes.
    pub seed: u64,
    pub attack: Option<AttackSpec>,
    pub class_filter: Option<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_class: BTreeMap<u8, DiceStats>,
    /// Raw per-query dice scores behind each stats entry.
    pub scores: BTreeMap<u8, Vec<f64>>,
    /// Episodes where the attack gradient vanished everywhere.
    pub zero_gradient_episodes: usize,
}

/// Dice evaluation over freshly sampled episodes, optionally under attack.
pub fn evaluate(model: &FssModel, subjects: &[Subject], opts: &EvalOptions) -> Result<EvalReport> {
    if opts.episodes == 0 {
        return Err(Error::EmptyEpisodes);
    }
    let mut scores: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut zero_gradient_episodes = 0usize;
    for e in 0..opts.episodes {
        let seed = derive_seed(opts.seed, &[role::EVAL, e as u64]);
        let mut ep = sample_episode(subjects, opts.request, opts.class_filter.as_deref(), seed)?;
        if let Some(spec) = &opts.attack {
            let out = attack_episode(model, &ep, &spec.for_episode(seed))?;
            zero_gradient_episodes += usize::from(out.zero_gradient);
            ep = out.episode;
        }
        let fwd = forward_episode(model, &ep)?;
        for (qi, (_, gt)) in ep.query.iter().enumerate() {
            for &class in &ep.class_set {
                scores.entry(class).or_default().push(dice(&fwd.predictions[qi], gt, class)?);
            }
        }
    }
    let per_class = scores.iter().map(|(&c, v)| (c, dice_stats(v))).collect();
    Ok(EvalReport { per_class, scores, zero_gradient_episodes })
}

/// Artifacts written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
}

/// Trains each requested variant under each run seed, checkpoints it, and
/// writes one metrics table per (variant, seed): a clean row per organ class
/// followed by rows for every configured attack.
pub fn run_experiment(
    cfg: &RunConfig,
    dataset: &Dataset,
    variants: &[ModelVariant],
    out_dir: &Path,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("run_experiment needs at least one variant".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut output = ExperimentOutput { checkpoints: Vec::new(), metrics: Vec::new() };
    for &variant in variants {
        let vcfg = RunConfig { variant, ..cfg.clone() };
        for &run_seed in &cfg.seeds {
            let model = train(&vcfg, dataset, run_seed)?;
            let ckpt_path = out_dir.join(format!("checkpoint_{variant}_{run_seed}.ckpt"));
            crate::checkpoint::save(&model, cfg.episodes.train_episodes as u64, run_seed, &ckpt_path)?;
            output.checkpoints.push(ckpt_path);

            let rows = metrics_rows(&vcfg, &model, dataset, run_seed)?;
            let csv_path = out_dir.join(format!("metrics_{variant}_{run_seed}.csv"));
            write_csv(&rows, &csv_path)?;
            output.metrics.push(csv_path);
        }
    }
    Ok(output)
}

/// Clean and attacked evaluation rows for one trained model.
pub fn metrics_rows(cfg: &RunConfig, model: &FssModel, dataset: &Dataset, run_seed: u64) -> Result<Vec<MetricsRow>> {
    let base = EvalOptions {
        episodes: cfg.episodes.test_episodes,
        request: cfg.episodes.request(),
        seed: cfg.eval.seed,
        attack: None,
        class_filter: None,
    };
    let mut rows = Vec::new();
    let clean = evaluate(model, &dataset.test, &base)?;
    for (&class, stats) in &clean.per_class {
        rows.push(MetricsRow::clean(class, *stats, stats.n, run_seed));
    }
    for attack in &cfg.eval.attacks {
        let spec = attack.to_spec()?;
        let report = evaluate(model, &dataset.test, &EvalOptions { attack: Some(spec), ..base.clone() })?;
        for (&class, stats) in &report.per_class {
            rows.push(MetricsRow {
                attack: spec.family.name().into(),
                target: spec.target.name().into(),
                eps: spec.epsilon,
                iters: spec.iterations,
                organ_class: class,
                dice_mean: stats.mean,
                dice_std: stats.std,
                n_episodes: stats.n,
                seed: run_seed,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::episodes::{generate_synthetic, SynthConfig};
    use crate::ode::SolverConfig;

    fn tiny_cfg(variant: ModelVariant) -> RunConfig {
        RunConfig {
            variant,
            seeds: vec![5],
            encoder: EncoderConfig {
                stage_channels: vec![4, 8],
                downsample_factor: 2,
                weight_init: "he_normal".into(),
            },
            solver: SolverConfig { steps: 2, ..SolverConfig::default() },
            synth: SynthConfig {
                image_size: [16, 16],
                train_subjects: 3,
                val_subjects: 0,
                test_subjects: 2,
                slices_per_subject: 4,
                ..SynthConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn tiny_setup(variant: ModelVariant) -> (RunConfig, Dataset, FssModel, Sgd, Episode) {
        let cfg = tiny_cfg(variant);
        let ds = generate_synthetic(&cfg.synth).unwrap();
        let model = FssModel::new(
            variant,
            &cfg.encoder,
            &cfg.solver,
            cfg.time_conditioning,
            cfg.temperature,
            5,
        )
        .unwrap();
        let opt = Sgd::new(&cfg.optimizer).unwrap();
        let ep = sample_episode(&ds.train, cfg.episodes.request(), None, 31).unwrap();
        (cfg, ds, model, opt, ep)
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        // Minimize (x - 3)^2 by hand-fed gradients 2(x - 3).
        let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.5, decay_factor: 1.0, decay_every: 0 };
        let mut opt = Sgd::new(&cfg).unwrap();
        let mut model = FssModel::new(
            ModelVariant::VanillaCnn,
            &EncoderConfig { stage_channels: vec![1], downsample_factor: 1, weight_init: "he_normal".into() },
            &SolverConfig::default(),
            false,
            1.0,
            0,
        )
        .unwrap();
        let name = "encoder.0.bias".to_string();
        for _ in 0..60 {
            let x = model.named_params()[1].1.data()[0];
            let mut grads = BTreeMap::new();
            grads.insert(name.clone(), Tensor::from_vec(&[1], vec![2.0 * (x - 3.0)]));
            opt.apply(&mut model, &grads);
        }
        let x = model.named_params()[1].1.data()[0];
        assert!((x - 3.0).abs() < 1e-3, "ended at {x}");
    }

    #[test]
    fn step_decay_halves_the_rate_on_schedule() {
        let cfg = OptimizerConfig { learning_rate: 0.08, momentum: 0.0, decay_factor: 0.5, decay_every: 2 };
        let mut opt = Sgd::new(&cfg).unwrap();
        let mut model = FssModel::new(
            ModelVariant::VanillaCnn,
            &EncoderConfig { stage_channels: vec![1], downsample_factor: 1, weight_init: "he_normal".into() },
            &SolverConfig::default(),
            false,
            1.0,
            0,
        )
        .unwrap();
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.push(opt.current_rate());
            opt.apply(&mut model, &BTreeMap::new());
        }
        assert_eq!(seen, vec![0.08, 0.08, 0.04, 0.04, 0.02]);
    }

    #[test]
    fn vanishing_sigma_makes_the_auxiliary_losses_vanish() {
        let (cfg, _ds, mut model, mut opt, ep) = tiny_setup(ModelVariant::Rpnode);
        let noise = NoiseConfig { sigma: 1e-12, ..cfg.noise };
        for step in 0..3 {
            let r = train_step(&mut model, &ep, &cfg.weights, &noise, &mut opt, 5, step).unwrap();
            assert!(r.cluster.abs() < 1e-6, "cluster loss {}", r.cluster);
            assert!((r.consistency - r.cross_entropy).abs() < 1e-6, "consistency {} vs ce {}", r.consistency, r.cross_entropy);
        }
    }

    #[test]
    fn repeated_updates_on_one_episode_reduce_its_loss() {
        let (cfg, _ds, mut model, mut opt, ep) = tiny_setup(ModelVariant::VanillaCnn);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..30 {
            let r = train_step(&mut model, &ep, &cfg.weights, &cfg.noise, &mut opt, 5, step).unwrap();
            first.get_or_insert(r.total);
            last = r.total;
        }
        let first = first.unwrap();
        assert!(last < first * 0.8, "loss went from {first} to {last}");
    }

    #[test]
    fn sat_with_zero_epsilon_is_plain_cross_entropy_training() {
        let (cfg, _ds, model_a, mut opt_a, ep) = tiny_setup(ModelVariant::Sat);
        let mut model_a = model_a;
        let mut model_b = model_a.clone();
        let mut opt_b = Sgd::new(&cfg.optimizer).unwrap();
        for step in 0..3 {
            train_step_sat(&mut model_a, &ep, 0.0, false, &mut opt_a, step).unwrap();
            // Sat never uses companions, so train_step is the bare CE update.
            train_step(&mut model_b, &ep, &cfg.weights, &cfg.noise, &mut opt_b, 5, step).unwrap();
        }
        assert_eq!(model_a, model_b);
    }

    #[test]
    fn sat_adversarial_substeps_change_the_trajectory() {
        let (_cfg, _ds, model, mut opt, ep) = tiny_setup(ModelVariant::Sat);
        let mut plain = model.clone();
        let mut hardened = model;
        let mut opt2 = Sgd::new(&OptimizerConfig::default()).unwrap();
        train_step_sat(&mut plain, &ep, 0.0, false, &mut opt, 0).unwrap();
        let r = train_step_sat(&mut hardened, &ep, 0.02, false, &mut opt2, 0).unwrap();
        assert!(r.support_adversarial > 0.0);
        assert!(r.query_adversarial > 0.0);
        assert_ne!(plain, hardened);
    }

    #[test]
    fn joint_sat_update_applies_one_optimizer_step() {
        let (_cfg, _ds, model, _opt, ep) = tiny_setup(ModelVariant::Sat);
        let mut m = model;
        let opt_cfg = OptimizerConfig { decay_every: 0, ..OptimizerConfig::default() };
        let mut opt = Sgd::new(&opt_cfg).unwrap();
        train_step_sat(&mut m, &ep, 0.02, true, &mut opt, 0).unwrap();
        assert_eq!(opt.steps_taken, 1);
    }

    #[test]
    fn evaluation_is_deterministic_and_counts_episodes() {
        let (cfg, ds, model, _opt, _ep) = tiny_setup(ModelVariant::VanillaCnn);
        let opts = EvalOptions {
            episodes: 4,
            request: cfg.episodes.request(),
            seed: 99,
            attack: None,
            class_filter: None,
        };
        let a = evaluate(&model, &ds.test, &opts).unwrap();
        let b = evaluate(&model, &ds.test, &opts).unwrap();
        assert_eq!(a.scores, b.scores);
        let (_, stats) = a.per_class.iter().next().unwrap();
        assert_eq!(stats.n, 4);
    }

    #[test]
    fn non_finite_loss_reports_the_episode_seed() {
        let (cfg, _ds, mut model, mut opt, ep) = tiny_setup(ModelVariant::IdentityOde);
        // A huge final-stage bias keeps the features finite but overflows the
        // cluster-loss cosine, which surfaces as a non-finite total.
        let params = model.named_params_mut();
        assert_eq!(params[3].0, "encoder.1.bias");
        let mut poisoned = model;
        poisoned.named_params_mut()[3].1.data_mut()[0] = 1e200;
        match train_step(&mut poisoned, &ep, &cfg.weights, &cfg.noise, &mut opt, 5, 7) {
            Err(Error::NonFiniteLoss { step, episode_seed, .. }) => {
                assert_eq!(step, 7);
                assert_eq!(episode_seed, ep.seed);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
