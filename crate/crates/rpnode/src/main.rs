//! Command-line entry point: dataset generation, training, evaluation,
//! attack sweeps, ablations, and prototype export.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use rpnode::attacks::{AttackFamily, AttackTarget};
use rpnode::checkpoint;
use rpnode::config::{AttackConfig, RunConfig};
use rpnode::episodes::{generate_synthetic, load_dataset, write_dataset, EpisodeRequest, SplitId};
use rpnode::metrics::{parse_csv, write_csv, MetricsRow};
use rpnode::model::{forward_episode, ModelVariant};
use rpnode::train::{evaluate, metrics_rows, run_experiment, EvalOptions};
use rpnode::{episodes::sample_episode, Error, Result};

#[derive(Parser)]
#[command(
    name = "rpnode",
    version,
    about = "Few-shot segmentation with a prototypical neural-ODE head and an adversarial evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenerateData(GenerateDataArgs),
    /// Train the configured variant, one run per seed, and evaluate it.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally under a single attack.
    Evaluate(EvaluateArgs),
    /// Sweep a checkpoint through the configured attack list.
    AttackEval(AttackEvalArgs),
    /// Train and evaluate several variants under the same configuration.
    Ablate(AblateArgs),
    /// Write the prototype vectors of one episode as CSV.
    ExportFeatures(ExportFeaturesArgs),
}

/// Root for default output paths: `--out` wins, then `RPNODE_OUT`, then
/// `./runs`.
fn out_root() -> PathBuf {
    std::env::var_os("RPNODE_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the small CPU-scale preset instead of the full defaults.
    #[arg(long)]
    benchmark: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = match (&self.config, self.benchmark) {
            (Some(path), false) => RunConfig::load(path)?,
            (None, true) => RunConfig::benchmark(),
            (None, false) => RunConfig::default(),
            (Some(_), true) => {
                return Err(Error::Config("--config and --benchmark are mutually exclusive".into()))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to `<root>/data`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by generate-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory; defaults to `<root>/train`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured model variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<ModelVariant>,
    /// Train a single run with this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttackArgs {
    /// Attack family: fgsm, bim or pgd.
    #[arg(long, value_parser = parse_family)]
    attack: Option<AttackFamily>,
    /// Attack side: query or support.
    #[arg(long, value_parser = parse_target, default_value = "query")]
    target: AttackTarget,
    /// Perturbation budget in intensity units.
    #[arg(long, default_value_t = 0.02)]
    eps: f64,
    /// Iteration count; defaults to the family convention.
    #[arg(long)]
    iters: Option<usize>,
    /// Step size; defaults to the family convention.
    #[arg(long)]
    step: Option<f64>,
    /// Disable the pgd random start.
    #[arg(long)]
    no_random_start: bool,
    /// Seed for the pgd random start.
    #[arg(long, default_value_t = 0)]
    attack_seed: u64,
}

impl AttackArgs {
    fn to_config(&self) -> Option<AttackConfig> {
        self.attack.map(|family| AttackConfig {
            family,
            target: self.target,
            epsilon: self.eps,
            iterations: self.iters,
            step_size: self.step,
            random_start: if self.no_random_start { Some(false) } else { None },
            seed: Some(self.attack_seed),
        })
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint produced by train or ablate.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset split to evaluate: train, val, test or test_shifted.
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: SplitId,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 1)]
    n_query: usize,
    /// Base seed for evaluation episodes.
    #[arg(long, default_value_t = 777)]
    eval_seed: u64,
    #[command(flatten)]
    attack: AttackArgs,
    /// Append rows to this metrics CSV as well as printing them.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Override the configured test episode count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Metrics CSV path; defaults to `<root>/attack_eval.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variant list; defaults to all five.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Option<Vec<ModelVariant>>,
    /// Output directory; defaults to `<root>/ablation`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportFeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: SplitId,
    /// Seed of the episode whose prototypes are exported.
    #[arg(long, default_value_t = 0)]
    episode_seed: u64,
    #[arg(long, default_value_t = 1)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// CSV path; defaults to `<root>/prototypes.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<ModelVariant, String> {
    ModelVariant::from_str(s).map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<AttackFamily, String> {
    AttackFamily::from_str(s).map_err(|e| e.to_string())
}

fn parse_target(s: &str) -> std::result::Result<AttackTarget, String> {
    AttackTarget::from_str(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<SplitId, String> {
    SplitId::from_str(s).map_err(|e| e.to_string())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Drops the resolved configuration next to a run's outputs.
fn record_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut all = if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_csv(&text)?
    } else {
        Vec::new()
    };
    all.extend_from_slice(rows);
    write_csv(&all, path)
}

fn print_rows(rows: &[MetricsRow]) {
    for r in rows {
        println!(
            "{:>5} {:>7} eps {:<6} iters {:<3} class {:<3} dice {:.4} +- {:.4} over {} episodes (seed {})",
            r.attack, r.target, r.eps, r.iters, r.organ_class, r.dice_mean, r.dice_std, r.n_episodes, r.seed
        );
    }
}

fn cmd_generate_data(args: &GenerateDataArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| out_root().join("data"));
    ensure_dir(&out)?;
    let dataset = generate_synthetic(&cfg.synth)?;
    write_dataset(&dataset, &out)?;
    record_config(&cfg, &out)?;
    let counts: Vec<String> = SplitId::ALL
        .iter()
        .map(|&s| format!("{s}: {} subjects", dataset.split(s).len()))
        .collect();
    println!("wrote {} ({})", out.display(), counts.join(", "));
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let out = args.out.clone().unwrap_or_else(|| out_root().join("train"));
    ensure_dir(&out)?;
    record_config(&cfg, &out)?;
    let dataset = load_dataset(&args.data)?;
    let output = run_experiment(&cfg, &dataset, &[cfg.variant], &out)?;
    for p in output.checkpoints.iter().chain(&output.metrics) {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let subjects = dataset.split(args.split);
    let attack = match args.attack.to_config() {
        Some(c) => Some(c.to_spec()?),
        None => None,
    };
    let opts = EvalOptions {
        episodes: args.episodes,
        request: EpisodeRequest { n_way: args.n_way, k_shot: args.k_shot, n_query: args.n_query },
        seed: args.eval_seed,
        attack,
        class_filter: None,
    };
    let report = evaluate(&ckpt.model, subjects, &opts)?;
    if report.zero_gradient_episodes > 0 {
        log::warn!("{} episodes had an all-zero attack gradient", report.zero_gradient_episodes);
    }
    let mut rows = Vec::new();
    for (&class, stats) in &report.per_class {
        rows.push(match &opts.attack {
            None => MetricsRow::clean(class, *stats, stats.n, ckpt.run_seed),
            Some(spec) => MetricsRow {
                attack: spec.family.name().into(),
                target: spec.target.name().into(),
                eps: spec.epsilon,
                iters: spec.iterations,
                organ_class: class,
                dice_mean: stats.mean,
                dice_std: stats.std,
                n_episodes: stats.n,
                seed: ckpt.run_seed,
            },
        });
    }
    print_rows(&rows);
    if let Some(out) = &args.out {
        append_rows(out, &rows)?;
        println!("appended {} rows to {}", rows.len(), out.display());
    }
    Ok(())
}

fn cmd_attack_eval(args: &AttackEvalArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(n) = args.episodes {
        cfg.episodes.test_episodes = n;
    }
    let ckpt = checkpoint::load(&args.checkpoint)?;
    cfg.variant = ckpt.model.variant;
    let dataset = load_dataset(&args.data)?;
    let rows = metrics_rows(&cfg, &ckpt.model, &dataset, ckpt.run_seed)?;
    print_rows(&rows);
    let out = args.out.clone().unwrap_or_else(|| out_root().join("attack_eval.csv"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    append_rows(&out, &rows)?;
    println!("appended {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let variants = args.variants.clone().unwrap_or_else(|| ModelVariant::ALL.to_vec());
    let out = args.out.clone().unwrap_or_else(|| out_root().join("ablation"));
    ensure_dir(&out)?;
    record_config(&cfg, &out)?;
    let dataset = load_dataset(&args.data)?;
    let output = run_experiment(&cfg, &dataset, &variants, &out)?;
    for p in output.checkpoints.iter().chain(&output.metrics) {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_export_features(args: &ExportFeaturesArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let subjects = dataset.split(args.split);
    let request = EpisodeRequest { n_way: args.n_way, k_shot: args.k_shot, n_query: 1 };
    let episode = sample_episode(subjects, request, None, args.episode_seed)?;
    let fwd = forward_episode(&ckpt.model, &episode)?;
    let out = args.out.clone().unwrap_or_else(|| out_root().join("prototypes.csv"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    std::fs::write(&out, fwd.prototypes.to_csv()).map_err(|e| Error::io(&out, e))?;
    println!("wrote {} ({} prototypes of dimension {})", out.display(), fwd.prototypes.class_ids.len(), fwd.prototypes.dim());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData(a) => cmd_generate_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::AttackEval(a) => cmd_attack_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportFeatures(a) => cmd_export_features(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
