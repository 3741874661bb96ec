mod registry;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use registry::{Registry, Status};
use taco_core::config::load_with_overrides;
use taco_core::harness::{
    self, comparison_suite, lambda_sweep, standard_conditions, task_transfer_matrix, ComparisonReport, Condition,
    LambdaTable, SuiteConfig, TransferMatrix, MATRIX_FILE, REPORT_FILE, SWEEP_FILE,
};
use taco_core::plot;
use taco_core::training::{pretrain_on, resume_on, RunOptions, CHECKPOINT_FILE, CONFIG_FILE, EPOCHS_FILE};
use taco_core::videodata::{load_manifest, synthetic_manifest, write_manifest, write_video_frames, ManifestEntry, VideoSource};
use taco_core::{checkpoint, DatasetSource, Dataset, EvalConfig, ExperimentConfig, TransformKind};

#[derive(Parser)]
#[command(name = "taco", version, about = "Temporal-aware contrastive video pretraining at desk scale")]
struct Cli {
    /// Root directory for runs, reports and the run registry.
    #[arg(long, global = true, env = "TACO_OUT_ROOT", default_value = "taco-out")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config in TOML; the built-in desk configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as `objective.lambda=0`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run again even if the registry marks this run done.
    #[arg(long)]
    force: bool,
    /// Output directory; a path under the root when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    LinearProbe,
    FullFinetune,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Downstream protocol.
    #[arg(long, value_enum)]
    protocol: Option<Protocol>,
    /// Downstream epochs; learning-rate milestones scale with it.
    #[arg(long)]
    eval_epochs: Option<usize>,
    /// Size of the held-out split derived from a synthetic training set.
    #[arg(long, default_value_t = 800)]
    test_videos: usize,
    /// Labeled test manifest, required when training data comes from a manifest.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
}

impl EvalArgs {
    fn config(&self, default: Protocol) -> EvalConfig {
        match self.protocol.unwrap_or(default) {
            Protocol::LinearProbe => EvalConfig::linear_probe(self.eval_epochs.unwrap_or(60)),
            Protocol::FullFinetune => EvalConfig::full_finetune(self.eval_epochs.unwrap_or(10)),
        }
    }

    fn test_set(&self, cfg: &ExperimentConfig) -> Result<Dataset> {
        let ds = match &self.test_manifest {
            Some(p) => load_manifest(p),
            None => cfg.dataset.held_out(self.test_videos)?.load(),
        };
        ds.context("loading the test split")
    }

    fn describe(&self) -> String {
        format!("{}|{:?}", self.test_videos, self.test_manifest)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset (frames and manifest) described by the config.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write only the manifest of procedural specs, no frame images.
        #[arg(long)]
        manifest_only: bool,
    },
    /// Pretrains one configuration, resuming an interrupted run in the same directory.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluates a pretrained run on held-out labeled videos.
    Eval {
        /// Run directory written by `pretrain`.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        force: bool,
    },
    /// Task-transfer matrix: pretrain on each row task, train a head for each column task.
    Matrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "rotation,reverse,shuffle,speed")]
        tasks: Vec<String>,
        /// Pretrain rows with the task loss alone.
        #[arg(long)]
        no_contrastive: bool,
    },
    /// Sweeps the task-loss weight λ; λ = 0 must reproduce the contrastive-only run.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20")]
        lambdas: Vec<f64>,
    },
    /// Baseline, augmentation-only, TaCo and task-only comparison over seeds.
    Suite {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "rotation,reverse,shuffle,speed")]
        tasks: Vec<String>,
        /// Largest task combination to include.
        #[arg(long, default_value_t = 2)]
        max_combo: usize,
        /// Explicit condition labels such as `taco:speed`; replaces the standard list.
        #[arg(long, value_delimiter = ',')]
        conditions: Vec<String>,
    },
    /// Renders a report, sweep, matrix or run directory as SVG.
    Plot {
        /// Report file or run/report directory.
        path: PathBuf,
        /// Output image; next to the input when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A done run that was not forced.
#[derive(Debug)]
struct Refused(String);

impl std::fmt::Display for Refused {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Refused {}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Layers `user` over `base`. A table whose `kind` tag changes replaces the base table.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if b.get("kind") == u.get("kind") || !u.contains_key("kind") => {
                merge(b, u)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let defaults = ExperimentConfig::default().to_toml()?;
    let (text, origin) = match &args.config {
        Some(p) => {
            let user = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let user: toml::Table = user.parse().with_context(|| format!("parsing {}", p.display()))?;
            let mut base: toml::Table = defaults.parse()?;
            merge(&mut base, user);
            (toml::to_string(&base)?, p.display().to_string())
        }
        None => (defaults, "built-in defaults".to_string()),
    };
    let mut overrides = Vec::new();
    if let Some(seed) = args.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    load_with_overrides(&text, &overrides).with_context(|| format!("config from {origin}"))
}

/// Runs `work` as registry entry `run_id`, refusing a done run unless forced.
fn tracked(
    reg: &Registry,
    run_id: &str,
    command: &str,
    hash: &str,
    out: &Path,
    force: bool,
    work: impl FnOnce() -> Result<()>,
) -> Result<()> {
    if let Some(prev) = reg.latest(run_id)? {
        match prev.status {
            Status::Done if !force => {
                return Err(Refused(format!(
                    "run {run_id} is already done (output in {}); pass --force to run it again",
                    prev.out_dir.display()
                ))
                .into())
            }
            Status::Pending | Status::Running if !force => {
                return Err(Refused(format!(
                    "run {run_id} is marked {:?}; pass --force if no other process is working on it",
                    prev.status
                ))
                .into())
            }
            Status::Pending | Status::Running => {
                reg.transition(run_id, command, hash, out, Status::Failed, Some("abandoned".into()))?;
            }
            _ => {}
        }
    }
    reg.transition(run_id, command, hash, out, Status::Pending, None)?;
    reg.transition(run_id, command, hash, out, Status::Running, None)?;
    match work() {
        Ok(()) => {
            reg.transition(run_id, command, hash, out, Status::Done, None)?;
            log::info!("run {run_id} done: {}", out.display());
            Ok(())
        }
        Err(e) => {
            let msg = describe(&e);
            reg.transition(run_id, command, hash, out, Status::Failed, Some(msg.clone()))?;
            Err(anyhow!("run {run_id} failed: {msg}"))
        }
    }
}

fn parse_tasks(names: &[String]) -> Result<Vec<TransformKind>> {
    names
        .iter()
        .map(|n| TransformKind::parse(n.trim()).ok_or_else(|| anyhow!("unknown transform `{n}`")))
        .collect()
}

fn cmd_generate(root: &Path, args: &ConfigArgs, manifest_only: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let DatasetSource::Synthetic(syn) = &cfg.dataset else {
        bail!("generate needs a synthetic dataset source");
    };
    let hash = digest(&["generate", &toml::to_string(syn)?, &manifest_only.to_string()]);
    let out = args.out.clone().unwrap_or_else(|| root.join("data").join(&hash[..12]));
    let reg = Registry::open(&root.join("registry.jsonl"))?;
    let run_id = format!("generate-{}", &hash[..12]);
    tracked(&reg, &run_id, "generate", &hash, &out, args.force, || {
        fs::create_dir_all(&out)?;
        let entries: Vec<ManifestEntry> = if manifest_only {
            synthetic_manifest(syn)
        } else {
            let data = syn.generate().context("generating videos")?;
            data.videos()
                .iter()
                .map(|v| {
                    let rel = PathBuf::from("videos").join(format!("{:06}", v.id));
                    write_video_frames(v, &out.join(&rel)).context("writing frames")?;
                    Ok(ManifestEntry {
                        id: v.id,
                        source: VideoSource::Frames { path: rel },
                        class_label: v.class_label,
                    })
                })
                .collect::<Result<_>>()?
        };
        write_manifest(&entries, &out.join("manifest.jsonl"))?;
        println!("{}", out.join("manifest.jsonl").display());
        Ok(())
    })
}

fn cmd_pretrain(root: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let hash = cfg.hash()?;
    let out = args.out.clone().unwrap_or_else(|| {
        root.join("runs")
            .join(format!("{}-seed{}-{}", Condition::new(cfg.mode, &cfg.transforms).slug(), cfg.seed, &hash[..8]))
    });
    let reg = Registry::open(&root.join("registry.jsonl"))?;
    let run_id = format!("pretrain-{}", &digest(&[&hash, &out.display().to_string()])[..12]);
    tracked(&reg, &run_id, "pretrain", &hash, &out, args.force, || {
        let train = cfg.dataset.load().context("loading the training set")?;
        let same = checkpoint::read_header(&out.join(CHECKPOINT_FILE)).is_ok_and(|h| h.config_hash == hash);
        let outcome = if same && !args.force {
            resume_on(&out, &train, Some(&cfg), RunOptions::default())
        } else {
            pretrain_on(&cfg, &train, &out, RunOptions::default())
        }
        .context("pretraining")?;
        println!("{}", outcome.checkpoint.display());
        Ok(())
    })
}

fn cmd_eval(root: &Path, run: &Path, eval: &EvalArgs, force: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE)).with_context(|| format!("reading run {}", run.display()))?;
    let ecfg = EvalConfig {
        seed: cfg.seed,
        ..eval.config(Protocol::LinearProbe)
    };
    let hash = digest(&[&cfg.hash()?, &serde_json::to_string(&ecfg)?, &eval.describe()]);
    let reg = Registry::open(&root.join("registry.jsonl"))?;
    let run_id = format!("eval-{}", &digest(&[&hash, &run.display().to_string()])[..12]);
    tracked(&reg, &run_id, "eval", &hash, run, force, || {
        let train = cfg.dataset.load().context("loading the training set")?;
        let test = eval.test_set(&cfg)?;
        if force {
            let _ = fs::remove_file(run.join(harness::EVAL_FILE));
        }
        let r = harness::evaluate_run(run, &train, &test, &ecfg).context("evaluation")?;
        println!("accuracy {:.4} on {} videos", r.accuracy, r.num_test);
        Ok(())
    })
}

fn cmd_matrix(root: &Path, args: &ConfigArgs, eval: &EvalArgs, tasks: &[String], no_contrastive: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let tasks = parse_tasks(tasks)?;
    let ecfg = eval.config(Protocol::FullFinetune);
    let names: Vec<&str> = tasks.iter().map(|t| t.name()).collect();
    let hash = digest(&[
        "matrix",
        &cfg.hash()?,
        &serde_json::to_string(&ecfg)?,
        &names.join(","),
        &no_contrastive.to_string(),
        &eval.describe(),
    ]);
    let out = args.out.clone().unwrap_or_else(|| root.join("matrix").join(&hash[..12]));
    let reg = Registry::open(&root.join("registry.jsonl"))?;
    tracked(&reg, &format!("matrix-{}", &hash[..12]), "matrix", &hash, &out, args.force, || {
        let train = cfg.dataset.load().context("loading the training set")?;
        let test = eval.test_set(&cfg)?;
        let m = task_transfer_matrix(&tasks, &cfg, !no_contrastive, &ecfg, &train, &test, &out).context("transfer matrix")?;
        print!("{}", m.to_csv());
        for (cell, e) in &m.errors {
            log::warn!("cell {cell} failed: {e}");
        }
        Ok(())
    })
}

fn cmd_sweep(root: &Path, args: &ConfigArgs, eval: &EvalArgs, lambdas: &[f64]) -> Result<()> {
    let cfg = load_config(args)?;
    let ecfg = EvalConfig {
        seed: cfg.seed,
        ..eval.config(Protocol::LinearProbe)
    };
    let lams: Vec<String> = lambdas.iter().map(f64::to_string).collect();
    let hash = digest(&["sweep", &cfg.hash()?, &serde_json::to_string(&ecfg)?, &lams.join(","), &eval.describe()]);
    let out = args.out.clone().unwrap_or_else(|| root.join("sweep").join(&hash[..12]));
    let reg = Registry::open(&root.join("registry.jsonl"))?;
    tracked(&reg, &format!("sweep-{}", &hash[..12]), "sweep", &hash, &out, args.force, || {
        let train = cfg.dataset.load().context("loading the training set")?;
        let test = eval.test_set(&cfg)?;
        let t = lambda_sweep(lambdas, &cfg, &ecfg, &train, &test, &out).context("λ sweep")?;
        print!("{}", t.to_csv());
        if !t.zero_matches_baseline {
            bail!("the λ = 0 run does not reproduce the contrastive-only run");
        }
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_suite(
    root: &Path,
    args: &ConfigArgs,
    eval: &EvalArgs,
    seeds: &[u64],
    tasks: &[String],
    max_combo: usize,
    conditions: &[String],
) -> Result<()> {
    let cfg = load_config(args)?;
    let conditions = if conditions.is_empty() {
        standard_conditions(&parse_tasks(tasks)?, max_combo)
    } else {
        conditions.iter().map(|c| Condition::parse(c.trim())).collect::<taco_core::Result<_>>()?
    };
    let suite = SuiteConfig {
        base: cfg.clone(),
        seeds: seeds.to_vec(),
        conditions,
        eval: eval.config(Protocol::LinearProbe),
    };
    let hash = digest(&["suite", &serde_json::to_string(&suite)?, &eval.describe()]);
    let out = args.out.clone().unwrap_or_else(|| root.join("suite").join(&hash[..12]));
    let reg = Registry::open(&root.join("registry.jsonl"))?;
    tracked(&reg, &format!("suite-{}", &hash[..12]), "suite", &hash, &out, args.force, || {
        let train = cfg.dataset.load().context("loading the training set")?;
        let test = eval.test_set(&cfg)?;
        fs::create_dir_all(&out)?;
        fs::write(out.join("suite.json"), serde_json::to_string_pretty(&suite)?)?;
        let report = comparison_suite(&suite, &train, &test, &out).context("comparison suite")?;
        if report.rows.iter().any(|r| r.mean.is_some()) {
            plot::comparison_bars(&out.join("report.svg"), &report.rows)?;
        }
        print!("{}", report.to_csv());
        Ok(())
    })
}

fn cmd_plot(path: &Path, out: Option<&Path>) -> Result<()> {
    let (file, default_dir) = if path.is_dir() {
        let found = [EPOCHS_FILE, REPORT_FILE, SWEEP_FILE, MATRIX_FILE]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| anyhow!("{} holds no run, report, sweep or matrix", path.display()))?;
        (found, path.to_path_buf())
    } else {
        if !path.exists() {
            bail!("{} does not exist", path.display());
        }
        (path.to_path_buf(), path.parent().unwrap_or(Path::new(".")).to_path_buf())
    };
    let header = fs::read_to_string(&file)?.lines().next().unwrap_or_default().to_string();
    let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let target = |stem: &str| out.map_or_else(|| default_dir.join(format!("{stem}.svg")), Path::to_path_buf);
    let written = if name == EPOCHS_FILE {
        let t = target("loss_curves");
        plot::loss_curves(&t, file.parent().unwrap_or(Path::new(".")))?;
        t
    } else if header.starts_with("condition,") {
        let rows = ComparisonReport::read_csv(&file)?;
        let t = target("report");
        plot::comparison_bars(&t, &rows)?;
        t
    } else if header.starts_with("lambda,") {
        let pts = LambdaTable::read_points(&file)?;
        let t = target("lambda_sweep");
        plot::line_plot(&t, &pts, "λ", "probe accuracy", "Accuracy vs λ")?;
        t
    } else if header.starts_with("pretrain,") {
        let grid = TransferMatrix::read_csv(&file)?;
        let t = target("transfer_matrix");
        plot::heatmap(&t, &grid, "Pretext accuracy (rows: pretraining task, columns: evaluated task)")?;
        t
    } else {
        bail!("{} is not a recognized report", file.display());
    };
    println!("{}", written.display());
    Ok(())
}

/// The error chain, skipping causes that the enclosing message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.last().is_some_and(|prev| prev.contains(text.trim())) {
            out.push(text);
        }
    }
    out.join(": ")
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.root;
    match cli.command {
        Command::Generate { cfg, manifest_only } => cmd_generate(&root, &cfg, manifest_only),
        Command::Pretrain { cfg } => cmd_pretrain(&root, &cfg),
        Command::Eval { run, eval, force } => cmd_eval(&root, &run, &eval, force),
        Command::Matrix {
            cfg,
            eval,
            tasks,
            no_contrastive,
        } => cmd_matrix(&root, &cfg, &eval, &tasks, no_contrastive),
        Command::Sweep { cfg, eval, lambdas } => cmd_sweep(&root, &cfg, &eval, &lambdas),
        Command::Suite {
            cfg,
            eval,
            seeds,
            tasks,
            max_combo,
            conditions,
        } => cmd_suite(&root, &cfg, &eval, &seeds, &tasks, max_combo, &conditions),
        Command::Plot { path, out } => cmd_plot(&path, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Refused>() => {
            eprintln!("refused: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
