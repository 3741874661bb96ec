//! Ablation harnesses: the comparison suite, the λ sweep and the task-transfer
//! matrix. Every number they report is backed by a run directory on disk and is
//! reused, not recomputed, when the harness is invoked again.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, TrainMode};
use crate::error::{Error, Result};
use crate::evaluation::{finetune_full, finetune_task, linear_probe, EvalConfig, EvalMode, EvalResult};
use crate::plot;
use crate::training::{pretrain_on, resume_on, RunOptions, CHECKPOINT_FILE};
use crate::transforms::TransformKind;
use crate::videodata::Dataset;

/// Downstream result stored next to the pretraining artifacts.
pub const EVAL_FILE: &str = "eval.json";
pub const REPORT_FILE: &str = "report.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const SWEEP_FILE: &str = "lambda_sweep.csv";
pub const MATRIX_FILE: &str = "transfer_matrix.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EvalRecord {
    config_hash: String,
    eval: EvalConfig,
    result: EvalResult,
}

/// Pretrains `cfg` in `run_dir`, picking up a finished or interrupted run with the
/// same configuration instead of starting over. Returns the checkpoint path.
pub fn ensure_pretrained(cfg: &ExperimentConfig, train: &Dataset, run_dir: &Path) -> Result<PathBuf> {
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let same = checkpoint::read_header(&ckpt).is_ok_and(|h| cfg.hash().is_ok_and(|x| x == h.config_hash));
    let outcome = if same {
        resume_on(run_dir, train, Some(cfg), RunOptions::default())?
    } else {
        pretrain_on(cfg, train, run_dir, RunOptions::default())?
    };
    Ok(outcome.checkpoint)
}

/// Runs the downstream protocol of `eval.mode` on the encoder in `run_dir`,
/// caching the result in [`EVAL_FILE`].
pub fn evaluate_run(run_dir: &Path, train: &Dataset, test: &Dataset, eval: &EvalConfig) -> Result<EvalResult> {
    let state = checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?;
    let hash = state.config.hash()?;
    let cache = run_dir.join(EVAL_FILE);
    if let Ok(text) = fs::read_to_string(&cache) {
        if let Ok(rec) = serde_json::from_str::<EvalRecord>(&text) {
            if rec.config_hash == hash && &rec.eval == eval {
                return Ok(rec.result);
            }
        }
    }
    let clip = &state.config.clip;
    let result = match eval.mode {
        EvalMode::LinearProbe => linear_probe(&state.net.encoder, train, test, clip, eval)?,
        EvalMode::FullFinetune => finetune_full(&state.net.encoder, train, test, clip, eval)?,
    };
    let rec = EvalRecord {
        config_hash: hash,
        eval: eval.clone(),
        result: result.clone(),
    };
    fs::write(cache, serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(result)
}

/// Pretraining followed by evaluation; the evaluation seed follows the run seed.
pub fn run_and_evaluate(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    eval: &EvalConfig,
    run_dir: &Path,
) -> Result<EvalResult> {
    ensure_pretrained(cfg, train, run_dir)?;
    let eval = EvalConfig {
        seed: cfg.seed,
        ..eval.clone()
    };
    evaluate_run(run_dir, train, test, &eval)
}

/// One row of the comparison table: a training mode and its transforms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub mode: TrainMode,
    pub transforms: Vec<TransformKind>,
}

impl Condition {
    pub fn baseline() -> Self {
        Self {
            mode: TrainMode::Baseline,
            transforms: Vec::new(),
        }
    }

    pub fn new(mode: TrainMode, transforms: &[TransformKind]) -> Self {
        Self {
            mode,
            transforms: transforms.to_vec(),
        }
    }

    /// Parses labels such as `baseline`, `taco:speed` or `aug_only:reverse+speed`.
    pub fn parse(label: &str) -> Result<Self> {
        let (mode, rest) = label.split_once(':').unwrap_or((label, ""));
        let mode = match mode {
            "baseline" => TrainMode::Baseline,
            "aug_only" => TrainMode::AugOnly,
            "taco" => TrainMode::Taco,
            "task_only" => TrainMode::TaskOnly,
            other => return Err(Error::config(format!("unknown mode `{other}` in condition `{label}`"))),
        };
        let transforms = rest
            .split('+')
            .filter(|s| !s.is_empty())
            .map(|s| TransformKind::parse(s).ok_or_else(|| Error::config(format!("unknown transform `{s}` in `{label}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mode, transforms })
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            mode: self.mode,
            transforms: self.transforms.clone(),
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        if self.transforms.is_empty() {
            self.mode.name().to_string()
        } else {
            let names: Vec<_> = self.transforms.iter().map(|k| k.name()).collect();
            format!("{}:{}", self.mode.name(), names.join("+"))
        }
    }

    /// File-system friendly form of [`Condition::label`].
    pub fn slug(&self) -> String {
        self.label().replace(':', "-").replace('+', "_")
    }
}

fn combinations(items: &[TransformKind], k: usize) -> Vec<Vec<TransformKind>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, *first);
            out.push(rest);
        }
    }
    out
}

/// Baseline, then augmentation-only, TaCo and task-only for every single task,
/// then TaCo and augmentation-only for every combination of 2..=`max_combo` tasks.
pub fn standard_conditions(tasks: &[TransformKind], max_combo: usize) -> Vec<Condition> {
    let mut out = vec![Condition::baseline()];
    for mode in [TrainMode::AugOnly, TrainMode::Taco, TrainMode::TaskOnly] {
        out.extend(tasks.iter().map(|t| Condition::new(mode, &[*t])));
    }
    for k in 2..=max_combo.min(tasks.len()) {
        for combo in combinations(tasks, k) {
            out.push(Condition::new(TrainMode::Taco, &combo));
            out.push(Condition::new(TrainMode::AugOnly, &combo));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub condition: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub accuracies: Vec<f64>,
    pub failed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunResult>,
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ComparisonReport {
    pub fn row(&self, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,mean,std,completed,failed,accuracies\n");
        for r in &self.rows {
            let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.condition,
                fmt_opt(r.mean),
                fmt_opt(r.std),
                r.accuracies.len(),
                r.failed,
                accs.join(" ")
            );
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("condition,seed,accuracy,error,run_dir\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.condition,
                r.seed,
                fmt_opt(r.accuracy),
                csv_field(r.error.as_deref().unwrap_or("")),
                csv_field(&r.run_dir.display().to_string())
            );
        }
        s
    }

    /// Reads a report written by [`comparison_suite`].
    pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
        let text = fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Report(format!("{}:{}: expected 6 fields", path.display(), i + 1)));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| Error::Report(format!("{}:{}: bad number `{s}`", path.display(), i + 1)))
                }
            };
            rows.push(ReportRow {
                condition: f[0].to_string(),
                mean: num(f[1])?,
                std: num(f[2])?,
                failed: f[4].parse().unwrap_or(0),
                accuracies: f[5].split_whitespace().filter_map(|a| a.parse().ok()).collect(),
            });
        }
        Ok(rows)
    }
}

/// Runs every condition for every seed, records per-run failures and writes
/// [`REPORT_FILE`] and [`RUNS_FILE`] to `out`.
pub fn comparison_suite(suite: &SuiteConfig, train: &Dataset, test: &Dataset, out: &Path) -> Result<ComparisonReport> {
    if suite.seeds.is_empty() || suite.conditions.is_empty() {
        return Err(Error::config("a suite needs at least one seed and one condition"));
    }
    suite.eval.validate()?;
    let mut runs = Vec::new();
    for cond in &suite.conditions {
        for &seed in &suite.seeds {
            let cfg = ExperimentConfig {
                seed,
                ..cond.apply(&suite.base)
            };
            let run_dir = out.join("runs").join(cond.slug()).join(format!("seed-{seed}"));
            let res = cfg
                .validate()
                .and_then(|_| run_and_evaluate(&cfg, train, test, &suite.eval, &run_dir));
            match &res {
                Ok(r) => log::info!("{} seed {seed}: accuracy {:.4}", cond.label(), r.accuracy),
                Err(e) => log::warn!("{} seed {seed} failed: {e}", cond.label()),
            }
            runs.push(RunResult {
                condition: cond.label(),
                seed,
                run_dir,
                accuracy: res.as_ref().ok().map(|r| r.accuracy),
                error: res.err().map(|e| e.to_string()),
            });
        }
    }
    let rows = suite
        .conditions
        .iter()
        .map(|c| {
            let label = c.label();
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.condition == label).collect();
            let accuracies: Vec<f64> = mine.iter().filter_map(|r| r.accuracy).collect();
            let ms = mean_std(&accuracies);
            ReportRow {
                condition: label,
                failed: mine.len() - accuracies.len(),
                mean: ms.map(|m| m.0),
                std: ms.map(|m| m.1),
                accuracies,
            }
        })
        .collect();
    let report = ComparisonReport { rows, runs };
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_FILE), report.to_csv())?;
    fs::write(out.join(RUNS_FILE), report.runs_csv())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub rows: Vec<LambdaRow>,
    /// Contrastive-only run over the same views and seed.
    pub baseline_accuracy: Option<f64>,
    pub baseline_dir: PathBuf,
    /// The λ = 0 checkpoint payload and accuracy equal the contrastive-only run's.
    pub zero_matches_baseline: bool,
}

impl LambdaTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,accuracy,error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{}",
                r.lambda,
                fmt_opt(r.accuracy),
                csv_field(r.error.as_deref().unwrap_or(""))
            );
        }
        s
    }

    /// `(λ, accuracy)` points of a sweep file, skipping failed rows.
    pub fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
        let text = fs::read_to_string(path)?;
        let mut pts = Vec::new();
        for line in text.lines().skip(1) {
            let mut f = line.split(',');
            if let (Some(Ok(l)), Some(Ok(a))) = (f.next().map(str::parse), f.next().map(str::parse)) {
                pts.push((l, a));
            }
        }
        Ok(pts)
    }
}

/// Pretrains and evaluates `base` (a TaCo configuration) once per λ, plus the
/// contrastive-only run the λ = 0 row must reproduce. Writes [`SWEEP_FILE`] and
/// a line plot to `out`.
pub fn lambda_sweep(
    values: &[f64],
    base: &ExperimentConfig,
    eval: &EvalConfig,
    train: &Dataset,
    test: &Dataset,
    out: &Path,
) -> Result<LambdaTable> {
    if !values.contains(&0.0) {
        return Err(Error::config("a λ sweep must include λ = 0"));
    }
    if base.transforms.is_empty() {
        return Err(Error::config("a λ sweep needs at least one transform"));
    }
    let taco = ExperimentConfig {
        mode: TrainMode::Taco,
        ..base.clone()
    };
    let reference = ExperimentConfig {
        mode: TrainMode::AugOnly,
        ..base.clone()
    };
    let baseline_dir = out.join("runs").join("contrastive-only");
    let baseline = run_and_evaluate(&reference, train, test, eval, &baseline_dir);
    let mut rows = Vec::new();
    for &lambda in values {
        let mut cfg = taco.clone();
        cfg.objective.lambda = lambda;
        let run_dir = out.join("runs").join(format!("lambda-{lambda}"));
        let res = cfg
            .validate()
            .and_then(|_| run_and_evaluate(&cfg, train, test, eval, &run_dir));
        rows.push(LambdaRow {
            lambda,
            accuracy: res.as_ref().ok().map(|r| r.accuracy),
            error: res.err().map(|e| e.to_string()),
            run_dir,
        });
    }
    let zero = rows.iter().find(|r| r.lambda == 0.0).expect("checked above");
    let same_payload = match (
        checkpoint::payload(&zero.run_dir.join(CHECKPOINT_FILE)),
        checkpoint::payload(&baseline_dir.join(CHECKPOINT_FILE)),
    ) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    let baseline_accuracy = baseline.as_ref().ok().map(|r| r.accuracy);
    let table = LambdaTable {
        zero_matches_baseline: same_payload && zero.accuracy.is_some() && zero.accuracy == baseline_accuracy,
        rows,
        baseline_accuracy,
        baseline_dir,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(SWEEP_FILE), table.to_csv())?;
    let pts: Vec<(f64, f64)> = table
        .rows
        .iter()
        .filter_map(|r| r.accuracy.map(|a| (r.lambda, a)))
        .collect();
    if !pts.is_empty() {
        plot::line_plot(&out.join("lambda_sweep.svg"), &pts, "λ", "probe accuracy", "Accuracy vs λ")?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub tasks: Vec<TransformKind>,
    /// `cells[row][col]`: accuracy on the column task after pretraining on the row task.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Chance level of each column task.
    pub chance: Vec<f64>,
    pub errors: BTreeMap<String, String>,
    pub contrastive: bool,
    pub mode: EvalMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    pretrain_hash: String,
    eval: EvalConfig,
    row: TransformKind,
    column: TransformKind,
    pretrain_dir: PathBuf,
    result: EvalResult,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let mut s = format!("pretrain,{}\n", names.join(","));
        for (i, row) in self.cells.iter().enumerate() {
            let vals: Vec<String> = row
                .iter()
                .map(|c| c.map_or_else(|| "failed".to_string(), |v| format!("{v:.6}")))
                .collect();
            let _ = writeln!(s, "{},{}", names[i], vals.join(","));
        }
        s
    }

    /// Row labels, column labels and cells of a matrix file.
    pub fn read_csv(path: &Path) -> Result<plot::Grid> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Report(format!("{} is empty", path.display())))?;
        let cols: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for line in lines {
            let mut f = line.split(',');
            rows.push(f.next().unwrap_or_default().to_string());
            cells.push(f.map(|v| v.parse().ok()).collect::<Vec<Option<f64>>>());
        }
        Ok(plot::Grid { rows, cols, cells })
    }
}

/// Pretrains on each row task (with or without the contrastive loss), then trains
/// a fresh head for every column task and records its accuracy. Failed runs mark
/// their cells; the matrix file and heatmap are written regardless.
#[allow(clippy::too_many_arguments)]
pub fn task_transfer_matrix(
    tasks: &[TransformKind],
    base: &ExperimentConfig,
    contrastive: bool,
    eval: &EvalConfig,
    train: &Dataset,
    test: &Dataset,
    out: &Path,
) -> Result<TransferMatrix> {
    if tasks.len() < 2 {
        return Err(Error::config("a transfer matrix needs at least two tasks"));
    }
    eval.validate()?;
    let mode = if contrastive { TrainMode::Taco } else { TrainMode::TaskOnly };
    let n = tasks.len();
    let mut cells = vec![vec![None; n]; n];
    let mut errors = BTreeMap::new();
    for (i, row) in tasks.iter().enumerate() {
        let cfg = Condition::new(mode, &[*row]).apply(base);
        let pretrain_dir = out.join("pretrain").join(row.name());
        let state = cfg
            .validate()
            .and_then(|_| ensure_pretrained(&cfg, train, &pretrain_dir))
            .and_then(|p| checkpoint::load(&p));
        let state = match state {
            Ok(s) => s,
            Err(e) => {
                for col in tasks {
                    errors.insert(format!("{}->{}", row.name(), col.name()), format!("pretraining failed: {e}"));
                }
                continue;
            }
        };
        let hash = cfg.hash()?;
        for (j, col) in tasks.iter().enumerate() {
            let cell_dir = out.join("cells").join(format!("{}__{}", row.name(), col.name()));
            let cache = cell_dir.join(EVAL_FILE);
            let cached = fs::read_to_string(&cache)
                .ok()
                .and_then(|t| serde_json::from_str::<CellRecord>(&t).ok())
                .filter(|r| r.pretrain_hash == hash && &r.eval == eval);
            let res = match cached {
                Some(r) => Ok(r.result),
                None => finetune_task(
                    &state.net.encoder,
                    *col,
                    train,
                    test,
                    &cfg.clip,
                    &cfg.transform,
                    cfg.heads.task_hidden,
                    eval,
                )
                .and_then(|result| {
                    fs::create_dir_all(&cell_dir)?;
                    let rec = CellRecord {
                        pretrain_hash: hash.clone(),
                        eval: eval.clone(),
                        row: *row,
                        column: *col,
                        pretrain_dir: pretrain_dir.clone(),
                        result: result.clone(),
                    };
                    fs::write(&cache, serde_json::to_string_pretty(&rec)? + "\n")?;
                    Ok(result)
                }),
            };
            match res {
                Ok(r) => cells[i][j] = Some(r.accuracy),
                Err(e) => {
                    errors.insert(format!("{}->{}", row.name(), col.name()), e.to_string());
                }
            }
        }
    }
    let matrix = TransferMatrix {
        chance: tasks
            .iter()
            .map(|t| 1.0 / t.label_space(&base.transform) as f64)
            .collect(),
        tasks: tasks.to_vec(),
        cells,
        errors,
        contrastive,
        mode: eval.mode,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(MATRIX_FILE), matrix.to_csv())?;
    let names: Vec<String> = tasks.iter().map(|t| t.name().to_string()).collect();
    plot::heatmap(
        &out.join("transfer_matrix.svg"),
        &plot::Grid {
            rows: names.clone(),
            cols: names,
            cells: matrix.cells.clone(),
        },
        "Pretext accuracy (rows: pretraining task, columns: evaluated task)",
    )?;
    Ok(matrix)
}
