//! The pretraining loop: clips → transforms → encoder and heads → losses → SGD,
//! with negative-store upkeep, metrics, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, TrainMode};
use crate::contrastive::{
    momentum_encoder_update, nce_pair_loss_with_grad, ContrastiveVariant, MemoryBank, MomentumQueue, NegativeStore,
    Negatives,
};
use crate::encoder::{pack_clips, Encoder, EncoderTrace, ProjectionHead, TacoNet, ViewKey};
use crate::error::{Error, Result};
use crate::nn::{join, l2_normalize_rows, l2_normalize_rows_backward, HasParams, Param};
use crate::objective::{batch_cross_entropy, lr_at, overall_loss, Sgd};
use crate::seeding;
use crate::transforms::{apply_transform_set, TransformKind, TransformOutcome};
use crate::videodata::{sample_clip, Clip, Dataset};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";

/// Norm tolerance for the per-epoch negative-store check.
pub const STORE_NORM_TOLERANCE: f64 = 1e-6;

/// Momentum-updated copy of the encoder and the original-view projection.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyNet {
    pub encoder: Encoder<f32>,
    pub projection: ProjectionHead<f32>,
}

impl HasParams<f32> for KeyNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.projection.visit(&join(prefix, "projection"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.projection.visit_mut(&join(prefix, "projection"), f);
    }
}

/// Projection heads a configuration needs.
pub fn view_keys(cfg: &ExperimentConfig) -> Vec<ViewKey> {
    match cfg.mode {
        TrainMode::TaskOnly => Vec::new(),
        TrainMode::Baseline => vec![ViewKey::Original, ViewKey::Identity],
        TrainMode::AugOnly | TrainMode::Taco => std::iter::once(ViewKey::Original)
            .chain(cfg.transforms.iter().map(|&k| ViewKey::Transform(k)))
            .collect(),
    }
}

/// Task heads a configuration needs.
pub fn task_kinds(cfg: &ExperimentConfig) -> Vec<TransformKind> {
    if cfg.mode.has_task_heads() {
        cfg.transforms.clone()
    } else {
        Vec::new()
    }
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub epochs_completed: usize,
    pub global_step: u64,
    pub net: TacoNet<f32>,
    pub key: Option<KeyNet>,
    pub optimizer: Sgd<f32>,
    pub store: Option<NegativeStore>,
}

impl TrainState {
    /// Fresh state; parameters and the negative store come from their own seed streams.
    pub fn init(cfg: &ExperimentConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = seeding::stream(cfg.seed, "init", 0);
        let net = TacoNet::new(
            &cfg.encoder,
            &cfg.heads,
            &view_keys(cfg),
            &task_kinds(cfg),
            &cfg.transform,
            &mut init_rng,
        )?;
        let mut store_rng = seeding::stream(cfg.seed, "store-init", 0);
        let dim = cfg.heads.embed_dim;
        let (key, store) = if !cfg.mode.uses_contrastive() {
            (None, None)
        } else {
            match cfg.contrastive.variant {
                ContrastiveVariant::Instdisc => {
                    if dataset_len < 2 {
                        return Err(Error::config("memory bank needs at least two videos"));
                    }
                    let bank = MemoryBank::random(dataset_len, dim, cfg.contrastive.bank_momentum, &mut store_rng);
                    (None, Some(NegativeStore::Bank(bank)))
                }
                ContrastiveVariant::Moco => {
                    let key = KeyNet {
                        encoder: net.encoder.clone(),
                        projection: net.projections[&ViewKey::Original].clone(),
                    };
                    let queue = MomentumQueue::random(cfg.contrastive.queue_size, dim, &mut store_rng);
                    (Some(key), Some(NegativeStore::Queue(queue)))
                }
            }
        };
        Ok(Self {
            config: cfg.clone(),
            epochs_completed: 0,
            global_step: 0,
            net,
            key,
            optimizer: Sgd::new(cfg.schedule.momentum, cfg.schedule.weight_decay),
            store,
        })
    }

    pub fn finished(&self) -> bool {
        self.epochs_completed >= self.config.schedule.total_epochs
    }
}

pub fn steps_per_epoch(num_videos: usize, cfg: &ExperimentConfig) -> usize {
    (num_videos * cfg.clips_per_video).div_ceil(cfg.batch_size)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: u64,
    pub lr: f64,
    pub contrast_loss: Option<f64>,
    pub task_loss: BTreeMap<String, f64>,
    pub task_accuracy: BTreeMap<String, f64>,
    /// Original clips with no frame-to-frame change.
    pub static_clips: usize,
    /// Seconds since the session started; the only nondeterministic field.
    pub wall_time: f64,
}

/// One row of `epochs.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub contrast_loss: Option<f64>,
    pub task_loss: BTreeMap<String, f64>,
    pub task_accuracy: BTreeMap<String, f64>,
    pub static_clips: usize,
    pub final_lr: f64,
}

struct Sample {
    video_id: usize,
    original: Clip,
    identity: Option<Clip>,
    outcomes: Vec<TransformOutcome>,
}

/// Clips of one step grouped by extent so each group is a single encoder call.
#[derive(Default)]
struct ClipBatch<'a> {
    clips: Vec<&'a Clip>,
    loc: Vec<(usize, usize)>,
    groups: Vec<Vec<usize>>,
}

impl<'a> ClipBatch<'a> {
    fn push(&mut self, clip: &'a Clip) -> usize {
        let key = (clip.num_frames, clip.height, clip.width);
        let g = match self.groups.iter().position(|g| {
            let c = self.clips[g[0]];
            (c.num_frames, c.height, c.width) == key
        }) {
            Some(g) => g,
            None => {
                self.groups.push(Vec::new());
                self.groups.len() - 1
            }
        };
        let slot = self.clips.len();
        self.loc.push((g, self.groups[g].len()));
        self.groups[g].push(slot);
        self.clips.push(clip);
        slot
    }
}

struct Encoded {
    feats: Vec<Vec<f32>>,
    traces: Vec<EncoderTrace<f32>>,
    dfeat: Vec<Vec<f32>>,
    dim: usize,
}

impl Encoded {
    fn forward(encoder: &Encoder<f32>, batch: &ClipBatch<'_>) -> Result<Self> {
        let mut feats = Vec::new();
        let mut traces = Vec::new();
        for g in &batch.groups {
            let clips: Vec<&Clip> = g.iter().map(|&s| batch.clips[s]).collect();
            let (x, e) = pack_clips::<f32>(&clips)?;
            let (f, t) = encoder.forward(&x, e)?;
            feats.push(f);
            traces.push(t);
        }
        let dfeat = feats.iter().map(|f| vec![0.0; f.len()]).collect();
        Ok(Self {
            feats,
            traces,
            dfeat,
            dim: encoder.feature_dim(),
        })
    }

    fn rows(&self, batch: &ClipBatch<'_>, slots: impl IntoIterator<Item = usize>) -> Vec<f32> {
        let d = self.dim;
        let mut out = Vec::new();
        for s in slots {
            let (g, r) = batch.loc[s];
            out.extend_from_slice(&self.feats[g][r * d..(r + 1) * d]);
        }
        out
    }

    fn add_grad(&mut self, batch: &ClipBatch<'_>, slots: impl IntoIterator<Item = usize>, grads: &[f32]) {
        let d = self.dim;
        for (s, g) in slots.into_iter().zip(grads.chunks_exact(d)) {
            let (gi, r) = batch.loc[s];
            for (acc, v) in self.dfeat[gi][r * d..(r + 1) * d].iter_mut().zip(g) {
                *acc += *v;
            }
        }
    }

    fn backward(self, encoder: &mut Encoder<f32>) {
        for (t, d) in self.traces.into_iter().zip(self.dfeat) {
            encoder.backward(t, &d);
        }
    }
}

struct StepResult {
    contrast_loss: Option<f64>,
    task_loss: BTreeMap<String, f64>,
    task_accuracy: BTreeMap<String, f64>,
    static_clips: usize,
}

/// A projected view: per-sample embeddings plus what backward needs.
struct ProjectedView {
    key: ViewKey,
    slots: Vec<Vec<usize>>,
    trace: crate::encoder::ProjectionTrace<f32>,
    /// Per-sample embedding; the renormalized mean when a view has several clips.
    q: Vec<f32>,
    norms: Option<Vec<f32>>,
    dq: Vec<f32>,
}

fn draw_samples(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    ids: &[usize],
    rng: &mut seeding::StreamRng,
) -> Result<Vec<Sample>> {
    let set = cfg.transform_set();
    ids.iter()
        .map(|&id| {
            let video = dataset.get(id).ok_or(Error::Index {
                index: id,
                size: dataset.len(),
            })?;
            let original = sample_clip(video, &cfg.clip, rng)?;
            let identity = match cfg.mode {
                TrainMode::Baseline => Some(sample_clip(video, &cfg.clip, rng)?),
                _ => None,
            };
            let outcomes = match &set {
                Some(set) => apply_transform_set(video, set, &cfg.transform, &cfg.clip, rng)?,
                None => Vec::new(),
            };
            Ok(Sample {
                video_id: id,
                original,
                identity,
                outcomes,
            })
        })
        .collect()
}

fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    ids: &[usize],
    lr: f32,
    view_rng: &mut seeding::StreamRng,
    neg_rng: &mut seeding::StreamRng,
) -> Result<StepResult> {
    let cfg = state.config.clone();
    let b = ids.len();
    let inv_b = 1.0 / b as f32;
    let samples = draw_samples(&cfg, dataset, ids, view_rng)?;
    let static_clips = samples.iter().filter(|s| s.original.is_static()).count();
    let contrastive = cfg.mode.uses_contrastive();
    let moco = contrastive && cfg.contrastive.variant == ContrastiveVariant::Moco;

    let mut batch = ClipBatch::default();
    let orig_slots: Vec<usize> = if contrastive {
        samples.iter().map(|s| batch.push(&s.original)).collect()
    } else {
        Vec::new()
    };
    let identity_slots: Vec<usize> = samples
        .iter()
        .filter_map(|s| s.identity.as_ref().map(|c| batch.push(c)))
        .collect();
    let num_kinds = cfg.transforms.len();
    // outcome_slots[k][i]: clip slots of transform k for sample i
    let mut outcome_slots: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(b); num_kinds];
    for s in &samples {
        for (k, o) in s.outcomes.iter().enumerate() {
            outcome_slots[k].push(o.clips.iter().map(|c| batch.push(c)).collect());
        }
    }

    state.net.zero_grad();
    let mut enc = Encoded::forward(&state.net.encoder, &batch)?;
    let e = cfg.heads.embed_dim;

    let mut contrast_loss = None;
    let mut positives_for_store: Vec<f32> = Vec::new();
    if contrastive {
        let tau = cfg.contrastive.temperature as f32;
        // queries
        let mut view_specs: Vec<(ViewKey, Vec<Vec<usize>>)> = Vec::new();
        if moco {
            view_specs.push((ViewKey::Original, orig_slots.iter().map(|&s| vec![s]).collect()));
        }
        match cfg.mode {
            TrainMode::Baseline => {
                view_specs.push((ViewKey::Identity, identity_slots.iter().map(|&s| vec![s]).collect()));
            }
            _ => {
                for (k, kind) in cfg.transforms.iter().enumerate() {
                    view_specs.push((ViewKey::Transform(*kind), outcome_slots[k].clone()));
                }
            }
        }
        let mut views = Vec::with_capacity(view_specs.len());
        for (key, slots) in view_specs {
            let m = slots[0].len();
            let x = enc.rows(&batch, slots.iter().flatten().copied());
            let trace = state.net.projections[&key].forward(&x, b * m)?;
            let (q, norms) = if m == 1 {
                (trace.embeddings().to_vec(), None)
            } else {
                let z = trace.embeddings();
                let mut mean = vec![0.0f32; b * e];
                for i in 0..b {
                    for j in 0..m {
                        let row = &z[(i * m + j) * e..(i * m + j + 1) * e];
                        for (acc, v) in mean[i * e..(i + 1) * e].iter_mut().zip(row) {
                            *acc += *v / m as f32;
                        }
                    }
                }
                let (q, norms) = l2_normalize_rows(&mean, e);
                (q, Some(norms))
            };
            views.push(ProjectedView {
                key,
                slots,
                trace,
                dq: vec![0.0; q.len()],
                q,
                norms,
            });
        }

        // positives
        let (positives, orig_trace) = if moco {
            let key = state.key.as_ref().expect("momentum variant keeps a key network");
            let clips: Vec<&Clip> = samples.iter().map(|s| &s.original).collect();
            let (x, ext) = pack_clips::<f32>(&clips)?;
            let (h, _) = key.encoder.forward(&x, ext)?;
            (key.projection.forward(&h, b)?.embeddings().to_vec(), None)
        } else {
            let x = enc.rows(&batch, orig_slots.iter().copied());
            let t = state.net.projections[&ViewKey::Original].forward(&x, b)?;
            (t.embeddings().to_vec(), Some(t))
        };
        let mut d_pos = vec![0.0f32; b * e];

        let queue_negs = match &state.store {
            Some(NegativeStore::Queue(q)) => q.flatten(),
            _ => Vec::new(),
        };
        let mut total = 0.0f64;
        for (i, s) in samples.iter().enumerate() {
            let bank_negs;
            let negs = match &state.store {
                Some(NegativeStore::Bank(bank)) => {
                    let picked = bank.sample_ids(s.video_id, cfg.contrastive.num_negatives, neg_rng);
                    bank_negs = bank.gather(&picked);
                    Negatives::new(&bank_negs[..], e)
                }
                _ => Negatives::new(&queue_negs[..], e),
            };
            let pos = &positives[i * e..(i + 1) * e];
            for v in views.iter_mut() {
                let pair = nce_pair_loss_with_grad(&v.q[i * e..(i + 1) * e], pos, &negs, tau)?;
                total += f64::from(pair.loss);
                for (acc, g) in v.dq[i * e..(i + 1) * e].iter_mut().zip(&pair.d_aug) {
                    *acc += g * inv_b;
                }
                if !moco {
                    for (acc, g) in d_pos[i * e..(i + 1) * e].iter_mut().zip(&pair.d_orig) {
                        *acc += g * inv_b;
                    }
                }
            }
        }
        contrast_loss = Some(total / b as f64);

        for v in views {
            let m = v.slots[0].len();
            let dz = match &v.norms {
                None => v.dq,
                Some(norms) => {
                    let du = l2_normalize_rows_backward(&v.q, norms, &v.dq, e);
                    let mut dz = vec![0.0f32; b * m * e];
                    for i in 0..b {
                        for j in 0..m {
                            for (d, g) in dz[(i * m + j) * e..(i * m + j + 1) * e]
                                .iter_mut()
                                .zip(&du[i * e..(i + 1) * e])
                            {
                                *d = *g / m as f32;
                            }
                        }
                    }
                    dz
                }
            };
            let head = state.net.projections.get_mut(&v.key).expect("head exists for view");
            let dx = head.backward(&v.trace, &dz);
            enc.add_grad(&batch, v.slots.iter().flatten().copied(), &dx);
        }
        if let Some(t) = orig_trace {
            let head = state.net.projections.get_mut(&ViewKey::Original).expect("original head");
            let dx = head.backward(&t, &d_pos);
            enc.add_grad(&batch, orig_slots.iter().copied(), &dx);
        }
        positives_for_store = positives;
    }

    let mut task_loss = BTreeMap::new();
    let mut task_accuracy = BTreeMap::new();
    let mut task_total = 0.0f64;
    if cfg.mode.has_task_heads() {
        let weight = match cfg.mode {
            TrainMode::Taco if cfg.objective.lambda > 0.0 => Some(cfg.objective.lambda as f32),
            TrainMode::TaskOnly => Some(1.0),
            _ => None,
        };
        for (k, kind) in cfg.transforms.iter().enumerate() {
            let slots = &outcome_slots[k];
            let labels: Vec<usize> = samples.iter().map(|s| s.outcomes[k].task_label).collect();
            let x = enc.rows(&batch, slots.iter().flatten().copied());
            let head = state.net.task_heads.get_mut(kind).expect("task head exists");
            let classes = head.num_classes();
            let (logits, trace) = head.forward(&x, b)?;
            let ce = batch_cross_entropy(&logits, classes, &labels)?;
            let mean = f64::from(ce.loss_sum) / b as f64;
            task_total += mean;
            task_loss.insert(kind.name().to_string(), mean);
            task_accuracy.insert(kind.name().to_string(), ce.correct as f64 / b as f64);
            if let Some(w) = weight {
                let scale = w * inv_b;
                let dlogits: Vec<f32> = ce.dlogits.iter().map(|g| g * scale).collect();
                let dx = head.backward(&trace, &dlogits, b);
                enc.add_grad(&batch, slots.iter().flatten().copied(), &dx);
            }
        }
    }
    let lambda = match cfg.mode {
        TrainMode::TaskOnly => 1.0,
        TrainMode::Taco => cfg.objective.lambda,
        _ => 0.0,
    };
    overall_loss(contrast_loss.unwrap_or(0.0), task_total, lambda)?;

    enc.backward(&mut state.net.encoder);
    let mut finite = true;
    state.net.visit("", &mut |_, p| finite &= p.grad.iter().all(|g| g.is_finite()));
    if !finite {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    state.optimizer.step(&mut state.net, lr)?;

    match &mut state.store {
        Some(NegativeStore::Bank(bank)) => {
            for (s, z) in samples.iter().zip(positives_for_store.chunks_exact(e)) {
                bank.update(s.video_id, z)?;
            }
        }
        Some(NegativeStore::Queue(queue)) => {
            let keys: Vec<Vec<f32>> = positives_for_store.chunks_exact(e).map(|k| k.to_vec()).collect();
            queue.push(&keys)?;
            let m = cfg.contrastive.key_momentum as f32;
            let key = state.key.as_mut().expect("momentum variant keeps a key network");
            momentum_encoder_update(&mut key.encoder, &state.net.encoder, m)?;
            momentum_encoder_update(&mut key.projection, &state.net.projections[&ViewKey::Original], m)?;
        }
        None => {}
    }

    Ok(StepResult {
        contrast_loss,
        task_loss,
        task_accuracy,
        static_clips,
    })
}

/// Limits on one training session.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Stop (with a checkpoint) after this many epochs in this session.
    pub max_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs_completed: usize,
    pub finished: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunSummary {
    label: String,
    config_hash: String,
    epochs_completed: usize,
    global_step: u64,
    finished: bool,
}

fn epoch_header(cfg: &ExperimentConfig) -> String {
    let mut cols = vec!["epoch".to_string(), "steps".into(), "contrast_loss".into()];
    for k in task_kinds(cfg) {
        cols.push(format!("{}_loss", k.name()));
        cols.push(format!("{}_accuracy", k.name()));
    }
    cols.push("static_clips".into());
    cols.push("final_lr".into());
    cols.join(",")
}

fn epoch_row(cfg: &ExperimentConfig, s: &EpochSummary) -> String {
    let mut cols = vec![
        s.epoch.to_string(),
        s.steps.to_string(),
        s.contrast_loss.map(|v| v.to_string()).unwrap_or_default(),
    ];
    for k in task_kinds(cfg) {
        cols.push(s.task_loss.get(k.name()).map(|v| v.to_string()).unwrap_or_default());
        cols.push(s.task_accuracy.get(k.name()).map(|v| v.to_string()).unwrap_or_default());
    }
    cols.push(s.static_clips.to_string());
    cols.push(s.final_lr.to_string());
    cols.join(",")
}

/// Parses `epochs.csv` of a run directory.
pub fn read_epoch_summaries(run_dir: &Path) -> Result<Vec<EpochSummary>> {
    let text = fs::read_to_string(run_dir.join(EPOCHS_FILE))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::Report(format!("bad number `{s}` in {EPOCHS_FILE}: {e}")))
        }
    };
    let mut out = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Report(format!("ragged row in {EPOCHS_FILE}: {line}")));
        }
        let mut s = EpochSummary {
            epoch: 0,
            steps: 0,
            contrast_loss: None,
            task_loss: BTreeMap::new(),
            task_accuracy: BTreeMap::new(),
            static_clips: 0,
            final_lr: 0.0,
        };
        for (h, c) in header.iter().zip(&cells) {
            let v = parse(c)?;
            match *h {
                "epoch" => s.epoch = v.unwrap_or(0.0) as usize,
                "steps" => s.steps = v.unwrap_or(0.0) as usize,
                "contrast_loss" => s.contrast_loss = v,
                "static_clips" => s.static_clips = v.unwrap_or(0.0) as usize,
                "final_lr" => s.final_lr = v.unwrap_or(0.0),
                other => {
                    if let (Some(task), Some(v)) = (other.strip_suffix("_loss"), v) {
                        s.task_loss.insert(task.to_string(), v);
                    } else if let (Some(task), Some(v)) = (other.strip_suffix("_accuracy"), v) {
                        s.task_accuracy.insert(task.to_string(), v);
                    }
                }
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(run_dir.join(METRICS_FILE))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

/// Keeps the header plus lines whose leading epoch is below `epochs`.
fn truncate_epochs_csv(path: &Path, epochs: usize) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut kept: Vec<&str> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < epochs);
        if keep {
            kept.push(line);
        }
    }
    fs::write(path, kept.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    Ok(())
}

fn truncate_metrics(path: &Path, epochs: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::new();
    for line in text.lines() {
        let rec: MetricsRecord = serde_json::from_str(line)?;
        if rec.epoch < epochs {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn write_summary(run_dir: &Path, state: &TrainState) -> Result<()> {
    let summary = RunSummary {
        label: state.config.label(),
        config_hash: state.config.hash()?,
        epochs_completed: state.epochs_completed,
        global_step: state.global_step,
        finished: state.finished(),
    };
    fs::write(run_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn run_epochs(mut state: TrainState, dataset: &Dataset, run_dir: &Path, opts: RunOptions) -> Result<RunOutcome> {
    let cfg = state.config.clone();
    let n = dataset.len();
    let spe = steps_per_epoch(n, &cfg);
    let peak = cfg.schedule.scaled_lr(cfg.batch_size);
    let started = Instant::now();
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let mut metrics = append(&run_dir.join(METRICS_FILE))?;
    let mut epochs_csv = append(&run_dir.join(EPOCHS_FILE))?;
    let session_start = state.epochs_completed;
    let tasks = task_kinds(&cfg);

    while !state.finished() {
        if opts.max_epochs.is_some_and(|m| state.epochs_completed - session_start >= m) {
            break;
        }
        let epoch = state.epochs_completed;
        let mut order: Vec<usize> = (0..cfg.clips_per_video).flat_map(|_| 0..n).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, "order", epoch as u64));
        let mut view_rng = seeding::stream(cfg.seed, "views", epoch as u64);
        let mut neg_rng = seeding::stream(cfg.seed, "negatives", epoch as u64);

        let mut contrast_sum = 0.0;
        let mut task_loss_sum: BTreeMap<String, f64> = BTreeMap::new();
        let mut task_correct: BTreeMap<String, f64> = BTreeMap::new();
        let mut seen = 0usize;
        let mut static_clips = 0;
        let mut last_lr = 0.0;
        for (step, ids) in order.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(state.global_step as i64 + 1, spe, peak, &cfg.schedule).map_err(|e| Error::Run {
                epoch,
                step,
                source: Box::new(e),
            })?;
            let r = train_step(&mut state, dataset, ids, lr as f32, &mut view_rng, &mut neg_rng).map_err(|e| {
                Error::Run {
                    epoch,
                    step,
                    source: Box::new(e),
                }
            })?;
            let bsz = ids.len() as f64;
            seen += ids.len();
            contrast_sum += r.contrast_loss.unwrap_or(0.0) * bsz;
            for (k, v) in &r.task_loss {
                *task_loss_sum.entry(k.clone()).or_default() += v * bsz;
            }
            for (k, v) in &r.task_accuracy {
                *task_correct.entry(k.clone()).or_default() += v * bsz;
            }
            static_clips += r.static_clips;
            last_lr = lr;
            let rec = MetricsRecord {
                epoch,
                step,
                global_step: state.global_step,
                lr,
                contrast_loss: r.contrast_loss,
                task_loss: r.task_loss,
                task_accuracy: r.task_accuracy,
                static_clips: r.static_clips,
                wall_time: started.elapsed().as_secs_f64(),
            };
            writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
            state.global_step += 1;
        }
        state.epochs_completed += 1;
        if let Some(store) = &state.store {
            store.check_invariants(STORE_NORM_TOLERANCE).map_err(|e| Error::Run {
                epoch,
                step: spe,
                source: Box::new(e),
            })?;
        }
        let seen_f = seen as f64;
        let summary = EpochSummary {
            epoch,
            steps: spe,
            contrast_loss: cfg.mode.uses_contrastive().then(|| contrast_sum / seen_f),
            task_loss: tasks
                .iter()
                .map(|k| (k.name().to_string(), task_loss_sum.get(k.name()).copied().unwrap_or(0.0) / seen_f))
                .collect(),
            task_accuracy: tasks
                .iter()
                .map(|k| (k.name().to_string(), task_correct.get(k.name()).copied().unwrap_or(0.0) / seen_f))
                .collect(),
            static_clips,
            final_lr: last_lr,
        };
        writeln!(epochs_csv, "{}", epoch_row(&cfg, &summary))?;
        log::info!(
            "{} epoch {}/{}: contrast {:?} task acc {:?}",
            cfg.label(),
            epoch + 1,
            cfg.schedule.total_epochs,
            summary.contrast_loss,
            summary.task_accuracy
        );
        let periodic = cfg.checkpoint_every > 0 && state.epochs_completed % cfg.checkpoint_every == 0;
        if periodic {
            checkpoint::save(&state, &ckpt_path)?;
        }
    }
    metrics.flush()?;
    epochs_csv.flush()?;
    checkpoint::save(&state, &ckpt_path)?;
    write_summary(run_dir, &state)?;
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        checkpoint: ckpt_path,
        epochs_completed: state.epochs_completed,
        finished: state.finished(),
    })
}

/// Loads the configured dataset and trains from scratch into `run_dir`.
pub fn pretrain(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    pretrain_on(cfg, &dataset, run_dir, RunOptions::default())
}

/// Trains from scratch on an already loaded dataset, replacing any previous run files.
pub fn pretrain_on(cfg: &ExperimentConfig, dataset: &Dataset, run_dir: &Path, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    fs::write(run_dir.join(METRICS_FILE), "")?;
    fs::write(run_dir.join(EPOCHS_FILE), epoch_header(cfg) + "\n")?;
    let _ = fs::remove_file(run_dir.join(CHECKPOINT_FILE));
    let state = TrainState::init(cfg, dataset.len())?;
    run_epochs(state, dataset, run_dir, opts)
}

/// Continues the run in `run_dir` from its checkpoint. When `expected` is given,
/// its hash must equal the one the run was started with.
pub fn resume_on(
    run_dir: &Path,
    dataset: &Dataset,
    expected: Option<&ExperimentConfig>,
    opts: RunOptions,
) -> Result<RunOutcome> {
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let header = checkpoint::read_header(&ckpt_path)?;
    let on_disk = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let disk_hash = on_disk.hash()?;
    if disk_hash != header.config_hash {
        return Err(Error::Checkpoint {
            path: ckpt_path,
            reason: format!(
                "config hash mismatch: {CONFIG_FILE} hashes to {disk_hash}, checkpoint was written by {}",
                header.config_hash
            ),
        });
    }
    if let Some(cfg) = expected {
        let h = cfg.hash()?;
        if h != header.config_hash {
            return Err(Error::Checkpoint {
                path: ckpt_path,
                reason: format!(
                    "config hash mismatch: requested config hashes to {h}, run was started with {}",
                    header.config_hash
                ),
            });
        }
    }
    let state = checkpoint::load(&ckpt_path)?;
    if state.finished() {
        log::info!(
            "run in {} already finished ({} epochs); nothing to do",
            run_dir.display(),
            state.epochs_completed
        );
        return Ok(RunOutcome {
            run_dir: run_dir.to_path_buf(),
            checkpoint: ckpt_path,
            epochs_completed: state.epochs_completed,
            finished: true,
        });
    }
    truncate_metrics(&run_dir.join(METRICS_FILE), state.epochs_completed)?;
    truncate_epochs_csv(&run_dir.join(EPOCHS_FILE), state.epochs_completed)?;
    run_epochs(state, dataset, run_dir, opts)
}

pub fn resume(run_dir: &Path) -> Result<RunOutcome> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let dataset = cfg.dataset.load()?;
    resume_on(run_dir, &dataset, None, RunOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSource;
    use crate::encoder::EncoderConfig;
    use crate::videodata::SyntheticDatasetConfig;

    pub(crate) fn small_config(mode: TrainMode, transforms: Vec<TransformKind>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            mode,
            transforms,
            dataset: DatasetSource::Synthetic(SyntheticDatasetConfig {
                num_videos: 16,
                length: 48,
                ..Default::default()
            }),
            encoder: EncoderConfig::tiny(),
            batch_size: 4,
            ..Default::default()
        };
        cfg.heads.embed_dim = 16;
        cfg.heads.task_hidden = 16;
        cfg.contrastive.num_negatives = 8;
        cfg.contrastive.queue_size = 12;
        cfg.schedule.total_epochs = 2;
        cfg.schedule.warmup_epochs = 1;
        cfg
    }

    fn strip_wall(run: &Path) -> Vec<MetricsRecord> {
        read_metrics(run)
            .unwrap()
            .into_iter()
            .map(|mut r| {
                r.wall_time = 0.0;
                r
            })
            .collect()
    }

    #[test]
    fn bookkeeping_and_determinism() {
        let cfg = small_config(TrainMode::Taco, vec![TransformKind::Reverse, TransformKind::Shuffle]);
        let ds = cfg.dataset.load().unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let out = pretrain_on(&cfg, &ds, a.path(), RunOptions::default()).unwrap();
        assert!(out.finished);
        pretrain_on(&cfg, &ds, b.path(), RunOptions::default()).unwrap();
        let ma = strip_wall(a.path());
        assert_eq!(ma.len(), 2 * 4);
        assert!(ma.iter().zip(ma.iter().skip(1)).all(|(x, y)| (x.epoch, x.step) < (y.epoch, y.step)));
        assert_eq!(ma, strip_wall(b.path()));
        assert_eq!(
            fs::read(a.path().join(CHECKPOINT_FILE)).unwrap(),
            fs::read(b.path().join(CHECKPOINT_FILE)).unwrap()
        );
        let epochs = read_epoch_summaries(a.path()).unwrap();
        assert_eq!(epochs.len(), 2);
        assert!(epochs[0].task_accuracy.contains_key("shuffle"));
    }

    #[test]
    fn every_mode_and_variant_runs() {
        for (mode, kinds) in [
            (TrainMode::Baseline, vec![]),
            (TrainMode::AugOnly, vec![TransformKind::Speed]),
            (TrainMode::TaskOnly, vec![TransformKind::RotationJitter, TransformKind::ClipOrder]),
        ] {
            let cfg = small_config(mode, kinds);
            let ds = cfg.dataset.load().unwrap();
            let dir = tempfile::tempdir().unwrap();
            pretrain_on(&cfg, &ds, dir.path(), RunOptions::default()).unwrap();
        }
        let mut cfg = small_config(TrainMode::Taco, vec![TransformKind::Speed]);
        cfg.contrastive.variant = ContrastiveVariant::Moco;
        let ds = cfg.dataset.load().unwrap();
        let dir = tempfile::tempdir().unwrap();
        pretrain_on(&cfg, &ds, dir.path(), RunOptions::default()).unwrap();
        let state = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        match state.store {
            Some(NegativeStore::Queue(q)) => assert_eq!(q.len(), 12),
            other => panic!("expected a queue, got {other:?}"),
        }
    }

    #[test]
    fn resume_refuses_changed_config_and_noops_when_done() {
        let cfg = small_config(TrainMode::Taco, vec![TransformKind::Reverse]);
        let ds = cfg.dataset.load().unwrap();
        let dir = tempfile::tempdir().unwrap();
        pretrain_on(&cfg, &ds, dir.path(), RunOptions::default()).unwrap();
        let before = fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        let out = resume_on(dir.path(), &ds, Some(&cfg), RunOptions::default()).unwrap();
        assert!(out.finished);
        assert_eq!(before, fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap());

        let mut other = cfg.clone();
        other.objective.lambda = 1.0;
        let err = resume_on(dir.path(), &ds, Some(&other), RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("config hash mismatch"), "{err}");
    }

    #[test]
    fn too_short_videos_abort_with_step() {
        let mut cfg = small_config(TrainMode::Taco, vec![TransformKind::Speed]);
        cfg.clip.stride = 8;
        let ds = cfg.dataset.load().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = pretrain_on(&cfg, &ds, dir.path(), RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Run { epoch: 0, step: 0, .. }), "{err}");
    }
}
