//! Downstream protocols: linear probe, full finetuning, multi-clip inference,
//! and finetuning on a pretext task.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{pack_clips, Encoder, TaskHead};
use crate::error::{Error, Result};
use crate::nn::{softmax, HasParams, Linear};
use crate::objective::{argmax, batch_cross_entropy, Sgd};
use crate::seeding;
use crate::transforms::{apply_transform_set, TransformConfigs, TransformKind, TransformSet};
use crate::videodata::{sample_clip, uniform_starts, Clip, ClipSampleConfig, Dataset, Video};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    FullFinetune,
    LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Clips averaged per test video.
    pub test_clips: usize,
    /// Uniformly spaced clips per training video for the probe's cached features.
    pub train_clips: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::linear_probe(60)
    }
}

/// Scales milestones given for `of` epochs to `epochs`.
pub fn scale_milestones(milestones: &[usize], of: usize, epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = milestones
        .iter()
        .map(|m| ((m * epochs) as f64 / of as f64).round() as usize)
        .filter(|m| *m > 0 && *m < epochs)
        .collect();
    out.dedup();
    out
}

impl EvalConfig {
    /// Probe schedule: decay by 10 at epochs 30, 40 and 50 of 60, rescaled to `epochs`.
    pub fn linear_probe(epochs: usize) -> Self {
        Self {
            mode: EvalMode::LinearProbe,
            epochs,
            lr: 0.5,
            milestones: scale_milestones(&[30, 40, 50], 60, epochs),
            decay: 10.0,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0,
            test_clips: 10,
            train_clips: 4,
            seed: 0,
        }
    }

    /// Finetuning schedule: decay by 10 at epochs 50, 100 and 150 of 200, rescaled.
    pub fn full_finetune(epochs: usize) -> Self {
        Self {
            mode: EvalMode::FullFinetune,
            epochs,
            lr: 0.05,
            milestones: scale_milestones(&[50, 100, 150], 200, epochs),
            decay: 10.0,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            test_clips: 10,
            train_clips: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("eval milestones must be strictly increasing"));
        }
        if self.milestones.iter().any(|m| *m >= self.epochs.max(1)) {
            return Err(Error::config("eval milestones must lie within the epoch range"));
        }
        if !(self.lr > 0.0) || !(self.decay >= 1.0) {
            return Err(Error::config("eval lr must be > 0 and decay ≥ 1"));
        }
        if self.batch_size == 0 || self.test_clips == 0 || self.train_clips == 0 {
            return Err(Error::config("eval batch size and clip counts must be ≥ 1"));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|m| epoch >= **m).count();
        self.lr / self.decay.powi(drops as i32)
    }
}

/// SHA-256 over every encoder parameter value.
pub fn encoder_checksum(encoder: &Encoder<f32>) -> String {
    let mut h = Sha256::new();
    encoder.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Per-dimension standardization fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(features: &[f32], dim: usize) -> Self {
        let n = (features.len() / dim).max(1) as f64;
        let mut mean = vec![0.0f64; dim];
        let mut var = vec![0.0f64; dim];
        for row in features.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += f64::from(*v) / n;
            }
        }
        for row in features.chunks_exact(dim) {
            for ((s, m), v) in var.iter_mut().zip(&mean).zip(row) {
                *s += (f64::from(*v) - m).powi(2) / n;
            }
        }
        Self {
            mean: mean.iter().map(|m| *m as f32).collect(),
            inv_std: var.iter().map(|v| (1.0 / (v.sqrt() + 1e-6)) as f32).collect(),
        }
    }

    pub fn apply(&self, features: &mut [f32]) {
        let d = self.mean.len();
        for row in features.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
    }
}

/// Encoder plus a linear classifier over (optionally standardized) features.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder<f32>,
    pub standardizer: Option<Standardizer>,
    pub head: Linear<f32>,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.head.out_dim
    }

    /// Softmax probabilities for each clip, `[n][classes]`.
    pub fn clip_probabilities(&self, clips: &[&Clip]) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for chunk in clips.chunks(64) {
            let mut feats = self.encoder.encode_batch(chunk)?;
            if let Some(s) = &self.standardizer {
                s.apply(&mut feats);
            }
            let logits = self.head.forward(&feats, chunk.len());
            for row in logits.chunks_exact(self.num_classes()) {
                out.extend(softmax(row));
            }
        }
        Ok(out)
    }
}

/// `num_clips` uniformly spaced clips, softmax outputs averaged; returns the argmax and the mean.
pub fn eval_multiclip(
    model: &Classifier,
    video: &Video,
    clip_cfg: &ClipSampleConfig,
    num_clips: usize,
) -> Result<(usize, Vec<f32>)> {
    if num_clips == 0 {
        return Err(Error::config("num_clips must be ≥ 1"));
    }
    if video.length < clip_cfg.span() {
        return Err(Error::VideoTooShort {
            video_id: video.id,
            length: video.length,
            required: clip_cfg.span(),
        });
    }
    let clips = uniform_clips(video, clip_cfg, num_clips)?;
    let refs: Vec<&Clip> = clips.iter().collect();
    let probs = model.clip_probabilities(&refs)?;
    let c = model.num_classes();
    let mut mean = vec![0.0f64; c];
    for row in probs.chunks_exact(c) {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += f64::from(*p);
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (*m / num_clips as f64) as f32).collect();
    Ok((argmax(&mean), mean))
}

/// Clip at `start`; unlike the training sampler only the span has to fit.
pub fn clip_at(video: &Video, clip_cfg: &ClipSampleConfig, start: usize) -> Result<Clip> {
    if start + clip_cfg.span() > video.length {
        return Err(Error::VideoTooShort {
            video_id: video.id,
            length: video.length,
            required: start + clip_cfg.span(),
        });
    }
    Clip::gather(
        video,
        &clip_cfg.indices(start),
        crate::videodata::Provenance {
            video_id: video.id,
            start,
            stride: clip_cfg.stride,
        },
    )
}

fn uniform_clips(video: &Video, clip_cfg: &ClipSampleConfig, count: usize) -> Result<Vec<Clip>> {
    let max_start = video.length - clip_cfg.span();
    uniform_starts(max_start, count)
        .into_iter()
        .map(|s| clip_at(video, clip_cfg, s))
        .collect()
}

fn labels_of(ds: &Dataset) -> Result<Vec<usize>> {
    ds.videos()
        .iter()
        .map(|v| {
            v.class_label
                .ok_or_else(|| Error::config(format!("video {} has no class label", v.id)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub num_test: usize,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
}

fn test_accuracy(model: &Classifier, test: &Dataset, clip_cfg: &ClipSampleConfig, cfg: &EvalConfig) -> Result<f64> {
    let labels = labels_of(test)?;
    let mut correct = 0usize;
    for (v, y) in test.videos().iter().zip(&labels) {
        if *y >= model.num_classes() {
            return Err(Error::Label {
                label: *y,
                label_space: model.num_classes(),
            });
        }
        if eval_multiclip(model, v, clip_cfg, cfg.test_clips)?.0 == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len().max(1) as f64)
}

/// Trains only a linear classifier on frozen features and reports multi-clip test accuracy.
pub fn linear_probe(
    encoder: &Encoder<f32>,
    train: &Dataset,
    test: &Dataset,
    clip_cfg: &ClipSampleConfig,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let before = encoder_checksum(encoder);
    let labels = labels_of(train)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let d = encoder.feature_dim();

    let mut feats = Vec::with_capacity(train.len() * cfg.train_clips * d);
    let mut ys = Vec::with_capacity(train.len() * cfg.train_clips);
    for (v, y) in train.videos().iter().zip(&labels) {
        let clips = uniform_clips(v, clip_cfg, cfg.train_clips)?;
        let refs: Vec<&Clip> = clips.iter().collect();
        feats.extend(encoder.encode_batch(&refs)?);
        ys.extend(std::iter::repeat_n(*y, clips.len()));
    }
    let standardizer = Standardizer::fit(&feats, d);
    standardizer.apply(&mut feats);

    let mut rng = seeding::stream(cfg.seed, "probe-init", 0);
    let mut head = Linear::<f32>::new(d, classes, true, &mut rng);
    let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let n = ys.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch) as f32;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, "probe-order", epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let x: Vec<f32> = idx.iter().flat_map(|&i| feats[i * d..(i + 1) * d].iter().copied()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
            head.zero_grad();
            let logits = head.forward(&x, b);
            let ce = batch_cross_entropy(&logits, classes, &y)?;
            let scale = 1.0 / b as f32;
            let dl: Vec<f32> = ce.dlogits.iter().map(|g| g * scale).collect();
            head.backward(&x, &dl, b);
            opt.step(&mut head, lr)?;
        }
    }
    let model = Classifier {
        encoder: encoder.clone(),
        standardizer: Some(standardizer),
        head,
    };
    let accuracy = test_accuracy(&model, test, clip_cfg, cfg)?;
    let after = encoder_checksum(&model.encoder);
    if after != before || encoder_checksum(encoder) != before {
        return Err(Error::Structure("linear probe modified the backbone".into()));
    }
    Ok(EvalResult {
        accuracy,
        num_test: test.len(),
        encoder_checksum_before: before,
        encoder_checksum_after: after,
    })
}

/// Trains the encoder and a fresh linear classifier end to end.
pub fn finetune_full(
    encoder: &Encoder<f32>,
    train: &Dataset,
    test: &Dataset,
    clip_cfg: &ClipSampleConfig,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let before = encoder_checksum(encoder);
    let labels = labels_of(train)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let d = encoder.feature_dim();
    let mut rng = seeding::stream(cfg.seed, "finetune-init", 0);
    let mut model = Classifier {
        encoder: encoder.clone(),
        standardizer: None,
        head: Linear::<f32>::new(d, classes, true, &mut rng),
    };
    let mut opt_enc = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut opt_head = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch) as f32;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, "finetune-order", epoch as u64));
        let mut clip_rng = seeding::stream(cfg.seed, "finetune-clips", epoch as u64);
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let clips = idx
                .iter()
                .map(|&i| sample_clip(&train.videos()[i], clip_cfg, &mut clip_rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Clip> = clips.iter().collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (x, e) = pack_clips::<f32>(&refs)?;
            model.encoder.zero_grad();
            model.head.zero_grad();
            let (h, trace) = model.encoder.forward(&x, e)?;
            let logits = model.head.forward(&h, b);
            let ce = batch_cross_entropy(&logits, classes, &y)?;
            if !ce.loss_sum.is_finite() {
                return Err(Error::NonFinite(format!("finetune loss at epoch {epoch}")));
            }
            let scale = 1.0 / b as f32;
            let dl: Vec<f32> = ce.dlogits.iter().map(|g| g * scale).collect();
            let dh = model.head.backward(&h, &dl, b);
            model.encoder.backward(trace, &dh);
            opt_enc.step(&mut model.encoder, lr)?;
            opt_head.step(&mut model.head, lr)?;
        }
    }
    let accuracy = test_accuracy(&model, test, clip_cfg, cfg)?;
    Ok(EvalResult {
        accuracy,
        num_test: test.len(),
        encoder_checksum_before: before,
        encoder_checksum_after: encoder_checksum(&model.encoder),
    })
}

/// Trains a fresh head for `kind` (the encoder too unless `cfg.mode` is a probe) and
/// returns pretext accuracy on `test`, one transform draw per video.
pub fn finetune_task(
    encoder: &Encoder<f32>,
    kind: TransformKind,
    train: &Dataset,
    test: &Dataset,
    clip_cfg: &ClipSampleConfig,
    transform_cfg: &TransformConfigs,
    hidden: usize,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let before = encoder_checksum(encoder);
    let set = TransformSet::new(vec![kind])?;
    let mut rng = seeding::stream(cfg.seed, "task-init", 0);
    let mut enc = encoder.clone();
    let mut head = TaskHead::<f32>::for_kind(kind, enc.feature_dim(), hidden, transform_cfg, &mut rng);
    let classes = head.num_classes();
    let train_encoder = cfg.mode == EvalMode::FullFinetune;
    let mut opt_enc = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut opt_head = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);

    let draw = |video: &Video, rng: &mut seeding::StreamRng| -> Result<(Vec<Clip>, usize)> {
        let mut o = apply_transform_set(video, &set, transform_cfg, clip_cfg, rng)?;
        let o = o.remove(0);
        Ok((o.clips, o.task_label))
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch) as f32;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, "task-order", epoch as u64));
        let mut view_rng = seeding::stream(cfg.seed, "task-views", epoch as u64);
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let mut clips = Vec::new();
            let mut y = Vec::new();
            for &i in idx {
                let (c, l) = draw(&train.videos()[i], &mut view_rng)?;
                clips.extend(c);
                y.push(l);
            }
            let refs: Vec<&Clip> = clips.iter().collect();
            let (x, e) = pack_clips::<f32>(&refs)?;
            enc.zero_grad();
            head.zero_grad();
            let (h, trace) = enc.forward(&x, e)?;
            let (logits, ttrace) = head.forward(&h, b)?;
            let ce = batch_cross_entropy(&logits, classes, &y)?;
            let scale = 1.0 / b as f32;
            let dl: Vec<f32> = ce.dlogits.iter().map(|g| g * scale).collect();
            let dh = head.backward(&ttrace, &dl, b);
            if train_encoder {
                enc.backward(trace, &dh);
                opt_enc.step(&mut enc, lr)?;
            }
            opt_head.step(&mut head, lr)?;
        }
    }

    let mut test_rng = seeding::stream(cfg.seed, "task-test", 0);
    let mut correct = 0;
    for chunk in test.videos().chunks(64) {
        let mut clips = Vec::new();
        let mut y = Vec::new();
        for v in chunk {
            let (c, l) = draw(v, &mut test_rng)?;
            clips.extend(c);
            y.push(l);
        }
        let refs: Vec<&Clip> = clips.iter().collect();
        let h = enc.encode_batch(&refs)?;
        let logits = head.logits(&h, chunk.len())?;
        correct += batch_cross_entropy(&logits, classes, &y)?.correct;
    }
    let after = encoder_checksum(&enc);
    if !train_encoder && after != before {
        return Err(Error::Structure("probe-mode task finetuning modified the backbone".into()));
    }
    Ok(EvalResult {
        accuracy: correct as f64 / test.len().max(1) as f64,
        num_test: test.len(),
        encoder_checksum_before: before,
        encoder_checksum_after: after,
    })
}

/// Single-clip prediction, used as the reference for multi-clip inference.
pub fn predict_clip(model: &Classifier, video: &Video, clip_cfg: &ClipSampleConfig, start: usize) -> Result<Vec<f32>> {
    let clip = clip_at(video, clip_cfg, start)?;
    model.clip_probabilities(&[&clip])
}
