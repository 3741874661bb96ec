//! Base encoder `f`, projection heads `g` and pretext task heads `t`.
//!
//! All modules are generic over [`Real`]: training uses `f32`, gradient
//! checks run the identical code at `f64`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, l2_normalize_rows, l2_normalize_rows_backward, relu_backward_inplace, relu_inplace, Conv3d, Extent, GroupNorm, GroupNormTrace,
    HasParams, Linear, Param, Real,
};
use crate::transforms::{Clip, TransformConfigs, TransformKind};
use crate::videodata::CHANNELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    /// `[t, h, w]`
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub stem_padding: [usize; 3],
    pub stages: Vec<StageConfig>,
    /// Group count of the normalization after every convolution.
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    /// Four residual stages of widths 16/32/64/128.
    fn default() -> Self {
        let stage = |channels, stride| StageConfig {
            channels,
            kernel: [3, 3, 3],
            stride,
        };
        Self {
            stem_channels: 16,
            stem_kernel: [1, 3, 3],
            stem_stride: [1, 2, 2],
            stem_padding: [0, 1, 1],
            stages: vec![
                stage(16, [1, 1, 1]),
                stage(32, [1, 2, 2]),
                stage(64, [2, 2, 2]),
                stage(128, [2, 2, 2]),
            ],
            norm_groups: 4,
        }
    }
}

impl EncoderConfig {
    /// A compute-light variant for 32×32 inputs: patchifying stem over three frames, then two stages.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 16,
            stem_kernel: [3, 4, 4],
            stem_stride: [1, 4, 4],
            stem_padding: [1, 0, 0],
            stages: vec![
                StageConfig {
                    channels: 16,
                    kernel: [3, 3, 3],
                    stride: [2, 2, 2],
                },
                StageConfig {
                    channels: 32,
                    kernel: [3, 3, 3],
                    stride: [1, 2, 2],
                },
            ],
            norm_groups: 4,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim() < 8 {
            return Err(Error::config(format!("feature dimension must be ≥ 8, got {}", self.feature_dim())));
        }
        let bad = |k: &[usize; 3], s: &[usize; 3]| k.contains(&0) || s.contains(&0);
        if bad(&self.stem_kernel, &self.stem_stride) || self.stages.iter().any(|st| bad(&st.kernel, &st.stride)) {
            return Err(Error::config("kernel sizes and strides must be ≥ 1"));
        }
        if self.stem_channels == 0 || self.stages.iter().any(|s| s.channels == 0) {
            return Err(Error::config("channel widths must be ≥ 1"));
        }
        let widths = std::iter::once(self.stem_channels).chain(self.stages.iter().map(|s| s.channels));
        if self.norm_groups == 0 || widths.clone().any(|c| c % self.norm_groups != 0) {
            return Err(Error::config(format!(
                "norm_groups ({}) must divide every channel width",
                self.norm_groups
            )));
        }
        Ok(())
    }
}

/// Encoder output `h`, one vector of length `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub values: Vec<f32>,
}

/// Unit-norm output of a projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized { norm });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<S> {
    pub conv_a: Conv3d<S>,
    pub norm_a: GroupNorm<S>,
    pub conv_b: Conv3d<S>,
    pub norm_b: GroupNorm<S>,
    pub shortcut: Option<Conv3d<S>>,
}

struct BlockTrace<S> {
    input: Extent,
    cols_a: Vec<S>,
    norm_a: GroupNormTrace<S>,
    norm_b: GroupNormTrace<S>,
    mid: Vec<S>,
    mid_extent: Extent,
    cols_b: Vec<S>,
    cols_sc: Option<Vec<S>>,
    out: Vec<S>,
    out_extent: Extent,
}

impl<S: Real> ResidualBlock<S> {
    fn new<R: Rng + ?Sized>(cin: usize, cfg: &StageConfig, groups: usize, rng: &mut R) -> Self {
        let pad = cfg.kernel.map(|k| k / 2);
        let conv_a = Conv3d::new(cin, cfg.channels, cfg.kernel, cfg.stride, pad, rng);
        let conv_b = Conv3d::new(cfg.channels, cfg.channels, cfg.kernel, [1, 1, 1], pad, rng);
        // residual branch starts as zero so each block is initially its shortcut
        let mut norm_b = GroupNorm::new(cfg.channels, groups);
        norm_b.zero_init();
        let shortcut =
            (cin != cfg.channels || cfg.stride != [1, 1, 1]).then(|| Conv3d::new(cin, cfg.channels, [1, 1, 1], cfg.stride, [0, 0, 0], rng));
        Self {
            conv_a,
            norm_a: GroupNorm::new(cfg.channels, groups),
            conv_b,
            norm_b,
            shortcut,
        }
    }

    fn forward(&self, x: &[S], e: Extent) -> BlockTrace<S> {
        let (a, cols_a, mid_extent) = self.conv_a.forward(x, e);
        let (mut mid, norm_a) = self.norm_a.forward(&a, mid_extent);
        relu_inplace(&mut mid);
        let (b, cols_b, out_extent) = self.conv_b.forward(&mid, mid_extent);
        let (mut out, norm_b) = self.norm_b.forward(&b, out_extent);
        let cols_sc = match &self.shortcut {
            Some(sc) => {
                let (s, cols, se) = sc.forward(x, e);
                debug_assert_eq!(se, out_extent);
                out.iter_mut().zip(&s).for_each(|(o, v)| *o += *v);
                Some(cols)
            }
            None => {
                out.iter_mut().zip(x).for_each(|(o, v)| *o += *v);
                None
            }
        };
        relu_inplace(&mut out);
        BlockTrace {
            input: e,
            cols_a,
            norm_a,
            norm_b,
            mid,
            mid_extent,
            cols_b,
            cols_sc,
            out,
            out_extent,
        }
    }

    fn backward(&mut self, trace: BlockTrace<S>, mut dout: Vec<S>, need_dx: bool) -> Option<Vec<S>> {
        relu_backward_inplace(&trace.out, &mut dout);
        let db = self.norm_b.backward(&trace.norm_b, &dout, trace.out_extent);
        let mut dmid = self
            .conv_b
            .backward(&trace.cols_b, trace.mid_extent, trace.out_extent, &db, true)
            .expect("dx requested");
        relu_backward_inplace(&trace.mid, &mut dmid);
        let da = self.norm_a.backward(&trace.norm_a, &dmid, trace.mid_extent);
        let dx_a = self
            .conv_a
            .backward(&trace.cols_a, trace.input, trace.mid_extent, &da, need_dx);
        let dx_sc = match (&mut self.shortcut, &trace.cols_sc) {
            (Some(sc), Some(cols)) => sc.backward(cols, trace.input, trace.out_extent, &dout, need_dx),
            _ => need_dx.then(|| dout.clone()),
        };
        match (dx_a, dx_sc) {
            (Some(mut a), Some(b)) => {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += *y);
                Some(a)
            }
            _ => None,
        }
    }
}

impl<S: Real> HasParams<S> for ResidualBlock<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.norm_a.visit(&join(prefix, "norm_a"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.norm_b.visit(&join(prefix, "norm_b"), f);
        if let Some(sc) = &self.shortcut {
            sc.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.norm_a.visit_mut(&join(prefix, "norm_a"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.norm_b.visit_mut(&join(prefix, "norm_b"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// 3D residual network ending in global spatiotemporal average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S> {
    pub config: EncoderConfig,
    pub stem: Conv3d<S>,
    pub stem_norm: GroupNorm<S>,
    pub blocks: Vec<ResidualBlock<S>>,
}

/// Intermediates kept by [`Encoder::forward`] for the backward pass.
pub struct EncoderTrace<S> {
    input: Extent,
    stem_cols: Vec<S>,
    stem_norm: GroupNormTrace<S>,
    stem_out: Vec<S>,
    stem_extent: Extent,
    blocks: Vec<BlockTrace<S>>,
}

/// Packs channels-last clips into the `[C][N][T][H][W]` layout.
pub fn pack_clips<S: Real>(clips: &[&Clip]) -> Result<(Vec<S>, Extent)> {
    let first = clips.first().ok_or_else(|| Error::shape("at least one clip", 0))?;
    let e = Extent {
        n: clips.len(),
        t: first.num_frames,
        h: first.height,
        w: first.width,
    };
    let plane = e.positions();
    let mut out = vec![S::zero(); CHANNELS * plane];
    for (n, clip) in clips.iter().enumerate() {
        if (clip.num_frames, clip.height, clip.width) != (e.t, e.h, e.w) {
            return Err(Error::shape(
                format!("{}×{}×{}", e.t, e.h, e.w),
                format!("{}×{}×{}", clip.num_frames, clip.height, clip.width),
            ));
        }
        let base = n * e.per_sample();
        for (p, px) in clip.frames.chunks_exact(CHANNELS).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + base + p] = S::lit(f64::from(*v));
            }
        }
    }
    Ok((out, e))
}

impl<S: Real> Encoder<S> {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = Conv3d::new(
            CHANNELS,
            config.stem_channels,
            config.stem_kernel,
            config.stem_stride,
            config.stem_padding,
            rng,
        );
        let mut cin = config.stem_channels;
        let blocks = config
            .stages
            .iter()
            .map(|st| {
                let b = ResidualBlock::new(cin, st, config.norm_groups, rng);
                cin = st.channels;
                b
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stem,
            stem_norm: GroupNorm::new(config.stem_channels, config.norm_groups),
            blocks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Output extent for an input extent, or an error naming the failing layer.
    pub fn check_extent(&self, e: Extent) -> Result<Extent> {
        let mut cur = self
            .stem
            .out_extent(e)
            .ok_or_else(|| Error::shape(format!("input at least {:?} (t,h,w)", self.stem.kernel), format!("{}×{}×{}", e.t, e.h, e.w)))?;
        for (i, b) in self.blocks.iter().enumerate() {
            cur = b.conv_a.out_extent(cur).ok_or_else(|| {
                Error::shape(
                    format!("stage {i} input at least {:?}", b.conv_a.kernel),
                    format!("{}×{}×{}", cur.t, cur.h, cur.w),
                )
            })?;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &[S], e: Extent) -> Result<(Vec<S>, EncoderTrace<S>)> {
        self.check_extent(e)?;
        let (stem_pre, stem_cols, stem_extent) = self.stem.forward(x, e);
        let (mut stem_out, stem_norm) = self.stem_norm.forward(&stem_pre, stem_extent);
        relu_inplace(&mut stem_out);
        let mut traces: Vec<BlockTrace<S>> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (input, ext) = match traces.last() {
                Some(t) => (&t.out, t.out_extent),
                None => (&stem_out, stem_extent),
            };
            let t = b.forward(input, ext);
            traces.push(t);
        }
        let (last, ext) = match traces.last() {
            Some(t) => (&t.out, t.out_extent),
            None => (&stem_out, stem_extent),
        };
        let feats = global_average_pool(last, ext, self.feature_dim());
        Ok((
            feats,
            EncoderTrace {
                input: e,
                stem_cols,
                stem_norm,
                stem_out,
                stem_extent,
                blocks: traces,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/dh` for every sample.
    pub fn backward(&mut self, trace: EncoderTrace<S>, dfeat: &[S]) {
        let d = self.feature_dim();
        let last_extent = trace.blocks.last().map_or(trace.stem_extent, |t| t.out_extent);
        let mut grad = global_average_pool_backward(dfeat, last_extent, d);
        let EncoderTrace {
            input,
            stem_cols,
            stem_norm,
            stem_out,
            stem_extent,
            blocks,
        } = trace;
        for (block, t) in self.blocks.iter_mut().zip(blocks).rev() {
            grad = block.backward(t, grad, true).expect("dx requested");
        }
        relu_backward_inplace(&stem_out, &mut grad);
        let grad = self.stem_norm.backward(&stem_norm, &grad, stem_extent);
        self.stem.backward(&stem_cols, input, stem_extent, &grad, false);
    }

    /// Inference on a batch of clips, returning row-major `[N][D]` features.
    pub fn encode_batch(&self, clips: &[&Clip]) -> Result<Vec<S>> {
        let (x, e) = pack_clips::<S>(clips)?;
        Ok(self.forward(&x, e)?.0)
    }
}

impl Encoder<f32> {
    pub fn encode(&self, clip: &Clip) -> Result<Feature> {
        Ok(Feature {
            values: self.encode_batch(&[clip])?,
        })
    }
}

fn global_average_pool<S: Real>(x: &[S], e: Extent, channels: usize) -> Vec<S> {
    let per = e.per_sample();
    let scale = S::one() / S::lit(per as f64);
    let mut out = vec![S::zero(); e.n * channels];
    for c in 0..channels {
        let plane = &x[c * e.positions()..(c + 1) * e.positions()];
        for n in 0..e.n {
            out[n * channels + c] = plane[n * per..(n + 1) * per].iter().copied().sum::<S>() * scale;
        }
    }
    out
}

fn global_average_pool_backward<S: Real>(dfeat: &[S], e: Extent, channels: usize) -> Vec<S> {
    let per = e.per_sample();
    let scale = S::one() / S::lit(per as f64);
    let mut dx = vec![S::zero(); channels * e.positions()];
    for c in 0..channels {
        for n in 0..e.n {
            let g = dfeat[n * channels + c] * scale;
            let start = c * e.positions() + n * per;
            dx[start..start + per].iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

impl<S: Real> HasParams<S> for Encoder<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stem_norm.visit(&join(prefix, "stem_norm"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stem_norm.visit_mut(&join(prefix, "stem_norm"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProjectionKind {
    Linear,
    Mlp { hidden: usize },
}

/// `z = normalize(W₁ h)` or `z = normalize(W₂ σ(W₁ h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<S> {
    pub first: Linear<S>,
    pub second: Option<Linear<S>>,
}

pub struct ProjectionTrace<S> {
    x: Vec<S>,
    hidden: Option<Vec<S>>,
    z: Vec<S>,
    norms: Vec<S>,
    n: usize,
}

impl<S> ProjectionTrace<S> {
    pub fn embeddings(&self) -> &[S] {
        &self.z
    }
}

impl<S: Real> ProjectionHead<S> {
    pub fn new<R: Rng + ?Sized>(kind: ProjectionKind, in_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        match kind {
            ProjectionKind::Linear => Self {
                first: Linear::new(in_dim, embed_dim, false, rng),
                second: None,
            },
            ProjectionKind::Mlp { hidden } => Self {
                first: Linear::new(in_dim, hidden, false, rng),
                second: Some(Linear::new(hidden, embed_dim, false, rng)),
            },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.second.as_ref().unwrap_or(&self.first).out_dim
    }

    pub fn forward(&self, x: &[S], n: usize) -> Result<ProjectionTrace<S>> {
        if x.len() != n * self.in_dim() {
            return Err(Error::shape(format!("{n}×{}", self.in_dim()), x.len()));
        }
        let mut h = self.first.forward(x, n);
        let (y, hidden) = match &self.second {
            Some(second) => {
                relu_inplace(&mut h);
                (second.forward(&h, n), Some(h))
            }
            None => (h, None),
        };
        let (z, norms) = l2_normalize_rows(&y, self.embed_dim());
        Ok(ProjectionTrace {
            x: x.to_vec(),
            hidden,
            z,
            norms,
            n,
        })
    }

    pub fn backward(&mut self, trace: &ProjectionTrace<S>, dz: &[S]) -> Vec<S> {
        let dy = l2_normalize_rows_backward(&trace.z, &trace.norms, dz, self.embed_dim());
        match (&mut self.second, &trace.hidden) {
            (Some(second), Some(h)) => {
                let mut dh = second.backward(h, &dy, trace.n);
                relu_backward_inplace(h, &mut dh);
                self.first.backward(&trace.x, &dh, trace.n)
            }
            _ => self.first.backward(&trace.x, &dy, trace.n),
        }
    }
}

impl<S: Real> HasParams<S> for ProjectionHead<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.first.visit(&join(prefix, "fc1"), f);
        if let Some(s) = &self.second {
            s.visit(&join(prefix, "fc2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.first.visit_mut(&join(prefix, "fc1"), f);
        if let Some(s) = &mut self.second {
            s.visit_mut(&join(prefix, "fc2"), f);
        }
    }
}

impl ProjectionHead<f32> {
    pub fn project(&self, feature: &Feature) -> Result<EmbeddingVector> {
        let trace = self.forward(&feature.values, 1)?;
        EmbeddingVector::new(trace.z)
    }
}

/// How a task head fuses its branch activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// `Σ_{i<j} (a_i − a_j)`, a `d`-dimensional vector.
    SumOfDifferences,
    /// `[a_i − a_j]_{i<j}` concatenated.
    ConcatDifferences,
}

/// Pretext task heads; every variant ends in unnormalized logits.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskHead<S> {
    /// `logits = W₂ normalize(W₁ h) + b₂` (rotation, reverse).
    Normalized { fc1: Linear<S>, fc2: Linear<S> },
    /// Per-branch `relu(W h + b)`, pairwise-difference fusion, then `fc2(relu(fc1(·)))`
    /// (shuffle, clip order).
    MultiBranch {
        branch: Linear<S>,
        fc1: Linear<S>,
        fc2: Linear<S>,
        branches: usize,
        fusion: Fusion,
    },
    /// `logits = fc2(relu(fc1(h)))` (speed).
    Trunk { fc1: Linear<S>, fc2: Linear<S> },
}

pub enum TaskTrace<S> {
    Normalized {
        x: Vec<S>,
        u: Vec<S>,
        norms: Vec<S>,
    },
    MultiBranch {
        x: Vec<S>,
        act: Vec<S>,
        fused: Vec<S>,
        hidden: Vec<S>,
    },
    Trunk {
        x: Vec<S>,
        hidden: Vec<S>,
    },
}

fn pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

impl<S: Real> TaskHead<S> {
    pub fn for_kind<R: Rng + ?Sized>(
        kind: TransformKind,
        in_dim: usize,
        hidden: usize,
        cfg: &TransformConfigs,
        rng: &mut R,
    ) -> Self {
        let classes = kind.label_space(cfg);
        match kind {
            TransformKind::RotationJitter | TransformKind::Reverse => TaskHead::Normalized {
                fc1: Linear::new(in_dim, hidden, false, rng),
                fc2: Linear::new(hidden, classes, true, rng),
            },
            TransformKind::Shuffle | TransformKind::ClipOrder => {
                let branches = kind.num_clips();
                let fusion = if kind == TransformKind::Shuffle {
                    Fusion::SumOfDifferences
                } else {
                    Fusion::ConcatDifferences
                };
                let fused_dim = match fusion {
                    Fusion::SumOfDifferences => hidden,
                    Fusion::ConcatDifferences => hidden * pairs(branches).len(),
                };
                TaskHead::MultiBranch {
                    branch: Linear::new(in_dim, hidden, true, rng),
                    fc1: Linear::new(fused_dim, hidden, true, rng),
                    fc2: Linear::new(hidden, classes, true, rng),
                    branches,
                    fusion,
                }
            }
            TransformKind::Speed => TaskHead::Trunk {
                fc1: Linear::new(in_dim, hidden, true, rng),
                fc2: Linear::new(hidden, classes, true, rng),
            },
        }
    }

    /// Features consumed per sample.
    pub fn branches(&self) -> usize {
        match self {
            TaskHead::MultiBranch { branches, .. } => *branches,
            _ => 1,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            TaskHead::Normalized { fc1, .. } | TaskHead::Trunk { fc1, .. } => fc1.in_dim,
            TaskHead::MultiBranch { branch, .. } => branch.in_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TaskHead::Normalized { fc2, .. } | TaskHead::Trunk { fc2, .. } | TaskHead::MultiBranch { fc2, .. } => {
                fc2.out_dim
            }
        }
    }

    /// `x` holds `n` samples of `branches()` consecutive features each.
    pub fn forward(&self, x: &[S], n: usize) -> Result<(Vec<S>, TaskTrace<S>)> {
        let expected = n * self.branches() * self.in_dim();
        if x.len() != expected {
            return Err(Error::shape(
                format!("{n}×{}×{}", self.branches(), self.in_dim()),
                x.len(),
            ));
        }
        Ok(match self {
            TaskHead::Normalized { fc1, fc2 } => {
                let h = fc1.forward(x, n);
                let (u, norms) = l2_normalize_rows(&h, fc1.out_dim);
                let logits = fc2.forward(&u, n);
                (logits, TaskTrace::Normalized { x: x.to_vec(), u, norms })
            }
            TaskHead::Trunk { fc1, fc2 } => {
                let mut hidden = fc1.forward(x, n);
                relu_inplace(&mut hidden);
                let logits = fc2.forward(&hidden, n);
                (logits, TaskTrace::Trunk { x: x.to_vec(), hidden })
            }
            TaskHead::MultiBranch {
                branch,
                fc1,
                fc2,
                branches,
                fusion,
            } => {
                let d = branch.out_dim;
                let mut act = branch.forward(x, n * branches);
                relu_inplace(&mut act);
                let fused = fuse(&act, n, *branches, d, *fusion);
                let mut hidden = fc1.forward(&fused, n);
                relu_inplace(&mut hidden);
                let logits = fc2.forward(&hidden, n);
                (
                    logits,
                    TaskTrace::MultiBranch {
                        x: x.to_vec(),
                        act,
                        fused,
                        hidden,
                    },
                )
            }
        })
    }

    /// Returns `dL/dx` with the layout of the forward input.
    pub fn backward(&mut self, trace: &TaskTrace<S>, dlogits: &[S], n: usize) -> Vec<S> {
        match (self, trace) {
            (TaskHead::Normalized { fc1, fc2 }, TaskTrace::Normalized { x, u, norms }) => {
                let du = fc2.backward(u, dlogits, n);
                let dh = l2_normalize_rows_backward(u, norms, &du, fc1.out_dim);
                fc1.backward(x, &dh, n)
            }
            (TaskHead::Trunk { fc1, fc2 }, TaskTrace::Trunk { x, hidden }) => {
                let mut dh = fc2.backward(hidden, dlogits, n);
                relu_backward_inplace(hidden, &mut dh);
                fc1.backward(x, &dh, n)
            }
            (
                TaskHead::MultiBranch {
                    branch,
                    fc1,
                    fc2,
                    branches,
                    fusion,
                },
                TaskTrace::MultiBranch { x, act, fused, hidden },
            ) => {
                let d = branch.out_dim;
                let mut dh = fc2.backward(hidden, dlogits, n);
                relu_backward_inplace(hidden, &mut dh);
                let dfused = fc1.backward(fused, &dh, n);
                let mut dact = fuse_backward(&dfused, n, *branches, d, *fusion);
                relu_backward_inplace(act, &mut dact);
                branch.backward(x, &dact, n * *branches)
            }
            _ => unreachable!("trace produced by a different head variant"),
        }
    }

    pub fn logits(&self, x: &[S], n: usize) -> Result<Vec<S>> {
        Ok(self.forward(x, n)?.0)
    }
}

fn fuse<S: Real>(act: &[S], n: usize, k: usize, d: usize, fusion: Fusion) -> Vec<S> {
    let pairs = pairs(k);
    let width = match fusion {
        Fusion::SumOfDifferences => d,
        Fusion::ConcatDifferences => d * pairs.len(),
    };
    let mut out = vec![S::zero(); n * width];
    for s in 0..n {
        let a = |b: usize| &act[(s * k + b) * d..(s * k + b + 1) * d];
        let row = &mut out[s * width..(s + 1) * width];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let off = match fusion {
                Fusion::SumOfDifferences => 0,
                Fusion::ConcatDifferences => p * d,
            };
            for ((o, ai), aj) in row[off..off + d].iter_mut().zip(a(i)).zip(a(j)) {
                *o += *ai - *aj;
            }
        }
    }
    out
}

fn fuse_backward<S: Real>(dfused: &[S], n: usize, k: usize, d: usize, fusion: Fusion) -> Vec<S> {
    let pairs = pairs(k);
    let width = dfused.len() / n.max(1);
    let mut dact = vec![S::zero(); n * k * d];
    for s in 0..n {
        let g = &dfused[s * width..(s + 1) * width];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let off = match fusion {
                Fusion::SumOfDifferences => 0,
                Fusion::ConcatDifferences => p * d,
            };
            for c in 0..d {
                dact[(s * k + i) * d + c] += g[off + c];
                dact[(s * k + j) * d + c] -= g[off + c];
            }
        }
    }
    dact
}

impl<S: Real> HasParams<S> for TaskHead<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        match self {
            TaskHead::Normalized { fc1, fc2 } | TaskHead::Trunk { fc1, fc2 } => {
                fc1.visit(&join(prefix, "fc1"), f);
                fc2.visit(&join(prefix, "fc2"), f);
            }
            TaskHead::MultiBranch { branch, fc1, fc2, .. } => {
                branch.visit(&join(prefix, "branch"), f);
                fc1.visit(&join(prefix, "fc1"), f);
                fc2.visit(&join(prefix, "fc2"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        match self {
            TaskHead::Normalized { fc1, fc2 } | TaskHead::Trunk { fc1, fc2 } => {
                fc1.visit_mut(&join(prefix, "fc1"), f);
                fc2.visit_mut(&join(prefix, "fc2"), f);
            }
            TaskHead::MultiBranch { branch, fc1, fc2, .. } => {
                branch.visit_mut(&join(prefix, "branch"), f);
                fc1.visit_mut(&join(prefix, "fc1"), f);
                fc2.visit_mut(&join(prefix, "fc2"), f);
            }
        }
    }
}

/// Which view a projection head serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewKey {
    Original,
    /// Second, untransformed clip of the same video (contrastive baseline).
    Identity,
    Transform(TransformKind),
}

impl ViewKey {
    pub fn name(self) -> &'static str {
        match self {
            ViewKey::Original => "original",
            ViewKey::Identity => "identity",
            ViewKey::Transform(k) => k.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub projection: ProjectionKind,
    pub embed_dim: usize,
    pub task_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionKind::Linear,
            embed_dim: 128,
            task_hidden: 128,
        }
    }
}

/// Encoder plus one projection head per view and one task head per transform.
#[derive(Clone, Debug, PartialEq)]
pub struct TacoNet<S> {
    pub encoder: Encoder<S>,
    pub projections: BTreeMap<ViewKey, ProjectionHead<S>>,
    pub task_heads: BTreeMap<TransformKind, TaskHead<S>>,
}

impl<S: Real> TacoNet<S> {
    pub fn new<R: Rng + ?Sized>(
        encoder_cfg: &EncoderConfig,
        heads: &HeadConfig,
        views: &[ViewKey],
        tasks: &[TransformKind],
        transform_cfg: &TransformConfigs,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(encoder_cfg, rng)?;
        let d = encoder.feature_dim();
        let projections = views
            .iter()
            .map(|&v| (v, ProjectionHead::new(heads.projection, d, heads.embed_dim, rng)))
            .collect();
        let task_heads = tasks
            .iter()
            .map(|&k| (k, TaskHead::for_kind(k, d, heads.task_hidden, transform_cfg, rng)))
            .collect();
        Ok(Self {
            encoder,
            projections,
            task_heads,
        })
    }
}

impl<S: Real> HasParams<S> for TacoNet<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (k, p) in &self.projections {
            p.visit(&join(prefix, &format!("projection.{}", k.name())), f);
        }
        for (k, h) in &self.task_heads {
            h.visit(&join(prefix, &format!("task.{}", k.name())), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (k, p) in &mut self.projections {
            p.visit_mut(&join(prefix, &format!("projection.{}", k.name())), f);
        }
        for (k, h) in &mut self.task_heads {
            h.visit_mut(&join(prefix, &format!("task.{}", k.name())), f);
        }
    }
}
