//! Temporal transformations. Each one produces augmented clip(s) together with
//! the pretext label it encodes.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::videodata::Clip;
use crate::videodata::{sample_clip, ClipSampleConfig, Provenance, Video, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    RotationJitter,
    Reverse,
    Shuffle,
    Speed,
    ClipOrder,
}

impl TransformKind {
    /// The four tasks enabled in comparisons; clip order is opt-in.
    pub const CORE: [TransformKind; 4] = [
        TransformKind::RotationJitter,
        TransformKind::Reverse,
        TransformKind::Shuffle,
        TransformKind::Speed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::RotationJitter => "rotation_jitter",
            TransformKind::Reverse => "reverse",
            TransformKind::Shuffle => "shuffle",
            TransformKind::Speed => "speed",
            TransformKind::ClipOrder => "clip_order",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TransformKind::RotationJitter,
            TransformKind::Reverse,
            TransformKind::Shuffle,
            TransformKind::Speed,
            TransformKind::ClipOrder,
        ]
        .into_iter()
        .find(|k| k.name() == s || (s == "rotation" && *k == TransformKind::RotationJitter))
    }

    /// Number of clips one outcome of this kind carries.
    pub fn num_clips(self) -> usize {
        match self {
            TransformKind::Shuffle | TransformKind::ClipOrder => 3,
            _ => 1,
        }
    }

    pub fn label_space(self, cfg: &TransformConfigs) -> usize {
        match self {
            TransformKind::RotationJitter => 4,
            TransformKind::Reverse => 2,
            TransformKind::Shuffle => cfg.shuffle.num_clips,
            TransformKind::Speed => cfg.speed.rates.len(),
            TransformKind::ClipOrder => PERMUTATIONS_3.len(),
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered, duplicate-free, non-empty list of transformation kinds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TransformKind>", into = "Vec<TransformKind>")]
pub struct TransformSet {
    kinds: Vec<TransformKind>,
}

impl TransformSet {
    pub fn new(kinds: Vec<TransformKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::config("transform set must not be empty"));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::config(format!("duplicate transform {k}")));
            }
        }
        Ok(Self { kinds })
    }

    pub fn kinds(&self) -> &[TransformKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn label(&self) -> String {
        self.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }
}

impl TryFrom<Vec<TransformKind>> for TransformSet {
    type Error = Error;

    fn try_from(kinds: Vec<TransformKind>) -> Result<Self> {
        TransformSet::new(kinds)
    }
}

impl From<TransformSet> for Vec<TransformKind> {
    fn from(set: TransformSet) -> Self {
        set.kinds
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformOutcome {
    pub clips: Vec<Clip>,
    pub task_label: usize,
    pub label_space: usize,
    pub kind: TransformKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationJitterConfig {
    /// Per-frame jitter is drawn from `[-jitter_bound, jitter_bound]` degrees.
    pub jitter_bound: f32,
}

impl Default for RotationJitterConfig {
    fn default() -> Self {
        Self { jitter_bound: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShuffleConfig {
    pub num_clips: usize,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self { num_clips: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedConfig {
    pub rates: Vec<usize>,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self { rates: vec![1, 2, 4] }
    }
}

impl SpeedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates.len() < 2 {
            return Err(Error::config("speed needs at least two rates"));
        }
        if self.rates[0] != 1 {
            return Err(Error::config("speed rates must start with rate 1"));
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("speed rates must be strictly increasing"));
        }
        Ok(())
    }
}

/// Per-transform settings carried inside an experiment configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfigs {
    pub rotation: RotationJitterConfig,
    pub shuffle: ShuffleConfig,
    pub speed: SpeedConfig,
}

impl TransformConfigs {
    pub fn validate(&self) -> Result<()> {
        self.speed.validate()?;
        if self.shuffle.num_clips < 2 {
            return Err(Error::config("shuffle needs at least two subclips"));
        }
        if !(0.0..45.0).contains(&self.rotation.jitter_bound) {
            return Err(Error::config("rotation jitter bound must lie in [0, 45) degrees"));
        }
        Ok(())
    }
}

/// Rotates a square channels-last frame by `quarter_turns × 90°` counterclockwise.
pub fn rotate_quarter(frame: &[f32], size: usize, quarter_turns: usize) -> Vec<f32> {
    let mut out = frame.to_vec();
    for _ in 0..quarter_turns % 4 {
        let src = out.clone();
        for r in 0..size {
            for c in 0..size {
                let (sr, sc) = (c, size - 1 - r);
                let dst = (r * size + c) * CHANNELS;
                let s = (sr * size + sc) * CHANNELS;
                out[dst..dst + CHANNELS].copy_from_slice(&src[s..s + CHANNELS]);
            }
        }
    }
    out
}

/// Rotates by a small angle about the frame center with bilinear sampling; outside is zero.
pub fn rotate_bilinear(frame: &[f32], height: usize, width: usize, degrees: f32) -> Vec<f32> {
    if degrees == 0.0 {
        return frame.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (height as f32 - 1.0) / 2.0;
    let cx = (width as f32 - 1.0) / 2.0;
    let mut out = vec![0.0f32; frame.len()];
    for r in 0..height {
        for col in 0..width {
            let dx = col as f32 - cx;
            let dy = r as f32 - cy;
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let dst = (r * width + col) * CHANNELS;
            for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (yy, xx) = (y0 + oy, x0 + ox);
                    let w = wx * wy;
                    if w == 0.0 || yy < 0.0 || xx < 0.0 || yy >= height as f32 || xx >= width as f32 {
                        continue;
                    }
                    let src = (yy as usize * width + xx as usize) * CHANNELS;
                    for ch in 0..CHANNELS {
                        out[dst + ch] += w * frame[src + ch];
                    }
                }
            }
            for v in &mut out[dst..dst + CHANNELS] {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Rotation jittering with explicit per-frame jitter angles (degrees).
pub fn rotation_jitter_with(clip: &Clip, angle_index: usize, jitters: &[f32]) -> Result<TransformOutcome> {
    if angle_index >= 4 {
        return Err(Error::Label {
            label: angle_index,
            label_space: 4,
        });
    }
    if clip.height != clip.width {
        return Err(Error::Dimensions(format!(
            "rotation needs square frames, got {}×{}",
            clip.height, clip.width
        )));
    }
    if jitters.len() != clip.num_frames {
        return Err(Error::shape(clip.num_frames, jitters.len()));
    }
    let mut frames = Vec::with_capacity(clip.frames.len());
    for (k, jitter) in jitters.iter().enumerate() {
        let turned = rotate_quarter(clip.frame(k), clip.width, angle_index);
        frames.extend(rotate_bilinear(&turned, clip.height, clip.width, *jitter));
    }
    Ok(TransformOutcome {
        clips: vec![Clip { frames, ..clip.clone() }],
        task_label: angle_index,
        label_space: 4,
        kind: TransformKind::RotationJitter,
    })
}

pub fn rotation_jitter<R: Rng + ?Sized>(
    clip: &Clip,
    angle_index: usize,
    cfg: &RotationJitterConfig,
    rng: &mut R,
) -> Result<TransformOutcome> {
    let b = cfg.jitter_bound;
    let jitters: Vec<f32> = (0..clip.num_frames)
        .map(|_| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 })
        .collect();
    rotation_jitter_with(clip, angle_index, &jitters)
}

pub fn reverse(clip: &Clip, direction_label: usize) -> Result<TransformOutcome> {
    let clip = match direction_label {
        0 => clip.clone(),
        1 => {
            let mut frames = Vec::with_capacity(clip.frames.len());
            for k in (0..clip.num_frames).rev() {
                frames.extend_from_slice(clip.frame(k));
            }
            Clip { frames, ..clip.clone() }
        }
        label => return Err(Error::Label { label, label_space: 2 }),
    };
    Ok(TransformOutcome {
        clips: vec![clip],
        task_label: direction_label,
        label_space: 2,
        kind: TransformKind::Reverse,
    })
}

fn subclip(clip: &Clip, start: usize, len: usize) -> Clip {
    let n = clip.frame_len();
    Clip {
        num_frames: len,
        frames: clip.frames[start * n..(start + len) * n].to_vec(),
        provenance: Provenance {
            start: clip.provenance.start + start * clip.provenance.stride,
            ..clip.provenance
        },
        ..clip.clone()
    }
}

/// Uniform over the non-identity permutations of `0..n` (rejection sampling).
pub fn non_identity_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 2, "no non-identity permutation of fewer than 2 elements");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, p)| i != *p) {
            return perm;
        }
    }
}

/// Shuffle task with an explicit shuffled-subclip index.
pub fn shuffle_task_with<R: Rng + ?Sized>(
    clip: &Clip,
    shuffled: usize,
    cfg: &ShuffleConfig,
    rng: &mut R,
) -> Result<TransformOutcome> {
    let t = clip.num_frames;
    if t < 4 || t % 2 != 0 {
        return Err(Error::Dimensions(format!(
            "shuffle needs an even clip length ≥ 4, got {t}"
        )));
    }
    if shuffled >= cfg.num_clips {
        return Err(Error::Label {
            label: shuffled,
            label_space: cfg.num_clips,
        });
    }
    let len = t / 2;
    let mut clips: Vec<Clip> = (0..cfg.num_clips)
        .map(|_| subclip(clip, rng.random_range(0..=t - len), len))
        .collect();
    let perm = non_identity_permutation(len, rng);
    let target = &clips[shuffled];
    let mut frames = Vec::with_capacity(target.frames.len());
    for &p in &perm {
        frames.extend_from_slice(target.frame(p));
    }
    clips[shuffled].frames = frames;
    Ok(TransformOutcome {
        clips,
        task_label: shuffled,
        label_space: cfg.num_clips,
        kind: TransformKind::Shuffle,
    })
}

pub fn shuffle_task<R: Rng + ?Sized>(clip: &Clip, cfg: &ShuffleConfig, rng: &mut R) -> Result<TransformOutcome> {
    let label = rng.random_range(0..cfg.num_clips.max(1));
    shuffle_task_with(clip, label, cfg, rng)
}

/// Indices sampled by the speed task for a start and rate.
pub fn speed_indices(start: usize, rate: usize, num_frames: usize) -> Vec<usize> {
    (0..num_frames).map(|k| start + k * rate).collect()
}

pub fn speed_task<R: Rng + ?Sized>(
    video: &Video,
    rate_index: usize,
    cfg: &SpeedConfig,
    num_frames: usize,
    rng: &mut R,
) -> Result<TransformOutcome> {
    cfg.validate()?;
    let rate = *cfg.rates.get(rate_index).ok_or(Error::Label {
        label: rate_index,
        label_space: cfg.rates.len(),
    })?;
    // every rate must fit, so validity does not depend on the drawn label
    let required = num_frames * cfg.rates.iter().copied().max().unwrap_or(rate);
    if video.length < required {
        return Err(Error::VideoTooShort {
            video_id: video.id,
            length: video.length,
            required,
        });
    }
    let span = (num_frames - 1) * rate + 1;
    let start = rng.random_range(0..=video.length - span);
    let clip = Clip::gather(
        video,
        &speed_indices(start, rate, num_frames),
        Provenance {
            video_id: video.id,
            start,
            stride: rate,
        },
    )?;
    Ok(TransformOutcome {
        clips: vec![clip],
        task_label: rate_index,
        label_space: cfg.rates.len(),
        kind: TransformKind::Speed,
    })
}

/// Orders of three subclips; index 0 is chronological.
pub const PERMUTATIONS_3: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

pub fn permutation_index(perm: &[usize; 3]) -> Option<usize> {
    PERMUTATIONS_3.iter().position(|p| p == perm)
}

pub fn invert_permutation(perm: &[usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Three consecutive, disjoint subclips of `subclip_len` frames at `stride`,
/// presented in the order given by `PERMUTATIONS_3[order_label]`.
pub fn clip_order_with(
    video: &Video,
    order_label: usize,
    start: usize,
    subclip_len: usize,
    stride: usize,
) -> Result<TransformOutcome> {
    let perm = PERMUTATIONS_3.get(order_label).ok_or(Error::Label {
        label: order_label,
        label_space: 6,
    })?;
    let total = 3 * subclip_len;
    let required = total * stride;
    if video.length < required || start + (total - 1) * stride >= video.length {
        return Err(Error::VideoTooShort {
            video_id: video.id,
            length: video.length,
            required: required.max(start + (total - 1) * stride + 1),
        });
    }
    let chronological: Vec<Clip> = (0..3)
        .map(|j| {
            let s = start + j * subclip_len * stride;
            let indices: Vec<usize> = (0..subclip_len).map(|k| s + k * stride).collect();
            Clip::gather(
                video,
                &indices,
                Provenance {
                    video_id: video.id,
                    start: s,
                    stride,
                },
            )
        })
        .collect::<Result<_>>()?;
    Ok(TransformOutcome {
        clips: perm.iter().map(|&p| chronological[p].clone()).collect(),
        task_label: order_label,
        label_space: PERMUTATIONS_3.len(),
        kind: TransformKind::ClipOrder,
    })
}

pub fn clip_order_task<R: Rng + ?Sized>(
    video: &Video,
    subclip_len: usize,
    stride: usize,
    rng: &mut R,
) -> Result<TransformOutcome> {
    let total = 3 * subclip_len;
    if subclip_len < 2 || video.length < total * stride {
        return Err(Error::VideoTooShort {
            video_id: video.id,
            length: video.length,
            required: total * stride,
        });
    }
    let label = rng.random_range(0..PERMUTATIONS_3.len());
    let start = rng.random_range(0..=video.length - ((total - 1) * stride + 1));
    clip_order_with(video, label, start, subclip_len, stride)
}

/// Applies every transform of `set` to `video`, one outcome per kind in set
/// order. Clip-based transforms each draw a fresh clip with `clip_cfg`.
pub fn apply_transform_set<R: Rng + ?Sized>(
    video: &Video,
    set: &TransformSet,
    cfg: &TransformConfigs,
    clip_cfg: &ClipSampleConfig,
    rng: &mut R,
) -> Result<Vec<TransformOutcome>> {
    set.kinds()
        .iter()
        .map(|&kind| {
            apply_one(video, kind, cfg, clip_cfg, rng).map_err(|e| Error::Transform {
                kind,
                source: Box::new(e),
            })
        })
        .collect()
}

fn apply_one<R: Rng + ?Sized>(
    video: &Video,
    kind: TransformKind,
    cfg: &TransformConfigs,
    clip_cfg: &ClipSampleConfig,
    rng: &mut R,
) -> Result<TransformOutcome> {
    match kind {
        TransformKind::RotationJitter => {
            let clip = sample_clip(video, clip_cfg, rng)?;
            let label = rng.random_range(0..4);
            rotation_jitter(&clip, label, &cfg.rotation, rng)
        }
        TransformKind::Reverse => {
            let clip = sample_clip(video, clip_cfg, rng)?;
            let label = rng.random_range(0..2);
            reverse(&clip, label)
        }
        TransformKind::Shuffle => {
            let clip = sample_clip(video, clip_cfg, rng)?;
            shuffle_task(&clip, &cfg.shuffle, rng)
        }
        TransformKind::Speed => {
            let label = rng.random_range(0..cfg.speed.rates.len());
            speed_task(video, label, &cfg.speed, clip_cfg.num_frames, rng)
        }
        TransformKind::ClipOrder => clip_order_task(video, (clip_cfg.num_frames / 2).max(2), clip_cfg.stride, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videodata::{generate_synthetic_video, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(t: usize, size: usize, seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t * size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Clip::new(
            t,
            size,
            size,
            frames,
            Provenance {
                video_id: 0,
                start: 0,
                stride: 1,
            },
        )
        .unwrap()
    }

    fn video(seed: u64, length: usize) -> Video {
        generate_synthetic_video(&SyntheticSpec::sample(0, 4, 16, 16, seed), length, 16, 16).unwrap()
    }

    #[test]
    fn rotation_without_jitter_at_zero_is_identity() {
        let c = random_clip(4, 8, 1);
        let out = rotation_jitter_with(&c, 0, &[0.0; 4]).unwrap();
        assert_eq!(out.clips[0], c);
        assert_eq!((out.task_label, out.label_space), (0, 4));
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let c = random_clip(3, 8, 2);
        let mut cur = c.clone();
        for _ in 0..4 {
            cur = rotation_jitter_with(&cur, 1, &[0.0; 3]).unwrap().clips.remove(0);
        }
        assert_eq!(cur, c);
    }

    #[test]
    fn half_turn_is_two_quarter_turns() {
        let c = random_clip(3, 8, 3);
        let out = rotation_jitter_with(&c, 2, &[0.0; 3]).unwrap();
        for k in 0..3 {
            let twice = rotate_quarter(&rotate_quarter(c.frame(k), 8, 1), 8, 1);
            assert_eq!(out.clips[0].frame(k), &twice[..]);
        }
    }

    #[test]
    fn quarter_turn_moves_top_right_to_top_left() {
        let mut frame = vec![0.0f32; 4 * 4 * 3];
        frame[(0 * 4 + 3) * 3] = 1.0;
        let r = rotate_quarter(&frame, 4, 1);
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn rotation_rejects_non_square() {
        let c = Clip::new(
            2,
            4,
            6,
            vec![0.5; 2 * 4 * 6 * 3],
            Provenance {
                video_id: 0,
                start: 0,
                stride: 1,
            },
        )
        .unwrap();
        assert!(matches!(rotation_jitter_with(&c, 1, &[0.0; 2]), Err(Error::Dimensions(_))));
    }

    #[test]
    fn jittered_rotation_stays_in_range() {
        let c = random_clip(4, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = rotation_jitter(&c, 3, &RotationJitterConfig::default(), &mut rng).unwrap();
        assert!(out.clips[0].frames.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reverse_is_an_involution() {
        let c = random_clip(5, 4, 5);
        let once = reverse(&c, 1).unwrap().clips.remove(0);
        assert_ne!(once, c);
        assert_eq!(reverse(&once, 1).unwrap().clips[0], c);
        assert_eq!(reverse(&c, 0).unwrap().clips[0], c);
        assert!(reverse(&c, 2).is_err());
    }

    #[test]
    fn reverse_orders_frames_backwards() {
        let c = random_clip(4, 2, 6);
        let r = reverse(&c, 1).unwrap().clips.remove(0);
        for k in 0..4 {
            assert_eq!(r.frame(k), c.frame(3 - k));
        }
    }

    #[test]
    fn reverse_of_static_clip_is_indistinguishable() {
        let c = Clip::new(
            4,
            2,
            2,
            vec![0.3; 4 * 2 * 2 * 3],
            Provenance {
                video_id: 0,
                start: 0,
                stride: 1,
            },
        )
        .unwrap();
        assert!(c.is_static());
        assert_eq!(reverse(&c, 0).unwrap().clips, reverse(&c, 1).unwrap().clips);
    }

    #[test]
    fn shuffle_produces_three_half_length_subclips() {
        let c = random_clip(8, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let out = shuffle_task(&c, &ShuffleConfig::default(), &mut rng).unwrap();
            assert_eq!(out.clips.len(), 3);
            assert!(out.clips.iter().all(|s| s.num_frames == 4));
            let shuffled = &out.clips[out.task_label];
            // random frames are pairwise distinct, so a non-identity order is detectable
            let s = shuffled.provenance.start;
            let in_order = (0..4).all(|k| shuffled.frame(k) == c.frame(s + k));
            assert!(!in_order);
            for (i, sub) in out.clips.iter().enumerate() {
                if i != out.task_label {
                    let s = sub.provenance.start;
                    assert!((0..4).all(|k| sub.frame(k) == c.frame(s + k)));
                }
            }
        }
    }

    #[test]
    fn shuffle_rejects_odd_or_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(shuffle_task(&random_clip(7, 2, 1), &ShuffleConfig::default(), &mut rng).is_err());
        assert!(shuffle_task(&random_clip(2, 2, 1), &ShuffleConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn speed_rate_one_is_contiguous() {
        let v = video(1, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = speed_task(&v, 0, &SpeedConfig::default(), 8, &mut rng).unwrap();
        let s = out.clips[0].provenance.start;
        for k in 0..8 {
            assert_eq!(out.clips[0].frame(k), v.frame(s + k));
        }
    }

    #[test]
    fn speed_rate_four_indices() {
        assert_eq!(speed_indices(3, 4, 8), vec![3, 7, 11, 15, 19, 23, 27, 31]);
        let v = video(2, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = speed_task(&v, 2, &SpeedConfig::default(), 8, &mut rng).unwrap();
        let s = out.clips[0].provenance.start;
        assert!(s + 28 < 64);
        for k in 0..8 {
            assert_eq!(out.clips[0].frame(k), v.frame(s + 4 * k));
        }
        assert_eq!((out.task_label, out.label_space), (2, 3));
    }

    #[test]
    fn rate_two_is_every_other_frame_of_doubled_window() {
        for start in 0..10 {
            let double: Vec<usize> = speed_indices(start, 1, 16).into_iter().step_by(2).collect();
            assert_eq!(double, speed_indices(start, 2, 8));
        }
    }

    #[test]
    fn speed_too_short_errors() {
        let v = video(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = speed_task(&v, 2, &SpeedConfig::default(), 8, &mut rng).unwrap_err();
        assert!(matches!(err, Error::VideoTooShort { required: 32, .. }));
    }

    #[test]
    fn speed_config_validation() {
        assert!(SpeedConfig { rates: vec![2, 4] }.validate().is_err());
        assert!(SpeedConfig { rates: vec![1, 4, 2] }.validate().is_err());
        assert!(SpeedConfig { rates: vec![1, 3] }.validate().is_ok());
    }

    #[test]
    fn clip_order_identity_is_chronological() {
        let v = video(4, 64);
        let out = clip_order_with(&v, 0, 5, 4, 2).unwrap();
        let starts: Vec<usize> = out.clips.iter().map(|c| c.provenance.start).collect();
        assert_eq!(starts, vec![5, 13, 21]);
        assert_eq!(out.label_space, 6);
    }

    #[test]
    fn clip_order_inverse_restores_chronology() {
        let perm = [2, 0, 1];
        let idx = permutation_index(&perm).unwrap();
        let v = video(5, 64);
        let out = clip_order_with(&v, idx, 0, 4, 2).unwrap();
        let inv = invert_permutation(&perm);
        let restored: Vec<usize> = inv.iter().map(|&i| out.clips[i].provenance.start).collect();
        assert_eq!(restored, vec![0, 8, 16]);
    }

    #[test]
    fn clip_order_too_short_errors() {
        let v = video(6, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(clip_order_task(&v, 4, 2, &mut rng).is_err());
    }

    #[test]
    fn transform_set_invariants() {
        assert!(TransformSet::new(vec![]).is_err());
        assert!(TransformSet::new(vec![TransformKind::Reverse, TransformKind::Reverse]).is_err());
        let parsed: TransformSet = serde_json::from_str("[\"speed\",\"shuffle\"]").unwrap();
        assert_eq!(parsed.label(), "speed+shuffle");
        assert!(serde_json::from_str::<TransformSet>("[]").is_err());
    }

    #[test]
    fn apply_set_yields_one_outcome_per_kind_in_order() {
        let v = video(7, 64);
        let clip_cfg = ClipSampleConfig::new(8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = TransformSet::new(vec![TransformKind::Reverse]).unwrap();
        let out = apply_transform_set(&v, &set, &TransformConfigs::default(), &clip_cfg, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        let set = TransformSet::new(vec![TransformKind::Speed, TransformKind::Shuffle]).unwrap();
        let out = apply_transform_set(&v, &set, &TransformConfigs::default(), &clip_cfg, &mut rng).unwrap();
        assert_eq!(out.iter().map(|o| o.kind).collect::<Vec<_>>(), set.kinds());
        for o in &out {
            assert!(o.task_label < o.label_space);
            for c in &o.clips {
                assert_eq!((c.height, c.width), (16, 16));
                assert!(c.frames.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn apply_set_errors_are_tagged() {
        let v = video(8, 20);
        let clip_cfg = ClipSampleConfig::new(8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = TransformSet::new(vec![TransformKind::Speed]).unwrap();
        let err = apply_transform_set(&v, &set, &TransformConfigs::default(), &clip_cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Transform { kind: TransformKind::Speed, .. }));
    }

    #[test]
    fn seeded_application_is_deterministic() {
        let v = video(9, 64);
        let clip_cfg = ClipSampleConfig::new(8, 4).unwrap();
        let set = TransformSet::new(TransformKind::CORE.to_vec()).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            apply_transform_set(&v, &set, &TransformConfigs::default(), &clip_cfg, &mut rng).unwrap()
        };
        assert_eq!(run(4), run(4));
    }
}
