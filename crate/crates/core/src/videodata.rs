//! Videos, datasets, procedural motion videos, frame directories and clip sampling.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const CHANNELS: usize = 3;

/// A decoded video: `length × height × width × 3` values in `[0, 1]`, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: usize,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub class_label: Option<usize>,
}

impl Video {
    pub fn new(
        id: usize,
        length: usize,
        height: usize,
        width: usize,
        frames: Vec<f32>,
        class_label: Option<usize>,
    ) -> Result<Self> {
        if length == 0 || height == 0 || width == 0 {
            return Err(Error::Dimensions(format!(
                "video must have at least one frame and pixel, got {length}×{height}×{width}"
            )));
        }
        let expected = length * height * width * CHANNELS;
        if frames.len() != expected {
            return Err(Error::shape(
                format!("{expected} values ({length}×{height}×{width}×3)"),
                frames.len(),
            ));
        }
        if let Some(bad) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimensions(format!("frame value {bad} outside [0, 1]")));
        }
        Ok(Self {
            id,
            length,
            height,
            width,
            frames,
            class_label,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[index * n..(index + 1) * n]
    }
}

/// Where a clip came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub video_id: usize,
    pub start: usize,
    pub stride: usize,
}

/// A short stack of frames, `num_frames × height × width × 3`, the unit the encoder consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub provenance: Provenance,
}

impl Clip {
    pub fn new(num_frames: usize, height: usize, width: usize, frames: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if num_frames < 2 {
            return Err(Error::Dimensions(format!("a clip needs at least 2 frames, got {num_frames}")));
        }
        let expected = num_frames * height * width * CHANNELS;
        if frames.len() != expected {
            return Err(Error::shape(expected, frames.len()));
        }
        Ok(Self {
            num_frames,
            height,
            width,
            frames,
            provenance,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[index * n..(index + 1) * n]
    }

    /// Builds a clip from a list of frame indices into `video`.
    pub fn gather(video: &Video, indices: &[usize], provenance: Provenance) -> Result<Self> {
        let mut frames = Vec::with_capacity(indices.len() * video.frame_len());
        for &i in indices {
            if i >= video.length {
                return Err(Error::Index {
                    index: i,
                    size: video.length,
                });
            }
            frames.extend_from_slice(video.frame(i));
        }
        Clip::new(indices.len(), video.height, video.width, frames, provenance)
    }

    /// True when every frame equals the first; such clips carry no temporal signal.
    pub fn is_static(&self) -> bool {
        let first = self.frame(0);
        (1..self.num_frames).all(|i| self.frame(i) == first)
    }
}

/// An ordered collection of videos whose ids equal their positions.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    videos: Vec<Video>,
}

impl Dataset {
    pub fn new(videos: Vec<Video>) -> Result<Self> {
        for (i, v) in videos.iter().enumerate() {
            if v.id != i {
                return Err(Error::config(format!("video at position {i} has id {}", v.id)));
            }
        }
        Ok(Self { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn get(&self, id: usize) -> Option<&Video> {
        self.videos.get(id)
    }

    pub fn min_length(&self) -> usize {
        self.videos.iter().map(|v| v.length).min().unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.videos
            .iter()
            .filter_map(|v| v.class_label)
            .max()
            .map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    /// Signed distance (pixels, negative inside) of a point in the shape's own frame.
    fn signed_distance(self, x: f32, y: f32, size: f32) -> f32 {
        match self {
            ShapeKind::Disk => (x * x + y * y).sqrt() - size,
            ShapeKind::Square => x.abs().max(y.abs()) - 0.8 * size,
            ShapeKind::Triangle => {
                // equilateral, pointing along +y
                let r = 0.55 * size;
                let c = 0.866_025_4_f32;
                let d1 = -y - r;
                let d2 = c * x + 0.5 * y - r;
                let d3 = -c * x + 0.5 * y - r;
                d1.max(d2).max(d3)
            }
            ShapeKind::Cross => {
                let arm = size;
                let half = 0.35 * size;
                let bar = |a: f32, b: f32| (a.abs() - arm).max(b.abs() - half);
                bar(x, y).min(bar(y, x))
            }
        }
    }
}

/// Parameters of one procedural motion video.
///
/// Appearance (shape, size, color, background tint, pose) is independent of
/// `motion_class`; the class only sets the heading of the linear motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub motion_class: usize,
    pub num_classes: usize,
    pub shape: ShapeKind,
    /// Initial center, pixels `(x, y)`.
    pub position: [f32; 2],
    /// Linear speed in pixels per frame along the class heading.
    pub speed: f32,
    /// Degrees per frame.
    pub angular_velocity: f32,
    pub size: f32,
    pub color: [f32; 3],
    pub orientation: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Draws appearance and kinematics from `seed` for the given class.
    pub fn sample(motion_class: usize, num_classes: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, "synthetic-spec", 0);
        let shape = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        let mut color = [0.0f32; 3];
        for c in &mut color {
            *c = rng.random_range(0.45..1.0);
        }
        Self {
            motion_class,
            num_classes,
            shape,
            position: [rng.random_range(0.0..width as f32), rng.random_range(0.0..height as f32)],
            speed: rng.random_range(0.75..1.25),
            angular_velocity: rng.random_range(-6.0..6.0),
            size: rng.random_range(3.5..6.5),
            color,
            orientation: rng.random_range(0.0..360.0),
            seed,
        }
    }

    /// Per-frame displacement `(dx, dy)`.
    pub fn velocity(&self) -> [f32; 2] {
        let heading = std::f32::consts::TAU * self.motion_class as f32 / self.num_classes.max(1) as f32;
        [self.speed * heading.cos(), self.speed * heading.sin()]
    }
}

fn wrap_offset(d: f32, period: f32) -> f32 {
    let mut d = d.rem_euclid(period);
    if d >= period / 2.0 {
        d -= period;
    }
    d
}

/// Fraction of brightness lost over the video by an object moving one pixel per
/// frame. Light falls with distance travelled, which gives time a direction
/// without saying anything about the heading; a still scene does not fade.
pub const LIGHT_FADE: f32 = 0.3;

/// Renders the procedural video described by `spec`. Motion wraps around the frame edges.
pub fn generate_synthetic_video(spec: &SyntheticSpec, length: usize, height: usize, width: usize) -> Result<Video> {
    if length < 2 {
        return Err(Error::Dimensions(format!("length must be ≥ 2, got {length}")));
    }
    if height < 8 || width < 8 {
        return Err(Error::Dimensions(format!("frames must be at least 8×8, got {height}×{width}")));
    }
    if spec.num_classes == 0 || spec.motion_class >= spec.num_classes {
        return Err(Error::config(format!(
            "motion class {} outside [0, {})",
            spec.motion_class, spec.num_classes
        )));
    }
    let mut tint_rng = seeding::stream(spec.seed, "synthetic-background", 0);
    let tint: [f32; 3] = [
        tint_rng.random_range(0.0..0.1),
        tint_rng.random_range(0.0..0.1),
        tint_rng.random_range(0.0..0.1),
    ];
    let [vx, vy] = spec.velocity();
    let (wf, hf) = (width as f32, height as f32);
    let mut frames = Vec::with_capacity(length * height * width * CHANNELS);
    for f in 0..length {
        let t = f as f32;
        let cx = spec.position[0] + vx * t;
        let cy = spec.position[1] + vy * t;
        let theta = (spec.orientation + spec.angular_velocity * t).to_radians();
        let (s, c) = theta.sin_cos();
        let light = 1.0 - LIGHT_FADE * spec.speed * t / (length - 1) as f32;
        for y in 0..height {
            // static vertical gradient gives frames a canonical "up"
            let bg = 0.08 + 0.3 * (y as f32 + 0.5) / hf;
            for x in 0..width {
                let dx = wrap_offset(x as f32 + 0.5 - cx, wf);
                let dy = wrap_offset(y as f32 + 0.5 - cy, hf);
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                let sd = spec.shape.signed_distance(lx, ly, spec.size);
                let cover = (0.5 - sd).clamp(0.0, 1.0);
                for ch in 0..CHANNELS {
                    let v = light * ((bg + tint[ch]) * (1.0 - cover) + spec.color[ch] * cover);
                    frames.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Video::new(0, length, height, width, frames, Some(spec.motion_class))
}

/// Description of a procedural dataset; classes are balanced round-robin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            num_videos: 2000,
            num_classes: 4,
            length: 64,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn specs(&self) -> Vec<SyntheticSpec> {
        (0..self.num_videos)
            .map(|i| {
                let seed = seeding::child_seed(self.seed, "synthetic-video", i as u64);
                SyntheticSpec::sample(i % self.num_classes, self.num_classes, self.height, self.width, seed)
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be ≥ 1"));
        }
        let videos = self
            .specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut v = generate_synthetic_video(spec, self.length, self.height, self.width)?;
                v.id = i;
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(videos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StartPolicy {
    #[default]
    Random,
    /// Start drawn uniformly from `points` evenly spaced candidates.
    UniformGrid { points: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSampleConfig {
    pub num_frames: usize,
    pub stride: usize,
    #[serde(default)]
    pub start: StartPolicy,
}

impl ClipSampleConfig {
    pub fn new(num_frames: usize, stride: usize) -> Result<Self> {
        let cfg = Self {
            num_frames,
            stride,
            start: StartPolicy::Random,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::config(format!("clip num_frames must be ≥ 2, got {}", self.num_frames)));
        }
        if self.stride == 0 {
            return Err(Error::config("clip stride must be ≥ 1"));
        }
        if let StartPolicy::UniformGrid { points: 0 } = self.start {
            return Err(Error::config("uniform grid needs at least one point"));
        }
        Ok(())
    }

    /// Minimum video length this configuration can sample from.
    pub fn required_length(&self) -> usize {
        self.num_frames * self.stride
    }

    /// Frames spanned from the first to the last sampled index, inclusive.
    pub fn span(&self) -> usize {
        (self.num_frames - 1) * self.stride + 1
    }

    pub fn indices(&self, start: usize) -> Vec<usize> {
        (0..self.num_frames).map(|k| start + k * self.stride).collect()
    }
}

/// `count` starts evenly spaced over `[0, max_start]`.
pub fn uniform_starts(max_start: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![max_start / 2; count];
    }
    (0..count)
        .map(|k| ((k * max_start) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

fn check_length(video: &Video, cfg: &ClipSampleConfig) -> Result<()> {
    cfg.validate()?;
    let required = cfg.required_length();
    if video.length < required {
        return Err(Error::VideoTooShort {
            video_id: video.id,
            length: video.length,
            required,
        });
    }
    Ok(())
}

/// Clip at an explicit start index.
pub fn sample_clip_at(video: &Video, cfg: &ClipSampleConfig, start: usize) -> Result<Clip> {
    check_length(video, cfg)?;
    if start + cfg.span() > video.length {
        return Err(Error::Index {
            index: start,
            size: video.length - cfg.span() + 1,
        });
    }
    Clip::gather(
        video,
        &cfg.indices(start),
        Provenance {
            video_id: video.id,
            start,
            stride: cfg.stride,
        },
    )
}

pub fn sample_clip<R: Rng + ?Sized>(video: &Video, cfg: &ClipSampleConfig, rng: &mut R) -> Result<Clip> {
    check_length(video, cfg)?;
    let max_start = video.length - cfg.span();
    let start = match cfg.start {
        StartPolicy::Random => rng.random_range(0..=max_start),
        StartPolicy::UniformGrid { points } => {
            let starts = uniform_starts(max_start, points);
            starts[rng.random_range(0..starts.len())]
        }
    };
    sample_clip_at(video, cfg, start)
}

fn frames_err(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Frames {
        dir: dir.to_path_buf(),
        reason: reason.into(),
    }
}

/// Loads a directory of PNG frames in lexicographic filename order.
pub fn load_video_frames(path: &Path) -> Result<Video> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| frames_err(path, format!("cannot read directory: {e}")))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(frames_err(path, "no frames"));
    }
    let mut frames = Vec::new();
    let mut dims: Option<(u32, u32)> = None;
    for file in &files {
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let img = image::open(file)
            .map_err(|e| frames_err(path, format!("unreadable frame {name}: {e}")))?
            .to_rgb8();
        let d = img.dimensions();
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => {
                return Err(frames_err(
                    path,
                    format!("frame {name} is {}×{}, expected {}×{}", d.0, d.1, first.0, first.1),
                ));
            }
            Some(_) => {}
        }
        frames.extend(img.as_raw().iter().map(|&b| f32::from(b) / 255.0));
    }
    let (w, h) = dims.expect("at least one frame");
    Video::new(0, files.len(), h as usize, w as usize, frames, None)
}

/// Writes `frame_00000.png`, `frame_00001.png`, … into `dir` (created if missing).
pub fn write_video_frames(video: &Video, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..video.length {
        let bytes: Vec<u8> = video.frame(i).iter().map(|v| (v * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(video.width as u32, video.height as u32, bytes)
            .ok_or_else(|| frames_err(dir, "frame buffer size mismatch"))?;
        img.save(dir.join(format!("frame_{i:05}.png")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoSource {
    Frames { path: PathBuf },
    Synthetic { spec: SyntheticSpec, length: usize, height: usize, width: usize },
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub source: VideoSource,
    pub class_label: Option<usize>,
}

pub fn synthetic_manifest(cfg: &SyntheticDatasetConfig) -> Vec<ManifestEntry> {
    cfg.specs()
        .into_iter()
        .enumerate()
        .map(|(id, spec)| ManifestEntry {
            id,
            class_label: Some(spec.motion_class),
            source: VideoSource::Synthetic {
                spec,
                length: cfg.length,
                height: cfg.height,
                width: cfg.width,
            },
        })
        .collect()
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Materializes a manifest. Relative frame paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let videos = read_manifest(path)?
        .into_iter()
        .map(|entry| {
            let mut video = match &entry.source {
                VideoSource::Frames { path } => load_video_frames(&base.join(path))?,
                VideoSource::Synthetic {
                    spec,
                    length,
                    height,
                    width,
                } => generate_synthetic_video(spec, *length, *height, *width)?,
            };
            video.id = entry.id;
            video.class_label = entry.class_label;
            Ok(video)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec::sample(1, 4, 32, 32, seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_video(&spec(7), 16, 32, 32).unwrap();
        let b = generate_synthetic_video(&spec(7), 16, 32, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_label, Some(1));
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let mut s = spec(3);
        s.speed = 0.0;
        s.angular_velocity = 0.0;
        let v = generate_synthetic_video(&s, 8, 16, 16).unwrap();
        for i in 1..v.length {
            assert_eq!(v.frame(i), v.frame(0));
        }
    }

    #[test]
    fn motion_class_changes_sequence_not_first_frame() {
        let a = spec(11);
        let mut b = a.clone();
        b.motion_class = 3;
        let va = generate_synthetic_video(&a, 8, 32, 32).unwrap();
        let vb = generate_synthetic_video(&b, 8, 32, 32).unwrap();
        assert_eq!(va.frame(0), vb.frame(0));
        assert_ne!(va.frames, vb.frames);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(
            generate_synthetic_video(&spec(1), 1, 32, 32),
            Err(Error::Dimensions(_))
        ));
        assert!(generate_synthetic_video(&spec(1), 8, 4, 32).is_err());
    }

    #[test]
    fn values_in_unit_interval() {
        let v = generate_synthetic_video(&spec(5), 4, 16, 16).unwrap();
        assert!(v.frames.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    fn counting_video(length: usize) -> Video {
        // every value of frame k equals k / length
        let frames = (0..length)
            .flat_map(|k| std::iter::repeat_n(k as f32 / length as f32, 2 * 2 * 3))
            .collect();
        Video::new(0, length, 2, 2, frames, None).unwrap()
    }

    #[test]
    fn clip_indices_follow_stride() {
        let v = counting_video(64);
        let cfg = ClipSampleConfig::new(8, 8).unwrap();
        let clip = sample_clip_at(&v, &cfg, 0).unwrap();
        let got: Vec<usize> = (0..8).map(|k| (clip.frame(k)[0] * 64.0).round() as usize).collect();
        assert_eq!(got, vec![0, 8, 16, 24, 32, 40, 48, 56]);

        let cfg = ClipSampleConfig::new(16, 4).unwrap();
        let clip = sample_clip_at(&v, &cfg, 0).unwrap();
        let got: Vec<usize> = (0..16).map(|k| (clip.frame(k)[0] * 64.0).round() as usize).collect();
        assert_eq!(got, (0..16).map(|k| 4 * k).collect::<Vec<_>>());
    }

    #[test]
    fn single_frame_clips_rejected() {
        assert!(ClipSampleConfig::new(1, 8).is_err());
    }

    #[test]
    fn short_video_error_names_minimum() {
        let v = counting_video(20);
        let cfg = ClipSampleConfig::new(8, 4).unwrap();
        let err = sample_clip(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("at least 32"), "{err}");
    }

    #[test]
    fn random_clips_are_subsets_of_source_frames() {
        let v = counting_video(64);
        let cfg = ClipSampleConfig::new(8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let clip = sample_clip(&v, &cfg, &mut rng).unwrap();
            let s = clip.provenance.start;
            for k in 0..8 {
                assert_eq!(clip.frame(k), v.frame(s + 4 * k));
            }
        }
    }

    #[test]
    fn grid_starts_cover_range() {
        assert_eq!(uniform_starts(30, 4), vec![0, 10, 20, 30]);
        assert_eq!(uniform_starts(0, 3), vec![0, 0, 0]);
    }

    #[test]
    fn frame_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_synthetic_video(&spec(9), 5, 16, 16).unwrap();
        write_video_frames(&v, dir.path()).unwrap();
        let back = load_video_frames(dir.path()).unwrap();
        assert_eq!((back.length, back.height, back.width), (5, 16, 16));
        let max_err = v
            .frames
            .iter()
            .zip(&back.frames)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0, "max error {max_err}");
    }

    #[test]
    fn identical_frames_load_equal() {
        let dir = tempfile::tempdir().unwrap();
        let frame: Vec<f32> = (0..8 * 8 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let frames = frame.iter().copied().cycle().take(10 * frame.len()).collect();
        let v = Video::new(0, 10, 8, 8, frames, None).unwrap();
        write_video_frames(&v, dir.path()).unwrap();
        let back = load_video_frames(dir.path()).unwrap();
        assert_eq!(back.length, 10);
        for i in 1..10 {
            assert_eq!(back.frame(i), back.frame(0));
        }
    }

    #[test]
    fn empty_directory_reports_no_frames() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_video_frames(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no frames"));
    }

    #[test]
    fn mixed_sizes_name_offending_frame() {
        let dir = tempfile::tempdir().unwrap();
        image::RgbImage::new(8, 8).save(dir.path().join("a.png")).unwrap();
        image::RgbImage::new(8, 9).save(dir.path().join("b.png")).unwrap();
        let err = load_video_frames(dir.path()).unwrap_err();
        assert!(err.to_string().contains("b.png"), "{err}");
    }

    #[test]
    fn unreadable_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        image::RgbImage::new(8, 8).save(dir.path().join("a.png")).unwrap();
        fs::write(dir.path().join("b.png"), b"not a png").unwrap();
        let err = load_video_frames(dir.path()).unwrap_err();
        assert!(err.to_string().contains("b.png"), "{err}");
    }

    #[test]
    fn manifest_round_trip_materializes_same_videos() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDatasetConfig {
            num_videos: 6,
            length: 8,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&synthetic_manifest(&cfg), &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        let direct = cfg.generate().unwrap();
        assert_eq!(loaded.videos(), direct.videos());
        assert_eq!(direct.num_classes(), 4);
    }
}
