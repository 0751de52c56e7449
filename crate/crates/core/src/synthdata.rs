//! Seeded synthetic corpora of long videos with rare, contiguous action
//! segments, plus the on-disk feature and manifest formats.
//!
//! Frame features are a prototype plus isotropic Gaussian noise. Frames
//! inside a class segment use that class's prototype, and frames covered by
//! several classes use the mean of their prototypes. Class prototypes are
//! mutually orthogonal with pairwise distance `separation`.
//!
//! Background frames follow runs of scenes. Each video draws a few scenes
//! from a shared pool; occasionally a run shows a distractor instead, a scene
//! that partly resembles one class. Scenes are orthogonal to every class and
//! share the class prototype norm.
//!
//! Segment layout is planned per split so that each class covers its
//! configured fraction of all frames (up to rounding), then features are
//! synthesised per video from an independent random stream.
//!
//! # Feature file
//!
//! 16-byte header: `"C2FV"`, `u32` frames, `u32` dim, `u32` reserved (0),
//! followed by `frames × dim` little-endian `f32` values, row-major.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labeling::FirstOccurrence;
use crate::numerics::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"C2FV";
pub const MANIFEST_FORMAT: &str = "c2f-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_videos: usize,
    /// Share of videos assigned to the test split.
    pub test_fraction: f64,
    pub frames: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Fraction of all frames covered by each class.
    pub presence_rates: Vec<f64>,
    /// Mean segment length per class, in frames.
    pub mean_durations: Vec<f64>,
    /// Distance between any two prototypes.
    pub separation: f64,
    /// Per-dimension noise standard deviation.
    pub noise: f64,
    /// Lag-one autocorrelation of the noise over time, in `[0, 1)`.
    pub noise_correlation: f64,
    /// Probability that a segment is placed overlapping another class's segment.
    pub cooccurrence: f64,
    /// Fraction of videos that never receive a segment.
    pub bg_only_fraction: f64,
    /// Size of the shared background scene pool.
    pub background_scenes: usize,
    /// Scenes drawn from the pool for each video.
    pub scenes_per_video: usize,
    /// Mean length of a background scene run, in frames.
    pub scene_length: f64,
    /// Probability that a background run shows a distractor.
    pub distractor_rate: f64,
    /// Cosine similarity between a distractor and its class prototype.
    pub distractor_similarity: f64,
    /// Share of each class prototype's energy along one direction common to
    /// all classes, in `[0, 1)`. Class-to-class distance stays `separation`.
    pub shared_foreground: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_videos: 250,
            test_fraction: 0.2,
            frames: 240,
            feature_dim: 32,
            num_classes: 4,
            presence_rates: vec![0.008, 0.002, 0.013, 0.007],
            mean_durations: vec![23.0, 19.0, 28.0, 19.0],
            separation: 4.0,
            noise: 1.0,
            noise_correlation: 0.0,
            cooccurrence: 0.3,
            bg_only_fraction: 0.35,
            background_scenes: 24,
            scenes_per_video: 3,
            scene_length: 40.0,
            distractor_rate: 0.1,
            distractor_similarity: 0.6,
            shared_foreground: 0.25,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_videos == 0 || self.frames == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return bad("num_videos, frames, feature_dim and num_classes must be >= 1".into());
        }
        if self.presence_rates.len() != self.num_classes || self.mean_durations.len() != self.num_classes {
            return bad(format!(
                "presence_rates and mean_durations need {} entries",
                self.num_classes
            ));
        }
        if self.presence_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad(format!("presence rates must lie in [0, 1): {:?}", self.presence_rates));
        }
        if self.mean_durations.iter().any(|&d| !(d >= 1.0)) {
            return bad("mean durations must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.test_fraction)
            || !(0.0..=1.0).contains(&self.cooccurrence)
            || !(0.0..1.0).contains(&self.bg_only_fraction)
        {
            return bad("test_fraction, cooccurrence in [0,1]; bg_only_fraction in [0,1)".into());
        }
        if !(self.separation >= 0.0 && self.noise >= 0.0) {
            return bad("separation and noise must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.noise_correlation) {
            return bad(format!("noise_correlation {} not in [0, 1)", self.noise_correlation));
        }
        if self.background_scenes == 0 || self.scenes_per_video == 0 || self.scene_length < 1.0 {
            return bad("need at least one background scene per video, of length >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) || !(0.0..1.0).contains(&self.distractor_similarity) {
            return bad("distractor_rate in [0,1]; distractor_similarity in [0,1)".into());
        }
        if !(0.0..1.0).contains(&self.shared_foreground) {
            return bad(format!("shared_foreground {} not in [0, 1)", self.shared_foreground));
        }
        if self.num_classes >= self.feature_dim {
            return bad(format!(
                "{} classes leave no room for background in {} dimensions",
                self.num_classes, self.feature_dim
            ));
        }
        if self.mean_durations.iter().any(|&d| d.round() as usize + 2 > self.frames) {
            return bad("segments do not fit in a video".into());
        }
        Ok(())
    }

    pub fn test_videos(&self) -> usize {
        (self.num_videos as f64 * self.test_fraction).round() as usize
    }

    pub fn train_videos(&self) -> usize {
        self.num_videos - self.test_videos()
    }
}

/// One action instance in `[start, end)` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    /// Feature file, relative to the manifest's directory.
    pub path: String,
    pub length: usize,
    pub labels: Vec<u8>,
    pub first_occurrences: Vec<FirstOccurrence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Segment>>,
}

impl VideoEntry {
    pub fn video_labels(&self) -> Vec<f32> {
        self.labels.iter().map(|&b| b as f32).collect()
    }

    pub fn is_bg_only(&self) -> bool {
        self.labels.iter().all(|&b| b == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub videos: Vec<VideoEntry>,
    /// Directory the manifest was read from; feature paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn empty(split: &str, num_classes: usize, feature_dim: usize) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            version: 1,
            split: split.to_string(),
            num_classes,
            feature_dim,
            videos: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format(path, format!("unexpected format tag {:?}", m.format)));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for v in &m.videos {
            if v.labels.len() != m.num_classes {
                return Err(Error::format(path, format!("video {}: label width", v.id)));
            }
            crate::labeling::validate_annotations(&v.first_occurrences, v.length, m.num_classes)
                .map_err(|e| Error::format(path, format!("video {}: {e}", v.id)))?;
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn feature_path(&self, v: &VideoEntry) -> PathBuf {
        self.root.join(&v.path)
    }

    pub fn has_segments(&self) -> bool {
        self.videos.iter().all(|v| v.segments.is_some())
    }

    pub fn find(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Loads every feature file, in manifest order.
    pub fn load_features(&self, exec: Exec) -> Result<Vec<Tensor>> {
        exec.map(&self.videos, |v| {
            let t = read_features(&self.feature_path(v))?;
            if t.shape()[1] != self.feature_dim {
                return Err(Error::format(
                    self.feature_path(v),
                    format!("feature dim {} != manifest {}", t.shape()[1], self.feature_dim),
                ));
            }
            Ok(t)
        })
        .into_iter()
        .collect()
    }
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let mut out = Vec::with_capacity(16 + 4 * features.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing C2FV header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, d) = (word(4), word(8));
    if bytes.len() != 16 + 4 * t * d {
        return Err(Error::format(
            path,
            format!("{} bytes for a {t}×{d} feature matrix", bytes.len()),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![t, d], data)
}

/// One generated video before it is written.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub features: Tensor,
    pub segments: Vec<Segment>,
}

impl SyntheticVideo {
    pub fn labels(&self, num_classes: usize) -> Vec<u8> {
        let mut l = vec![0u8; num_classes];
        for s in &self.segments {
            l[s.class] = 1;
        }
        l
    }

    /// Earliest segment of each present class.
    pub fn first_occurrences(&self) -> Vec<FirstOccurrence> {
        first_occurrences(&self.segments)
    }
}

pub fn first_occurrences(segments: &[Segment]) -> Vec<FirstOccurrence> {
    let mut out: Vec<FirstOccurrence> = Vec::new();
    let mut sorted = segments.to_vec();
    sorted.sort_by_key(|s| (s.class, s.start));
    for s in sorted {
        if out.last().is_none_or(|o| o.class != s.class) {
            out.push(FirstOccurrence {
                class: s.class,
                start: s.start,
                end: s.end,
            });
        }
    }
    out
}

/// Frame counters accumulated while generating.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub videos: usize,
    pub frames: usize,
    pub foreground_frames: usize,
    pub class_frames: Vec<usize>,
}

impl FrameCounts {
    fn new(num_classes: usize) -> Self {
        Self {
            class_frames: vec![0; num_classes],
            ..Self::default()
        }
    }

    fn add(&mut self, length: usize, segments: &[Segment]) {
        self.videos += 1;
        self.frames += length;
        let mut fg = vec![false; length];
        for s in segments {
            self.class_frames[s.class] += s.len();
            fg[s.start..s.end].iter_mut().for_each(|f| *f = true);
        }
        self.foreground_frames += fg.iter().filter(|&&f| f).count();
    }
}

/// Per-class presence over all frames and over foreground frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: FrameCounts,
    /// Percent of all frames containing each class.
    pub all_frames_pct: Vec<f64>,
    /// Percent of foreground frames containing each class.
    pub foreground_pct: Vec<f64>,
    /// `foreground_pct / all_frames_pct` (0 when the class is absent).
    pub improvement: Vec<f64>,
    /// Percent of all frames that are foreground.
    pub foreground_total_pct: f64,
}

impl CorpusStats {
    pub fn from_counts(counts: FrameCounts) -> Self {
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        let all: Vec<f64> = counts.class_frames.iter().map(|&n| pct(n, counts.frames)).collect();
        let fg: Vec<f64> = counts
            .class_frames
            .iter()
            .map(|&n| pct(n, counts.foreground_frames))
            .collect();
        let improvement = all
            .iter()
            .zip(&fg)
            .map(|(&a, &f)| if a > 0.0 { f / a } else { 0.0 })
            .collect();
        Self {
            foreground_total_pct: pct(counts.foreground_frames, counts.frames),
            all_frames_pct: all,
            foreground_pct: fg,
            improvement,
            counts,
        }
    }

    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut s = format!("{:<12}", "Frames");
        for n in class_names {
            s += &format!("{n:>10}");
        }
        s += &format!("{:>10}\n", "any");
        s += &format!("{:<12}", "All");
        for v in &self.all_frames_pct {
            s += &format!("{:>9.2}%", v);
        }
        s += &format!("{:>9.2}%\n", self.foreground_total_pct);
        s += &format!("{:<12}", "Foreground");
        for v in &self.foreground_pct {
            s += &format!("{:>9.1}%", v);
        }
        s += "\n";
        s += &format!("{:<12}", "Improvement");
        for v in &self.improvement {
            s += &format!("{:>9.1}x", v);
        }
        s += "\n";
        s
    }
}

/// Class presence statistics over manifests carrying all-occurrence segments.
pub fn corpus_stats(manifests: &[Manifest]) -> Result<CorpusStats> {
    let num_classes = manifests.first().map(|m| m.num_classes).unwrap_or(0);
    let mut missing = Vec::new();
    let mut counts = FrameCounts::new(num_classes);
    for m in manifests {
        if m.num_classes != num_classes {
            return Err(Error::Validation("manifests disagree on class count".into()));
        }
        for v in &m.videos {
            let path = m.feature_path(v);
            if !path.is_file() {
                missing.push(path);
            }
            let segments = v.segments.as_ref().ok_or_else(|| {
                Error::Validation(format!(
                    "manifest for split {:?} has no all-occurrence segments (video {})",
                    m.split, v.id
                ))
            })?;
            counts.add(v.length, segments);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(CorpusStats::from_counts(counts))
}

/// Mean feature vectors of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub classes: Vec<Vec<f32>>,
    pub scenes: Vec<Vec<f32>>,
    /// One per class.
    pub distractors: Vec<Vec<f32>>,
}

impl Prototypes {
    /// Every prototype a background frame may be drawn around.
    pub fn background(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.scenes.iter().chain(&self.distractors)
    }
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-6).then(|| v.into_iter().map(|x| x / norm).collect())
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
    }
}

/// Seeded prototypes. Background ones have norm `separation / √2`, class ones
/// are longer by their shared foreground component.
pub fn prototypes(config: &CorpusConfig) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let d = config.feature_dim;
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    let mut classes: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes);
    while classes.len() < config.num_classes {
        let mut v = gaussian(&mut rng);
        project_out(&mut v, &classes);
        classes.extend(unit(v));
    }
    let mut basis = classes.clone();
    let off_class = |rng: &mut ChaCha8Rng, basis: &[Vec<f64>]| loop {
        let mut v = gaussian(rng);
        project_out(&mut v, basis);
        if let Some(u) = unit(v) {
            return u;
        }
    };
    if config.num_classes + 1 < d {
        let shared = off_class(&mut rng, &basis);
        let k = (config.shared_foreground / (1.0 - config.shared_foreground)).sqrt();
        for c in &mut classes {
            c.iter_mut().zip(&shared).for_each(|(x, s)| *x += k * s);
        }
        basis.push(shared);
    }
    let scenes: Vec<Vec<f64>> = (0..config.background_scenes).map(|_| off_class(&mut rng, &basis)).collect();
    let rho = config.distractor_similarity;
    let distractors: Vec<Vec<f64>> = classes
        .iter()
        .map(|c| {
            let u = off_class(&mut rng, &basis);
            let c = unit(c.clone()).expect("class prototypes are nonzero");
            c.iter().zip(&u).map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b).collect()
        })
        .collect();
    let scale = config.separation / std::f64::consts::SQRT_2;
    let cast = |vs: Vec<Vec<f64>>| -> Vec<Vec<f32>> {
        vs.into_iter()
            .map(|v| v.into_iter().map(|x| (x * scale) as f32).collect())
            .collect()
    };
    Prototypes {
        classes: cast(classes),
        scenes: cast(scenes),
        distractors: cast(distractors),
    }
}

/// Segment durations for one class summing exactly to `target` frames.
fn plan_durations(rng: &mut ChaCha8Rng, target: usize, mean: f64) -> Vec<usize> {
    let lo = (mean * 0.5).ceil().max(1.0) as usize;
    let hi = (mean * 1.5).floor().max(lo as f64) as usize;
    let mut out = Vec::new();
    let mut remaining = target;
    while remaining > 0 {
        let d = rng.random_range(lo..=hi).min(remaining);
        out.push(d);
        remaining -= d;
    }
    out
}

fn fits(existing: &[Segment], class: usize, start: usize, end: usize) -> bool {
    // Same-class segments stay at least one frame apart so they remain distinct.
    existing
        .iter()
        .filter(|s| s.class == class)
        .all(|s| end < s.start || start > s.end)
}

/// Plans segment layouts for `n` videos of `frames` frames.
fn plan_split(config: &CorpusConfig, n: usize, stream: u64) -> Result<Vec<Vec<Segment>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let t_len = config.frames;
    let mut layout: Vec<Vec<Segment>> = vec![Vec::new(); n];
    let n_bg = (config.bg_only_fraction * n as f64).round() as usize;
    let bg: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, n_bg.min(n)).into_iter().collect();
    let eligible: Vec<usize> = (0..n).filter(|i| !bg.contains(i)).collect();

    let mut pending: Vec<(usize, usize)> = Vec::new();
    for c in 0..config.num_classes {
        let target = (config.presence_rates[c] * (n * t_len) as f64).round() as usize;
        for d in plan_durations(&mut rng, target, config.mean_durations[c]) {
            pending.push((c, d));
        }
    }
    if !pending.is_empty() && eligible.is_empty() {
        return Err(Error::Config("presence rates need videos that may hold segments".into()));
    }
    // Longer segments first so they find room; ties keep class order.
    pending.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    for (class, d) in pending {
        let mut placed = false;
        for _attempt in 0..200 {
            let co_hosts: Vec<usize> = eligible
                .iter()
                .copied()
                .filter(|&v| layout[v].iter().any(|s| s.class != class))
                .collect();
            let (video, start) = if !co_hosts.is_empty() && rng.random_bool(config.cooccurrence) {
                let v = co_hosts[rng.random_range(0..co_hosts.len())];
                let others: Vec<Segment> = layout[v].iter().copied().filter(|s| s.class != class).collect();
                let o = others[rng.random_range(0..others.len())];
                let lo = o.start.saturating_sub(d / 2);
                let hi = (o.start + o.len() / 2).min(t_len - d).max(lo);
                (v, rng.random_range(lo..=hi).min(t_len - d))
            } else {
                let fewest = eligible.iter().map(|&v| layout[v].len()).min().unwrap();
                let pool: Vec<usize> = eligible
                    .iter()
                    .copied()
                    .filter(|&v| layout[v].len() == fewest)
                    .collect();
                let v = pool[rng.random_range(0..pool.len())];
                (v, rng.random_range(0..=t_len - d))
            };
            if fits(&layout[video], class, start, start + d) {
                layout[video].push(Segment {
                    class,
                    start,
                    end: start + d,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place a {d}-frame segment of class {class}; presence rates are infeasible"
            )));
        }
    }
    for l in &mut layout {
        l.sort();
    }
    Ok(layout)
}

fn synthesize(config: &CorpusConfig, protos: &Prototypes, segments: &[Segment], stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let (t_len, d) = (config.frames, config.feature_dim);
    let mut active = vec![Vec::<usize>::new(); t_len];
    for s in segments {
        for a in &mut active[s.start..s.end] {
            a.push(s.class);
        }
    }
    let own: Vec<usize> = rand::seq::index::sample(
        &mut rng,
        config.background_scenes,
        config.scenes_per_video.min(config.background_scenes),
    )
    .into_vec();
    let pick_scene = |rng: &mut ChaCha8Rng| -> &[f32] {
        if rng.random_bool(config.distractor_rate) {
            &protos.distractors[rng.random_range(0..config.num_classes)]
        } else {
            &protos.scenes[own[rng.random_range(0..own.len())]]
        }
    };
    // Scene runs have geometric lengths.
    let switch_p = 1.0 / config.scene_length;
    let mut scene = pick_scene(&mut rng);
    let mut data = Vec::with_capacity(t_len * d);
    // AR(1) noise with stationary standard deviation `config.noise`.
    let phi = config.noise_correlation as f32;
    let innovation = (1.0 - phi * phi).sqrt();
    let mut state: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = config.noise as f32;
    for (t, classes) in active.iter().enumerate() {
        if rng.random_bool(switch_p) {
            scene = pick_scene(&mut rng);
        }
        let mut mean = vec![0.0f32; d];
        if classes.is_empty() {
            mean.copy_from_slice(scene);
        } else {
            for &k in classes {
                mean.iter_mut().zip(&protos.classes[k]).for_each(|(m, p)| *m += p);
            }
            let n = classes.len() as f32;
            mean.iter_mut().for_each(|m| *m /= n);
        }
        for (m, z) in mean.into_iter().zip(&mut state) {
            if t > 0 {
                let e: f32 = StandardNormal.sample(&mut rng);
                *z = phi * *z + innovation * e;
            }
            data.push(m + noise * *z);
        }
    }
    Tensor::new(vec![t_len, d], data).expect("shape")
}

/// A generated split held in memory.
#[derive(Debug, Clone)]
pub struct GeneratedSplit {
    pub name: String,
    pub videos: Vec<SyntheticVideo>,
}

/// Generates the train and test splits in memory.
pub fn generate_splits(config: &CorpusConfig, exec: Exec) -> Result<Vec<GeneratedSplit>> {
    config.validate()?;
    let protos = prototypes(config);
    let sizes = [("train", config.train_videos()), ("test", config.test_videos())];
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (si, (name, n)) in sizes.into_iter().enumerate() {
        let layout = plan_split(config, n, 1 + si as u64)?;
        let videos = exec.map_range(n, |i| SyntheticVideo {
            id: format!("{name}-{i:04}"),
            features: synthesize(config, &protos, &layout[i], 1000 + offset + i as u64),
            segments: layout[i].clone(),
        });
        offset += n as u64;
        out.push(GeneratedSplit {
            name: name.to_string(),
            videos,
        });
    }
    Ok(out)
}

/// Paths of a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Training manifest (first occurrences only).
    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("train").join("manifest.json")
    }

    /// Training manifest with the hidden all-occurrence segments.
    pub fn train_manifest_full(&self) -> PathBuf {
        self.root.join("train").join("manifest_full.json")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.root.join("test").join("manifest.json")
    }

    pub fn stats_json(&self) -> PathBuf {
        self.root.join("stats.json")
    }

    pub fn stats_txt(&self) -> PathBuf {
        self.root.join("stats.txt")
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class{c}")).collect()
}

#[derive(Debug, Clone)]
pub struct GenerationSummary {
    pub layout: CorpusLayout,
    /// Counters accumulated while generating, over both splits.
    pub counts: FrameCounts,
    pub stats: CorpusStats,
}

/// Generates a corpus and writes features, manifests and statistics under `out`.
pub fn generate_corpus(config: &CorpusConfig, out: &Path, exec: Exec) -> Result<GenerationSummary> {
    let splits = generate_splits(config, exec)?;
    let layout = CorpusLayout::new(out);
    let mut counts = FrameCounts::new(config.num_classes);
    for split in &splits {
        let dir = out.join(&split.name);
        let fdir = dir.join("features");
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        let written: Vec<Result<()>> = exec.map(&split.videos, |v| {
            write_features(&fdir.join(format!("{}.c2fv", v.id)), &v.features)
        });
        written.into_iter().collect::<Result<()>>()?;

        let mut manifest = Manifest::empty(&split.name, config.num_classes, config.feature_dim);
        for v in &split.videos {
            counts.add(config.frames, &v.segments);
            manifest.videos.push(VideoEntry {
                id: v.id.clone(),
                path: format!("features/{}.c2fv", v.id),
                length: config.frames,
                labels: v.labels(config.num_classes),
                first_occurrences: v.first_occurrences(),
                segments: Some(v.segments.clone()),
            });
        }
        if split.name == "train" {
            manifest.write(&layout.train_manifest_full())?;
            for v in &mut manifest.videos {
                v.segments = None;
            }
            manifest.write(&layout.train_manifest())?;
        } else {
            manifest.write(&layout.test_manifest())?;
        }
    }
    let stats = CorpusStats::from_counts(counts.clone());
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    let p = layout.stats_json();
    std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    let p = layout.stats_txt();
    std::fs::write(&p, stats.to_table(&class_names(config.num_classes))).map_err(|e| Error::io(&p, e))?;
    Ok(GenerationSummary {
        layout,
        counts,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_videos: 40,
            frames: 120,
            feature_dim: 16,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn zero_rates_give_background_only_videos() {
        let config = CorpusConfig {
            presence_rates: vec![0.0; 4],
            ..small()
        };
        for split in generate_splits(&config, Exec::Sequential).unwrap() {
            for v in split.videos {
                assert!(v.segments.is_empty());
                assert!(v.labels(4).iter().all(|&b| b == 0));
            }
        }
    }

    #[test]
    fn exported_first_occurrence_is_earliest_segment() {
        let config = small();
        for split in generate_splits(&config, Exec::Sequential).unwrap() {
            for v in &split.videos {
                let fo = v.first_occurrences();
                let labels = v.labels(4);
                for c in 0..4 {
                    let earliest = v.segments.iter().filter(|s| s.class == c).min_by_key(|s| s.start);
                    let exported = fo.iter().find(|o| o.class == c);
                    assert_eq!(earliest.is_some(), labels[c] == 1);
                    match (earliest, exported) {
                        (Some(s), Some(o)) => assert_eq!((s.start, s.end), (o.start, o.end)),
                        (None, None) => {}
                        _ => panic!("first occurrence mismatch in {}", v.id),
                    }
                }
            }
        }
    }

    #[test]
    fn same_class_segments_never_overlap() {
        let config = CorpusConfig {
            cooccurrence: 0.9,
            ..small()
        };
        for split in generate_splits(&config, Exec::Sequential).unwrap() {
            for v in &split.videos {
                for (i, a) in v.segments.iter().enumerate() {
                    for b in &v.segments[i + 1..] {
                        if a.class == b.class {
                            assert!(a.end < b.start || b.end < a.start);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn presence_quota_is_met_per_split() {
        let config = small();
        for split in generate_splits(&config, Exec::Sequential).unwrap() {
            let n = split.videos.len();
            for c in 0..4 {
                let frames: usize = split
                    .videos
                    .iter()
                    .flat_map(|v| v.segments.iter().filter(|s| s.class == c))
                    .map(Segment::len)
                    .sum();
                let target = (config.presence_rates[c] * (n * config.frames) as f64).round() as usize;
                assert_eq!(frames, target);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_parallel_invariant() {
        let a = generate_splits(&small(), Exec::Sequential).unwrap();
        let b = generate_splits(&small(), Exec::Parallel).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.videos, y.videos);
        }
        let other = generate_splits(&CorpusConfig { seed: 9, ..small() }, Exec::Sequential).unwrap();
        assert_ne!(a[0].videos[0].features, other[0].videos[0].features);
    }

    fn dist(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn prototype_geometry() {
        let config = small();
        let p = prototypes(&config);
        let sep = config.separation;
        for i in 0..p.classes.len() {
            for j in i + 1..p.classes.len() {
                assert!((dist(&p.classes[i], &p.classes[j]) - sep).abs() < 1e-4);
            }
            // |p_c|² = scale² · (1 + k²) with k² = w / (1 − w)
            let scale = sep / std::f64::consts::SQRT_2;
            let k2 = config.shared_foreground / (1.0 - config.shared_foreground);
            let norm = scale * (1.0 + k2).sqrt();
            for s in &p.scenes {
                assert!((dist(&p.classes[i], s) - scale * (2.0 + k2).sqrt()).abs() < 1e-4);
            }
            let rho = config.distractor_similarity;
            let expected = (norm * norm + scale * scale - 2.0 * rho * norm * scale).sqrt();
            assert!((dist(&p.classes[i], &p.distractors[i]) - expected).abs() < 1e-4);
        }
        assert_eq!(p.scenes.len(), config.background_scenes);
    }

    #[test]
    fn nearest_prototype_is_accurate_when_well_separated() {
        let config = CorpusConfig {
            separation: 10.0,
            cooccurrence: 0.0,
            ..small()
        };
        let protos = prototypes(&config);
        let candidates: Vec<(Option<usize>, &Vec<f32>)> = protos
            .classes
            .iter()
            .enumerate()
            .map(|(c, p)| (Some(c), p))
            .chain(protos.background().map(|p| (None, p)))
            .collect();
        let (mut right, mut total) = (0usize, 0usize);
        for split in generate_splits(&config, Exec::Sequential).unwrap() {
            for v in &split.videos {
                let mut truth = vec![None; config.frames];
                let mut covered = vec![0; config.frames];
                for s in &v.segments {
                    for t in s.start..s.end {
                        truth[t] = Some(s.class);
                        covered[t] += 1;
                    }
                }
                for t in 0..config.frames {
                    if covered[t] > 1 {
                        continue;
                    }
                    let x = v.features.row(t);
                    let predicted = candidates
                        .iter()
                        .min_by(|a, b| dist(x, a.1).total_cmp(&dist(x, b.1)))
                        .unwrap()
                        .0;
                    right += (predicted == truth[t]) as usize;
                    total += 1;
                }
            }
        }
        assert!(right as f64 / total as f64 >= 0.99, "{right}/{total}");
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let config = CorpusConfig {
            presence_rates: vec![0.9, 0.0, 0.0, 0.0],
            bg_only_fraction: 0.5,
            ..small()
        };
        assert!(matches!(generate_splits(&config, Exec::Sequential), Err(Error::Config(_))));
        assert!(CorpusConfig { mean_durations: vec![0.5; 4], ..small() }.validate().is_err());
        assert!(CorpusConfig { presence_rates: vec![0.1; 3], ..small() }.validate().is_err());
    }

    #[test]
    fn stats_arithmetic() {
        let mut counts = FrameCounts::new(2);
        counts.add(100, &[Segment { class: 0, start: 10, end: 20 }]);
        let s = CorpusStats::from_counts(counts);
        assert_eq!(s.all_frames_pct, vec![10.0, 0.0]);
        assert_eq!(s.foreground_total_pct, 10.0);
        assert_eq!(s.foreground_pct[0], 100.0);
        let empty = CorpusStats::from_counts(FrameCounts::new(2));
        assert_eq!(empty.all_frames_pct, vec![0.0, 0.0]);
        assert_eq!(empty.improvement, vec![0.0, 0.0]);
    }

    #[test]
    fn corpus_round_trip_and_stats_recount() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        let summary = generate_corpus(&config, dir.path(), Exec::Parallel).unwrap();
        let splits = generate_splits(&config, Exec::Sequential).unwrap();
        let train = Manifest::read(&summary.layout.train_manifest()).unwrap();
        assert!(train.videos.iter().all(|v| v.segments.is_none()));
        let feats = train.load_features(Exec::Sequential).unwrap();
        for (f, v) in feats.iter().zip(&splits[0].videos) {
            assert_eq!(f, &v.features);
        }
        let full = Manifest::read(&summary.layout.train_manifest_full()).unwrap();
        let test = Manifest::read(&summary.layout.test_manifest()).unwrap();
        let stats = corpus_stats(&[full, test.clone()]).unwrap();
        assert_eq!(stats.counts, summary.counts);
        assert!(corpus_stats(&[train]).is_err());

        std::fs::remove_file(test.feature_path(&test.videos[0])).unwrap();
        match corpus_stats(&[test]) {
            Err(Error::MissingFiles(p)) => assert_eq!(p.len(), 1),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_feature_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.c2fv");
        write_features(&p, &Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(read_features(&p).unwrap().shape(), &[3, 2]);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }
}
