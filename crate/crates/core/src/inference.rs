//! Segment proposals from frame-level action scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward, ModelParams, ScoreBundle};
use crate::synthdata::Manifest;

pub const PREDICTIONS_FORMAT: &str = "c2f-predictions";

/// A predicted instance of `class` in `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub video: String,
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Classes whose video score is below this emit nothing.
    pub video_threshold: f32,
    /// Frames with action score at or above this are candidates.
    pub frame_threshold: f32,
    /// Shortest segment kept, in frames.
    pub min_length: usize,
    /// Runs separated by at most this many frames are merged.
    pub merge_gap: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            video_threshold: 0.1,
            frame_threshold: 0.2,
            min_length: 1,
            merge_gap: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.video_threshold) || !unit.contains(&self.frame_threshold) {
            return Err(Error::Config("inference thresholds must lie in [0, 1]".into()));
        }
        if self.min_length == 0 {
            return Err(Error::Config("min_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Maximal runs of `true`, merged across gaps of at most `gap` frames.
pub fn merged_runs(active: &[bool], gap: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < active.len() {
        if !active[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < active.len() && active[t] {
            t += 1;
        }
        match runs.last_mut() {
            Some(last) if start - last.1 <= gap => last.1 = t,
            _ => runs.push((start, t)),
        }
    }
    runs
}

pub fn propose_segments(bundle: &ScoreBundle, config: &InferenceConfig, video: &str) -> Vec<SegmentPrediction> {
    let mut out = Vec::new();
    for c in 0..bundle.num_classes {
        if bundle.video[c] < config.video_threshold {
            continue;
        }
        let scores = bundle.action_column(c);
        let active: Vec<bool> = scores.iter().map(|&s| s >= config.frame_threshold).collect();
        for (start, end) in merged_runs(&active, config.merge_gap) {
            if end - start < config.min_length {
                continue;
            }
            // Gap frames score below threshold, so the maximum comes from run frames.
            let score = scores[start..end].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            out.push(SegmentPrediction {
                video: video.to_string(),
                class: c,
                start,
                end,
                score,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub format: String,
    pub version: u32,
    pub predictions: Vec<SegmentPrediction>,
}

impl PredictionsFile {
    pub fn new(mut predictions: Vec<SegmentPrediction>) -> Self {
        predictions.sort_by(|a, b| {
            (a.video.as_str(), a.class, a.start).cmp(&(b.video.as_str(), b.class, b.start))
        });
        Self {
            format: PREDICTIONS_FORMAT.to_string(),
            version: 1,
            predictions,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictions serialize") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.format != PREDICTIONS_FORMAT {
            return Err(Error::format(path, format!("unexpected format tag {:?}", file.format)));
        }
        for p in &file.predictions {
            if p.start >= p.end {
                return Err(Error::format(
                    path,
                    format!("empty segment [{}, {}) for video {}", p.start, p.end, p.video),
                ));
            }
        }
        Ok(file)
    }
}

pub fn check_compatible(params: &ModelParams, manifest: &Manifest) -> Result<()> {
    let m = params.config();
    let mut bad = Vec::new();
    if m.feature_dim != manifest.feature_dim {
        bad.push(format!("feature_dim: model {} vs manifest {}", m.feature_dim, manifest.feature_dim));
    }
    if m.num_classes != manifest.num_classes {
        bad.push(format!("num_classes: model {} vs manifest {}", m.num_classes, manifest.num_classes));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad.join("; ")))
    }
}

/// Scores every video of `manifest` at full length.
pub fn score_manifest(params: &ModelParams, manifest: &Manifest, exec: Exec) -> Result<Vec<ScoreBundle>> {
    check_compatible(params, manifest)?;
    let features = manifest.load_features(exec)?;
    exec.map(&features, |f| forward(params, f, &vec![1.0; f.shape()[0]]))
        .into_iter()
        .collect()
}

pub fn run_inference(
    params: &ModelParams,
    manifest: &Manifest,
    config: &InferenceConfig,
    exec: Exec,
) -> Result<PredictionsFile> {
    config.validate()?;
    let bundles = score_manifest(params, manifest, exec)?;
    let predictions = manifest
        .videos
        .iter()
        .zip(&bundles)
        .flat_map(|(v, b)| propose_segments(b, config, &v.id))
        .collect();
    Ok(PredictionsFile::new(predictions))
}
