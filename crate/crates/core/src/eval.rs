//! Temporal IoU, average precision and mAP under the first-occurrence and
//! all-occurrence protocols.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{PredictionsFile, SegmentPrediction};
use crate::synthdata::Manifest;

pub const IOU_THRESHOLDS: [f64; 3] = [0.0, 0.1, 0.2];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub video: String,
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    FirstOccurrence,
    AllOccurrence,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::FirstOccurrence => "first-occurrence",
            Protocol::AllOccurrence => "all-occurrence",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first-occurrence" => Ok(Protocol::FirstOccurrence),
            "all-occurrence" => Ok(Protocol::AllOccurrence),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

/// `|a ∩ b| / |a ∪ b|` for half-open frame intervals.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn passes(iou: f64, threshold: f64) -> bool {
    if threshold == 0.0 {
        iou > 0.0
    } else {
        iou >= threshold
    }
}

/// Prediction indices in ranking order: score descending, then start, end
/// and video ascending.
pub fn rank_order(preds: &[SegmentPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&preds[i], &preds[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
            .then(a.video.cmp(&b.video))
    });
    order
}

/// True-positive flags in ranking order, from greedy matching of each
/// prediction to the unmatched ground truth of highest IoU in its video.
pub fn greedy_match(preds: &[SegmentPrediction], gts: &[GroundTruthSegment], threshold: f64) -> Vec<bool> {
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video.as_str()).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    rank_order(preds)
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_video.get(p.video.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if matched[g] {
                    continue;
                }
                let iou = temporal_iou((p.start, p.end), (gts[g].start, gts[g].end));
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if passes(iou, threshold) => {
                    matched[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the precision-recall curve, with precision replaced by its
/// running maximum from the right before integrating over recall steps.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    flags
        .iter()
        .zip(&precision)
        .filter(|(&hit, _)| hit)
        .map(|(_, &p)| p)
        .sum::<f64>()
        / num_gt as f64
}

/// AP of one class, or `None` when there are neither predictions nor ground truth.
pub fn average_precision(
    preds: &[SegmentPrediction],
    gts: &[GroundTruthSegment],
    threshold: f64,
) -> Option<f64> {
    if preds.is_empty() && gts.is_empty() {
        return None;
    }
    Some(ap_from_flags(&greedy_match(preds, gts, threshold), gts.len()))
}

/// Applies the first-occurrence cut to one class's predictions in one video.
///
/// Predictions starting at or after `cut` are dropped; the rest are clipped to
/// end at `cut`.
pub fn truncate_at(preds: &[SegmentPrediction], cut: usize) -> Vec<SegmentPrediction> {
    preds
        .iter()
        .filter(|p| p.start < cut)
        .map(|p| SegmentPrediction {
            end: p.end.min(cut),
            ..p.clone()
        })
        .filter(|p| p.start < p.end)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
    /// AP ×100 per IoU threshold; `None` when the class is undefined.
    pub ap: Vec<Option<f64>>,
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// mAP ×100 per IoU threshold over defined classes.
    pub map: Vec<f64>,
    pub average_map: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    fn assemble(protocol: Protocol, classes: Vec<ClassReport>) -> Self {
        let map: Vec<f64> = (0..IOU_THRESHOLDS.len())
            .map(|i| mean(classes.iter().filter_map(|c| c.ap[i])).unwrap_or(0.0))
            .collect();
        let average_map = mean(map.iter().copied()).unwrap_or(0.0);
        Self {
            protocol,
            iou_thresholds: IOU_THRESHOLDS.to_vec(),
            classes,
            map,
            average_map,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }

    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| format!("{:>8}", "-"), |x| format!("{x:>8.1}"));
        let mut s = format!("protocol: {}\n{:<14}", self.protocol.name(), "mAP@IoU");
        for t in &self.iou_thresholds {
            let _ = write!(s, "{t:>8.1}");
        }
        s += &format!("{:>8}\n", "AVG");
        for c in &self.classes {
            let _ = write!(s, "{:<14}", c.name);
            for &v in &c.ap {
                s += &cell(v);
            }
            s += &cell(c.average);
            s += "\n";
        }
        let _ = write!(s, "{:<14}", "mAP");
        for &v in &self.map {
            s += &cell(Some(v));
        }
        s += &cell(Some(self.average_map));
        s += "\n";
        s
    }
}

/// Ground truth for `protocol`, indexed by class.
pub fn ground_truth(manifest: &Manifest, protocol: Protocol) -> Result<Vec<Vec<GroundTruthSegment>>> {
    let mut out = vec![Vec::new(); manifest.num_classes];
    for v in &manifest.videos {
        match protocol {
            Protocol::FirstOccurrence => {
                for o in &v.first_occurrences {
                    out[o.class].push(GroundTruthSegment {
                        video: v.id.clone(),
                        class: o.class,
                        start: o.start,
                        end: o.end,
                    });
                }
            }
            Protocol::AllOccurrence => {
                let segments = v.segments.as_ref().ok_or_else(|| {
                    Error::Validation(format!(
                        "all-occurrence protocol needs segments; video {} has none in the manifest",
                        v.id
                    ))
                })?;
                for s in segments {
                    out[s.class].push(GroundTruthSegment {
                        video: v.id.clone(),
                        class: s.class,
                        start: s.start,
                        end: s.end,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn evaluate(
    predictions: &PredictionsFile,
    manifest: &Manifest,
    protocol: Protocol,
    class_names: &[String],
) -> Result<EvalReport> {
    let c_count = manifest.num_classes;
    let known: HashMap<&str, usize> = manifest
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.id.as_str(), i))
        .collect();
    let mut per_class: Vec<BTreeMap<usize, Vec<SegmentPrediction>>> = vec![BTreeMap::new(); c_count];
    for p in &predictions.predictions {
        let &vi = known
            .get(p.video.as_str())
            .ok_or_else(|| Error::Validation(format!("prediction for unknown video {:?}", p.video)))?;
        if p.class >= c_count {
            return Err(Error::Validation(format!(
                "prediction class {} out of range for {c_count} classes",
                p.class
            )));
        }
        per_class[p.class].entry(vi).or_default().push(p.clone());
    }
    let gts = ground_truth(manifest, protocol)?;
    let mut classes = Vec::with_capacity(c_count);
    for (c, by_video) in per_class.into_iter().enumerate() {
        let mut preds = Vec::new();
        for (vi, ps) in by_video {
            let video = &manifest.videos[vi];
            match protocol {
                Protocol::FirstOccurrence => {
                    match video.first_occurrences.iter().find(|o| o.class == c) {
                        Some(o) => preds.extend(truncate_at(&ps, o.end)),
                        None => preds.extend(ps),
                    }
                }
                Protocol::AllOccurrence => preds.extend(ps),
            }
        }
        let ap: Vec<Option<f64>> = IOU_THRESHOLDS
            .iter()
            .map(|&t| average_precision(&preds, &gts[c], t).map(|v| 100.0 * v))
            .collect();
        let average = mean(ap.iter().flatten().copied()).filter(|_| ap.iter().all(Option::is_some));
        classes.push(ClassReport {
            class: c,
            name: class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
            num_predictions: preds.len(),
            num_ground_truth: gts[c].len(),
            ap,
            average,
        });
    }
    Ok(EvalReport::assemble(protocol, classes))
}

/// Ground truth of `protocol` written as predictions with score 1.
pub fn ground_truth_as_predictions(manifest: &Manifest, protocol: Protocol) -> Result<PredictionsFile> {
    let preds = ground_truth(manifest, protocol)?
        .into_iter()
        .flatten()
        .map(|g| SegmentPrediction {
            video: g.video,
            class: g.class,
            start: g.start,
            end: g.end,
            score: 1.0,
        })
        .collect();
    Ok(PredictionsFile::new(preds))
}
