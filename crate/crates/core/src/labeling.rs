//! Frame-level supervision derived from first-occurrence clip labels.
//!
//! Frames inside a labeled first occurrence are foreground. Only frames
//! before the earliest labeled start are safe negatives, since later frames
//! may contain unlabeled repeats; a seeded fraction of them is sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The labeled first instance of class `class` in `[start, end)` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FirstOccurrence {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSupervision {
    /// Foreground target per frame (0/1).
    pub fg_labels: Vec<f32>,
    /// Frames that contribute to the foreground loss (0/1).
    pub fg_label_mask: Vec<f32>,
    /// Per-frame class targets, `T×C` row-major.
    pub cond_labels: Vec<f32>,
    /// Frames that contribute to the conditional loss (0/1).
    pub fg_frame_mask: Vec<f32>,
    pub is_bg_only: bool,
    pub num_classes: usize,
}

impl FrameSupervision {
    pub fn len(&self) -> usize {
        self.fg_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg_labels.is_empty()
    }

    /// Truncates or zero-extends to `frames`; extended frames are masked out.
    pub fn resized(&self, frames: usize) -> Self {
        let c = self.num_classes;
        let fit = |v: &[f32], w: usize| {
            let mut out = v[..v.len().min(frames * w)].to_vec();
            out.resize(frames * w, 0.0);
            out
        };
        Self {
            fg_labels: fit(&self.fg_labels, 1),
            fg_label_mask: fit(&self.fg_label_mask, 1),
            cond_labels: fit(&self.cond_labels, c),
            fg_frame_mask: fit(&self.fg_frame_mask, 1),
            is_bg_only: self.is_bg_only,
            num_classes: c,
        }
    }

    /// `fg_frame_mask` broadcast over classes, for the conditional loss.
    pub fn cond_weight(&self) -> Vec<f32> {
        self.fg_frame_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, self.num_classes))
            .collect()
    }

    /// `fg_label_mask` broadcast over classes.
    pub fn label_weight(&self) -> Vec<f32> {
        self.fg_label_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, self.num_classes))
            .collect()
    }
}

pub fn validate_annotations(
    annotations: &[FirstOccurrence],
    video_len: usize,
    num_classes: usize,
) -> Result<()> {
    let mut seen = vec![false; num_classes];
    for a in annotations {
        if a.class >= num_classes {
            return Err(Error::Annotation(format!(
                "class {} out of range for {num_classes} classes",
                a.class
            )));
        }
        if a.start >= a.end || a.end > video_len {
            return Err(Error::Annotation(format!(
                "interval [{}, {}) of class {} invalid for a {video_len}-frame video",
                a.start, a.end, a.class
            )));
        }
        if std::mem::replace(&mut seen[a.class], true) {
            return Err(Error::Annotation(format!(
                "class {} has more than one first occurrence",
                a.class
            )));
        }
    }
    Ok(())
}

/// Frames eligible as negatives: `[0, min start)`, or the whole video when
/// nothing is labeled.
pub fn bg_candidate_region(annotations: &[FirstOccurrence], video_len: usize) -> std::ops::Range<usize> {
    match annotations.iter().map(|a| a.start).min() {
        Some(s) => 0..s.min(video_len),
        None => 0..video_len,
    }
}

pub fn derive_supervision(
    annotations: &[FirstOccurrence],
    video_len: usize,
    num_classes: usize,
    bg_fraction: f64,
    seed: u64,
) -> Result<FrameSupervision> {
    if !(0.0..=1.0).contains(&bg_fraction) {
        return Err(Error::Config(format!("bg_fraction {bg_fraction} not in [0, 1]")));
    }
    validate_annotations(annotations, video_len, num_classes)?;
    let mut sup = FrameSupervision {
        fg_labels: vec![0.0; video_len],
        fg_label_mask: vec![0.0; video_len],
        cond_labels: vec![0.0; video_len * num_classes],
        fg_frame_mask: vec![0.0; video_len],
        is_bg_only: annotations.is_empty(),
        num_classes,
    };
    if sup.is_bg_only {
        return Ok(sup);
    }
    for a in annotations {
        for t in a.start..a.end {
            sup.fg_labels[t] = 1.0;
            sup.fg_label_mask[t] = 1.0;
            sup.fg_frame_mask[t] = 1.0;
            sup.cond_labels[t * num_classes + a.class] = 1.0;
        }
    }
    let region = bg_candidate_region(annotations, video_len);
    let n = region.len();
    let amount = ((bg_fraction * n as f64).ceil() as usize).min(n);
    if amount > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in rand::seq::index::sample(&mut rng, n, amount) {
            sup.fg_label_mask[region.start + i] = 1.0;
        }
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn occ(class: usize, start: usize, end: usize) -> FirstOccurrence {
        FirstOccurrence { class, start, end }
    }

    #[test]
    fn no_annotations_is_bg_only_with_empty_masks() {
        let s = derive_supervision(&[], 50, 4, 0.2, 1).unwrap();
        assert!(s.is_bg_only);
        assert!(s.fg_label_mask.iter().all(|&m| m == 0.0));
        assert!(s.fg_frame_mask.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn single_occurrence_counts() {
        let s = derive_supervision(&[occ(0, 10, 20)], 100, 4, 0.2, 3).unwrap();
        let pos = s.fg_labels.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(pos, 10);
        let neg: Vec<usize> = (0..100)
            .filter(|&t| s.fg_label_mask[t] == 1.0 && s.fg_labels[t] == 0.0)
            .collect();
        assert_eq!(neg.len(), 2);
        assert!(neg.iter().all(|&t| t < 10));
        assert!(s.fg_label_mask[20..].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn overlapping_classes_get_both_labels() {
        let s = derive_supervision(&[occ(0, 10, 20), occ(1, 15, 30)], 40, 4, 0.0, 0).unwrap();
        assert_eq!(&s.cond_labels[16 * 4..17 * 4], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&s.cond_labels[12 * 4..13 * 4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&s.cond_labels[25 * 4..26 * 4], &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn candidate_region_examples() {
        assert_eq!(bg_candidate_region(&[occ(0, 50, 60), occ(1, 30, 40)], 100), 0..30);
        assert_eq!(bg_candidate_region(&[], 200), 0..200);
        assert_eq!(bg_candidate_region(&[occ(2, 0, 5)], 100), 0..0);
    }

    #[test]
    fn interval_past_end_is_annotation_error() {
        assert!(matches!(
            derive_supervision(&[occ(0, 90, 101)], 100, 4, 0.2, 0),
            Err(Error::Annotation(_))
        ));
        assert!(derive_supervision(&[occ(5, 1, 2)], 100, 4, 0.2, 0).is_err());
    }

    #[test]
    fn resize_masks_padding() {
        let s = derive_supervision(&[occ(1, 2, 4)], 6, 2, 1.0, 0).unwrap();
        let r = s.resized(8);
        assert_eq!(r.fg_label_mask, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.cond_labels.len(), 16);
        let r = s.resized(3);
        assert_eq!(r.fg_labels, vec![0.0, 0.0, 1.0]);
    }

    fn annotations_strategy() -> impl Strategy<Value = (Vec<FirstOccurrence>, usize)> {
        (20usize..200).prop_flat_map(|len| {
            let occ = (0usize..4, 0..len, 1usize..30).prop_map(move |(c, s, d)| {
                FirstOccurrence {
                    class: c,
                    start: s,
                    end: (s + d).min(len),
                }
            });
            (proptest::collection::vec(occ, 0..4), Just(len)).prop_map(|(mut v, len)| {
                v.sort_by_key(|o| o.class);
                v.dedup_by_key(|o| o.class);
                (v, len)
            })
        })
    }

    proptest! {
        #[test]
        fn supervision_invariants((ann, len) in annotations_strategy(), frac in 0.0f64..=1.0, seed in 0u64..1000) {
            let s = derive_supervision(&ann, len, 4, frac, seed).unwrap();
            let again = derive_supervision(&ann, len, 4, frac, seed).unwrap();
            prop_assert_eq!(&s, &again);
            let inside = |t: usize| ann.iter().any(|a| (a.start..a.end).contains(&t));
            let region = bg_candidate_region(&ann, len);
            let mut negatives = 0;
            for t in 0..len {
                prop_assert_eq!(s.fg_labels[t] == 1.0, inside(t));
                prop_assert_eq!(s.fg_frame_mask[t] == 1.0, inside(t));
                if s.fg_label_mask[t] == 1.0 && s.fg_labels[t] == 0.0 {
                    prop_assert!(region.contains(&t));
                    negatives += 1;
                }
                if s.fg_frame_mask[t] == 0.0 {
                    prop_assert!(s.cond_labels[t * 4..(t + 1) * 4].iter().all(|&v| v == 0.0));
                }
            }
            if !ann.is_empty() {
                prop_assert_eq!(negatives, (frac * region.len() as f64).ceil() as usize);
            }
        }
    }
}
