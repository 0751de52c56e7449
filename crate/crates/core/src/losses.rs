//! Loss terms of the two-head model and their weighted composition.
//!
//! Every term is normalised by its element count so the weights keep the
//! same meaning across videos of different lengths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the foreground loss in the total.
    pub alpha: f32,
    /// Weight of the conditional loss in the total.
    pub beta: f32,
    /// Weight of the background-only total-mass term inside the foreground loss.
    pub gamma: f32,
    /// Weight of the smoothness term inside the foreground loss.
    pub delta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.01,
            delta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f32,
    pub bg_only: f32,
    pub laplacian: f32,
    pub foreground: f32,
    pub conditional: f32,
    pub video: f32,
    pub total: f32,
}

impl LossBreakdown {
    /// Applies the composition rule to already computed components.
    pub fn compose(
        ce: f32,
        bg_only: f32,
        laplacian: f32,
        conditional: f32,
        video: f32,
        w: &LossWeights,
    ) -> Self {
        let foreground = ce + w.gamma * bg_only + w.delta * laplacian;
        let total = video + w.alpha * foreground + w.beta * conditional;
        Self {
            ce,
            bg_only,
            laplacian,
            foreground,
            conditional,
            video,
            total,
        }
    }

    fn components(&self) -> [(&'static str, f32); 7] {
        [
            ("ce", self.ce),
            ("bg_only", self.bg_only),
            ("laplacian", self.laplacian),
            ("foreground", self.foreground),
            ("conditional", self.conditional),
            ("video", self.video),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    /// Element-wise mean of per-video breakdowns, accumulated in order.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f32| (items.iter().map(|b| f(b) as f64).sum::<f64>() / n) as f32;
        Self {
            ce: avg(|b| b.ce),
            bg_only: avg(|b| b.bg_only),
            laplacian: avg(|b| b.laplacian),
            foreground: avg(|b| b.foreground),
            conditional: avg(|b| b.conditional),
            video: avg(|b| b.video),
            total: avg(|b| b.total),
        }
    }
}

/// A loss value on the tape, with whether any element contributed.
#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub var: Var,
    pub populated: bool,
}

/// Mean BCE of the thresholded foreground score over labeled frames.
pub fn bce_foreground(tape: &mut Tape, f_thresholded: Var, labels: &[f32], label_mask: &[f32]) -> Result<Term> {
    let var = tape.bce(f_thresholded, labels, label_mask)?;
    Ok(Term {
        var,
        populated: label_mask.iter().any(|&m| m > 0.0),
    })
}

/// Mean `|F|` over valid frames for background-only videos, 0 otherwise.
pub fn total_mass_bg(tape: &mut Tape, f: Var, mask: &[f32], is_bg_only: bool) -> Result<Var> {
    if is_bg_only {
        tape.abs_mean(f, mask)
    } else {
        Ok(tape.constant(Tensor::scalar(0.0)))
    }
}

/// Mean absolute change of `F` across consecutive valid frames.
pub fn laplacian_reg(tape: &mut Tape, f: Var, mask: &[f32]) -> Result<Var> {
    tape.total_variation(f, mask)
}

/// Mean multi-label BCE over (foreground frame, class) pairs.
pub fn conditional_loss(tape: &mut Tape, cs: Var, cond_labels: &[f32], cond_weight: &[f32]) -> Result<Term> {
    let var = tape.bce(cs, cond_labels, cond_weight)?;
    Ok(Term {
        var,
        populated: cond_weight.iter().any(|&m| m > 0.0),
    })
}

/// Mean multi-label BCE between video scores and video labels.
pub fn video_loss(tape: &mut Tape, y: Var, labels: &[f32]) -> Result<Var> {
    let w = vec![1.0; labels.len()];
    tape.bce(y, labels, &w)
}

/// Loss components on the tape. Missing terms count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub ce: Option<Var>,
    pub bg_only: Option<Var>,
    pub laplacian: Option<Var>,
    pub conditional: Option<Var>,
    pub video: Option<Var>,
}

/// Builds `L_video + α·(L_ce + γ·L_bg + δ·L_lap) + β·L_cs` on the tape.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let val = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let breakdown = LossBreakdown::compose(
        val(tape, terms.ce),
        val(tape, terms.bg_only),
        val(tape, terms.laplacian),
        val(tape, terms.conditional),
        val(tape, terms.video),
        w,
    );
    if let Some(component) = breakdown.non_finite() {
        return Err(Error::NonFiniteLoss {
            component,
            step: 0,
            dump: format!("{breakdown:?}"),
        });
    }
    let parts = [
        (terms.video, 1.0),
        (terms.ce, w.alpha),
        (terms.bg_only, w.alpha * w.gamma),
        (terms.laplacian, w.alpha * w.delta),
        (terms.conditional, w.beta),
    ];
    let mut acc: Option<Var> = None;
    for (v, weight) in parts {
        let Some(v) = v else { continue };
        let scaled = tape.scale(v, weight);
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    let total = match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((total, breakdown))
}
