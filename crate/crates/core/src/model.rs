//! The two-head frame scoring network and its checkpoint format.
//!
//! A shared trunk (temporal convolution, then a stack of fully connected
//! layers, each followed by ReLU) feeds two sigmoid heads: a one-unit
//! foreground head and a `C`-unit conditional action head. Their product is
//! the frame action score, and the video score is its top-k mean over time.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32`, all reals little-endian `f32`:
//!
//! ```text
//! "C2F1"
//! feature_dim, num_classes, max_frames, conv_kernel, conv_channels
//! hidden_count, hidden[0..hidden_count]
//! fg_threshold (f32), topk_ratio (f32)
//! heads (0 = decomposed, 1 = single)
//! tensor_count
//! per tensor, in ModelParams::names() order:
//!     rank, dims[0..rank], values (f32 × product(dims))
//! ```
//!
//! Tensor order: `conv.weight`, `conv.bias`, `fc{i}.weight`, `fc{i}.bias`
//! for each hidden layer, then `fg_head.weight`, `fg_head.bias` (decomposed
//! layout only), then `action_head.weight`, `action_head.bias`.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"C2F1";
const FG_BIAS_INIT: f32 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadLayout {
    /// Foreground head times conditional action head.
    Decomposed,
    /// One action head scoring frames directly (ablation arms without decomposition).
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frame feature dimension `D`.
    pub feature_dim: usize,
    /// Number of action classes `C`.
    pub num_classes: usize,
    /// Frames per video after padding/truncation `T`.
    pub max_frames: usize,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub hidden: Vec<usize>,
    /// Foreground scores below this are zeroed before the frame loss.
    pub fg_threshold: f32,
    /// `k = max(1, floor(topk_ratio · valid_frames))`.
    pub topk_ratio: f32,
    pub heads: HeadLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            num_classes: 4,
            max_frames: 240,
            conv_kernel: 3,
            conv_channels: 64,
            hidden: vec![256, 128],
            fg_threshold: 0.05,
            topk_ratio: 0.01,
            heads: HeadLayout::Decomposed,
        }
    }
}

impl ModelConfig {
    /// Full-size network: `T = 3600` frames and `[1024, 512]` hidden units.
    pub fn full_scale(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            max_frames: 3600,
            conv_channels: 1024,
            hidden: vec![1024, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.num_classes == 0 || self.max_frames == 0 {
            return bad("feature_dim, num_classes and max_frames must be >= 1".into());
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.conv_channels == 0 || self.hidden.iter().any(|&h| h == 0) {
            return bad("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.fg_threshold) {
            return bad(format!("fg_threshold {} not in [0, 1)", self.fg_threshold));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return bad(format!("topk_ratio {} not in (0, 1]", self.topk_ratio));
        }
        Ok(())
    }

    pub fn topk(&self, valid_frames: usize) -> usize {
        ((self.topk_ratio as f64 * valid_frames as f64).floor() as usize).max(1)
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (
                "conv.weight".to_string(),
                vec![self.conv_kernel, self.feature_dim, self.conv_channels],
            ),
            ("conv.bias".to_string(), vec![self.conv_channels]),
        ];
        let mut width = self.conv_channels;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("fc{i}.weight"), vec![width, h]));
            out.push((format!("fc{i}.bias"), vec![h]));
            width = h;
        }
        if self.heads == HeadLayout::Decomposed {
            out.push(("fg_head.weight".to_string(), vec![width, 1]));
            out.push(("fg_head.bias".to_string(), vec![1]));
        }
        out.push(("action_head.weight".to_string(), vec![width, self.num_classes]));
        out.push(("action_head.bias".to_string(), vec![self.num_classes]));
        out
    }
}

/// Trainable weights, stored in the fixed order of [`ModelConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Seeded fan-in scaled uniform weights and zero biases; the foreground
    /// bias starts at −2 so an untrained model predicts mostly background.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                let fan_in = if shape.len() == 3 {
                    shape[0] * shape[1]
                } else {
                    shape[0]
                };
                let head = name.contains("head");
                let bound = if head {
                    (1.0 / fan_in as f32).sqrt()
                } else {
                    (6.0 / fan_in as f32).sqrt()
                };
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
            } else if name == "fg_head.bias" {
                t.data_mut()[0] = FG_BIAS_INIT;
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// `(name, tensor)` pairs for the optimizer.
    pub fn named_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`, tracked for gradients or not.
    pub fn load(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if tracked {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| Error::format(path, detail))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 4 * self.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(c.feature_dim as u32);
        put(c.num_classes as u32);
        put(c.max_frames as u32);
        put(c.conv_kernel as u32);
        put(c.conv_channels as u32);
        put(c.hidden.len() as u32);
        for &h in &c.hidden {
            put(h as u32);
        }
        out.extend_from_slice(&c.fg_threshold.to_le_bytes());
        out.extend_from_slice(&c.topk_ratio.to_le_bytes());
        let heads = match c.heads {
            HeadLayout::Decomposed => 0u32,
            HeadLayout::Single => 1u32,
        };
        out.extend_from_slice(&heads.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let mut word = || -> std::result::Result<[u8; 4], String> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| "truncated checkpoint".to_string())?;
            Ok(b)
        };
        let feature_dim = u32::from_le_bytes(word()?) as usize;
        let num_classes = u32::from_le_bytes(word()?) as usize;
        let max_frames = u32::from_le_bytes(word()?) as usize;
        let conv_kernel = u32::from_le_bytes(word()?) as usize;
        let conv_channels = u32::from_le_bytes(word()?) as usize;
        let n_hidden = u32::from_le_bytes(word()?) as usize;
        if n_hidden > 64 {
            return Err(format!("implausible hidden layer count {n_hidden}"));
        }
        let hidden = (0..n_hidden)
            .map(|_| word().map(|b| u32::from_le_bytes(b) as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let fg_threshold = f32::from_le_bytes(word()?);
        let topk_ratio = f32::from_le_bytes(word()?);
        let heads = match u32::from_le_bytes(word()?) {
            0 => HeadLayout::Decomposed,
            1 => HeadLayout::Single,
            other => return Err(format!("unknown head layout {other}")),
        };
        let config = ModelConfig {
            feature_dim,
            num_classes,
            max_frames,
            conv_kernel,
            conv_channels,
            hidden,
            fg_threshold,
            topk_ratio,
            heads,
        };
        config.validate().map_err(|e| e.to_string())?;
        let layout = config.layout();
        let count = u32::from_le_bytes(word()?) as usize;
        if count != layout.len() {
            return Err(format!("expected {} tensors, found {count}", layout.len()));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout {
            let rank = u32::from_le_bytes(word()?) as usize;
            let dims = (0..rank)
                .map(|_| word().map(|b| u32::from_le_bytes(b) as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if dims != shape {
                return Err(format!("tensor {name}: shape {dims:?}, expected {shape:?}"));
            }
            let n: usize = dims.iter().product();
            let data = (0..n)
                .map(|_| word().map(f32::from_le_bytes))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            names.push(name);
            tensors.push(Tensor::new(dims, data).map_err(|e| e.to_string())?);
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }
}

/// Scores for one video. Frames outside the validity mask score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    /// Foreground score per frame, `T`.
    pub foreground: Vec<f32>,
    /// Foreground score with sub-threshold entries zeroed, `T`.
    pub foreground_thresholded: Vec<f32>,
    /// Conditional action score, `T×C` row-major.
    pub conditional: Vec<f32>,
    /// Action score `foreground · conditional`, `T×C` row-major.
    pub action: Vec<f32>,
    /// Top-k mean of the action score per class, `C`.
    pub video: Vec<f32>,
    pub num_frames: usize,
    pub num_classes: usize,
}

impl ScoreBundle {
    pub fn action_at(&self, t: usize, c: usize) -> f32 {
        self.action[t * self.num_classes + c]
    }

    pub fn action_column(&self, c: usize) -> Vec<f32> {
        (0..self.num_frames).map(|t| self.action_at(t, c)).collect()
    }
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Masked foreground score `T×1`; `None` for the single-head layout.
    pub foreground: Option<Var>,
    pub foreground_thresholded: Option<Var>,
    /// Masked conditional score `T×C` (equals `action` for the single head).
    pub conditional: Var,
    pub action: Var,
    pub video: Var,
}

fn check_input(config: &ModelConfig, features: &Tensor, mask: &[f32]) -> Result<(usize, usize)> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::dim("forward", format!("features must be T×D, got {shape:?}")));
    }
    if shape[1] != config.feature_dim {
        return Err(Error::dim(
            "forward",
            format!("feature dim {} != model D {}", shape[1], config.feature_dim),
        ));
    }
    if mask.len() != shape[0] {
        return Err(Error::dim(
            "forward",
            format!("{} frames vs mask of {}", shape[0], mask.len()),
        ));
    }
    let valid = mask.iter().filter(|&&m| m > 0.0).count();
    if valid == 0 {
        return Err(Error::EmptyInput("forward"));
    }
    Ok((shape[0], valid))
}

/// Records the network on `tape`. `vars` come from [`ModelParams::load`].
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    features: &Tensor,
    mask: &[f32],
) -> Result<ForwardVars> {
    let config = params.config();
    let (t_len, valid) = check_input(config, features, mask)?;
    let depth = config.feature_dim;

    // Invalid frames are zeroed before the convolution so that padding never
    // leaks into neighbouring valid frames.
    let mut x = features.clone();
    for (t, &m) in mask.iter().enumerate() {
        if m <= 0.0 {
            x.data_mut()[t * depth..(t + 1) * depth].fill(0.0);
        }
    }
    debug_assert_eq!(x.shape()[0], t_len);
    let x = tape.constant(x);

    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("parameter vars match layout");
    let (cw, cb) = (next(), next());
    let mut h = tape.conv1d(x, cw, cb)?;
    h = tape.relu(h);
    for _ in &config.hidden {
        let (w, b) = (next(), next());
        h = tape.linear(h, w, b)?;
        h = tape.relu(h);
    }
    let k = config.topk(valid);
    match config.heads {
        HeadLayout::Decomposed => {
            let (fw, fb) = (next(), next());
            let (aw, ab) = (next(), next());
            let f = tape.linear(h, fw, fb)?;
            let f = tape.sigmoid(f);
            let f = tape.mask_rows(f, mask)?;
            let f_th = tape.threshold(f, config.fg_threshold);
            let cs = tape.linear(h, aw, ab)?;
            let cs = tape.sigmoid(cs);
            let cs = tape.mask_rows(cs, mask)?;
            let action = tape.mul_rows(f, cs)?;
            let video = tape.topk_mean(action, mask, k)?;
            Ok(ForwardVars {
                foreground: Some(f),
                foreground_thresholded: Some(f_th),
                conditional: cs,
                action,
                video,
            })
        }
        HeadLayout::Single => {
            let (aw, ab) = (next(), next());
            let a = tape.linear(h, aw, ab)?;
            let a = tape.sigmoid(a);
            let action = tape.mask_rows(a, mask)?;
            let video = tape.topk_mean(action, mask, k)?;
            Ok(ForwardVars {
                foreground: None,
                foreground_thresholded: None,
                conditional: action,
                action,
                video,
            })
        }
    }
}

/// Extracts a [`ScoreBundle`] from a recorded forward pass.
pub fn bundle_from_tape(tape: &Tape, fv: &ForwardVars, mask: &[f32], num_classes: usize) -> ScoreBundle {
    let valid: Vec<f32> = mask.iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 }).collect();
    let foreground = fv
        .foreground
        .map(|v| tape.value(v).data().to_vec())
        .unwrap_or_else(|| valid.clone());
    let foreground_thresholded = fv
        .foreground_thresholded
        .map(|v| tape.value(v).data().to_vec())
        .unwrap_or(valid);
    ScoreBundle {
        foreground,
        foreground_thresholded,
        conditional: tape.value(fv.conditional).data().to_vec(),
        action: tape.value(fv.action).data().to_vec(),
        video: tape.value(fv.video).data().to_vec(),
        num_frames: mask.len(),
        num_classes,
    }
}

/// Gradient-free forward pass for one video.
pub fn forward(params: &ModelParams, features: &Tensor, mask: &[f32]) -> Result<ScoreBundle> {
    let mut tape = Tape::new();
    let vars = params.load(&mut tape, false);
    let fv = forward_on_tape(&mut tape, params, &vars, features, mask)?;
    Ok(bundle_from_tape(&tape, &fv, mask, params.config().num_classes))
}

/// Zeroes entries of `scores` below `eps`.
pub fn threshold_foreground(scores: &[f32], eps: f32) -> Vec<f32> {
    scores.iter().map(|&v| if v >= eps { v } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            num_classes: 2,
            max_frames: 16,
            conv_channels: 6,
            hidden: vec![8, 5],
            ..ModelConfig::default()
        }
    }

    fn random_features(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![t, d], data).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&small(), 7).unwrap();
        let b = ModelParams::init(&small(), 7).unwrap();
        let c = ModelParams::init(&small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.get("fg_head.bias").unwrap().data(), &[-2.0]);
    }

    #[test]
    fn untrained_foreground_is_mostly_background() {
        let config = ModelConfig::default();
        let params = ModelParams::init(&config, 3).unwrap();
        let x = random_features(config.max_frames, config.feature_dim, 11);
        let mask = vec![1.0; config.max_frames];
        let b = forward(&params, &x, &mask).unwrap();
        let mean = b.foreground.iter().sum::<f32>() / b.foreground.len() as f32;
        // sigmoid(-2) ≈ 0.119; random head weights spread it a little.
        assert!((0.08..0.2).contains(&mean), "mean F = {mean}");
    }

    #[test]
    fn zero_weights_give_half_scores() {
        let config = small();
        let mut params = ModelParams::init(&config, 1).unwrap();
        params.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let x = Tensor::zeros(&[16, 4]);
        let mut mask = vec![1.0; 16];
        mask[15] = 0.0;
        let b = forward(&params, &x, &mask).unwrap();
        for t in 0..15 {
            assert_eq!(b.foreground[t], 0.5);
            for c in 0..2 {
                assert_eq!(b.conditional[t * 2 + c], 0.5);
                assert_eq!(b.action_at(t, c), 0.25);
            }
        }
        assert_eq!(b.foreground[15], 0.0);
        assert_eq!(b.action_at(15, 1), 0.0);
    }

    #[test]
    fn masked_frames_do_not_influence_scores() {
        let config = small();
        let params = ModelParams::init(&config, 5).unwrap();
        let mut x = random_features(16, 4, 2);
        let mut mask = vec![1.0; 16];
        mask[12..].fill(0.0);
        mask[3] = 0.0;
        let a = forward(&params, &x, &mask).unwrap();
        for t in [3usize, 12, 15] {
            for d in 0..4 {
                x.data_mut()[t * 4 + d] += 100.0;
            }
        }
        let b = forward(&params, &x, &mask).unwrap();
        assert_eq!(a, b);
        assert!(a.action[3 * 2..4 * 2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factorization_and_ranges_hold() {
        let config = small();
        let params = ModelParams::init(&config, 9).unwrap();
        let x = random_features(16, 4, 4);
        let b = forward(&params, &x, &[1.0; 16]).unwrap();
        for t in 0..16 {
            for c in 0..2 {
                let i = t * 2 + c;
                assert_eq!(b.action[i], b.foreground[t] * b.conditional[i]);
                assert!((0.0..=1.0).contains(&b.action[i]));
            }
            let ft = b.foreground_thresholded[t];
            assert!(ft == 0.0 || ft >= config.fg_threshold);
        }
        assert!(b.video.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_feature_dim_is_rejected() {
        let params = ModelParams::init(&small(), 0).unwrap();
        let x = Tensor::zeros(&[16, 5]);
        assert!(matches!(
            forward(&params, &x, &[1.0; 16]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let f = [0.04, 0.05, 0.9];
        assert_eq!(threshold_foreground(&f, 0.0), f.to_vec());
        assert_eq!(threshold_foreground(&f, 0.05), vec![0.0, 0.05, 0.9]);
        assert_eq!(threshold_foreground(&f, 1.0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        for heads in [HeadLayout::Decomposed, HeadLayout::Single] {
            let config = ModelConfig { heads, ..small() };
            let p = ModelParams::init(&config, 21).unwrap();
            let bytes = p.to_bytes();
            assert_eq!(&bytes[..4], b"C2F1");
            assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
            let q = ModelParams::from_bytes(&bytes).unwrap();
            assert_eq!(p, q);
            assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert!(ModelParams::from_bytes(&bad).is_err());
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { conv_kernel: 2, ..small() }.validate().is_err());
        assert!(ModelConfig { fg_threshold: 1.0, ..small() }.validate().is_err());
        assert!(ModelConfig { topk_ratio: 0.0, ..small() }.validate().is_err());
        assert!(ModelConfig { feature_dim: 0, ..small() }.validate().is_err());
        assert_eq!(ModelConfig::default().topk(240), 2);
        assert_eq!(ModelConfig::default().topk(50), 1);
    }
}
