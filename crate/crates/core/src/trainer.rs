//! Batch assembly, the training loop and the three-arm ablation.
//!
//! Per-video gradients are computed independently (in parallel when enabled)
//! and summed in batch order, so a run is bit-identical whatever the thread
//! count.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Protocol};
use crate::exec::Exec;
use crate::inference::{check_compatible, run_inference, InferenceConfig};
use crate::labeling::{derive_supervision, FrameSupervision};
use crate::losses::{self, LossBreakdown, LossTerms, LossWeights};
use crate::model::{forward_on_tape, HeadLayout, ModelConfig, ModelParams};
use crate::numerics::{AdamState, Tape, Tensor, Var};
use crate::synthdata::{class_names, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AblationMode {
    /// Frame labels only, single action head.
    #[serde(rename = "FO")]
    Fo,
    /// Frame labels plus video labels, single action head.
    #[serde(rename = "FO+VL")]
    FoVl,
    /// The full decomposed model.
    #[default]
    #[serde(rename = "FO+VL+PD")]
    FoVlPd,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Fo, AblationMode::FoVl, AblationMode::FoVlPd];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Fo => "FO",
            AblationMode::FoVl => "FO+VL",
            AblationMode::FoVlPd => "FO+VL+PD",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            AblationMode::Fo => "fo",
            AblationMode::FoVl => "fo-vl",
            AblationMode::FoVlPd => "fo-vl-pd",
        }
    }

    pub fn heads(self) -> HeadLayout {
        match self {
            AblationMode::FoVlPd => HeadLayout::Decomposed,
            _ => HeadLayout::Single,
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.slug() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected FO, FO+VL or FO+VL+PD"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
    pub mode: AblationMode,
    /// Fraction of pre-first-occurrence frames sampled as negatives.
    pub bg_fraction: f64,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 30,
            seed: 0,
            mode: AblationMode::FoVlPd,
            bg_fraction: 0.2,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size settings: batch 16, learning rate 1e-5, `T = 3600`.
    pub fn full_scale_preset(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-5,
            model: ModelConfig::full_scale(feature_dim, num_classes),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.bg_fraction) {
            return Err(Error::Config(format!("bg_fraction {} not in [0, 1]", self.bg_fraction)));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// The model configuration with the head layout the mode requires.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            heads: self.mode.heads(),
            ..self.model.clone()
        }
    }
}

/// Seed for stream `index` of purpose `salt`.
fn derive_seed(seed: u64, salt: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_NEGATIVES: u64 = 1;
const SALT_SHUFFLE: u64 = 2;

/// One video padded or truncated to the training length.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    /// Position in the manifest.
    pub index: usize,
    /// `T×D` features, zero past the video's end.
    pub features: Tensor,
    /// 1 for real frames, 0 for padding.
    pub mask: Vec<f32>,
    pub supervision: FrameSupervision,
    pub labels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub frames: usize,
    pub feature_dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Features as one `N×T×D` tensor.
    pub fn stacked_features(&self) -> Tensor {
        let data = self.items.iter().flat_map(|i| i.features.data().iter().copied()).collect();
        Tensor::new(vec![self.items.len(), self.frames, self.feature_dim], data).expect("batch shape")
    }

    /// Validity masks as an `N×T` tensor.
    pub fn stacked_masks(&self) -> Tensor {
        let data = self.items.iter().flat_map(|i| i.mask.iter().copied()).collect();
        Tensor::new(vec![self.items.len(), self.frames], data).expect("batch shape")
    }
}

fn pad_item(
    index: usize,
    features: &Tensor,
    supervision: &FrameSupervision,
    labels: Vec<f32>,
    frames: usize,
) -> BatchItem {
    let (len, d) = (features.shape()[0], features.shape()[1]);
    let keep = len.min(frames);
    let mut data = features.data()[..keep * d].to_vec();
    data.resize(frames * d, 0.0);
    let mut mask = vec![1.0; keep];
    mask.resize(frames, 0.0);
    BatchItem {
        index,
        features: Tensor::new(vec![frames, d], data).expect("padded shape"),
        mask,
        supervision: supervision.resized(frames),
        labels,
    }
}

/// Training videos held in memory with their fixed frame supervision.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub frames: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    indices: Vec<usize>,
    features: Vec<Tensor>,
    supervision: Vec<FrameSupervision>,
    labels: Vec<Vec<f32>>,
}

impl TrainingData {
    /// Loads the listed manifest videos. Negatives are sampled once per video
    /// from `seed` and the video's manifest position.
    pub fn load(
        manifest: &Manifest,
        indices: &[usize],
        frames: usize,
        seed: u64,
        bg_fraction: f64,
        exec: Exec,
    ) -> Result<Self> {
        let loaded: Vec<Result<(Tensor, FrameSupervision)>> = exec.map(indices, |&i| {
            let v = manifest
                .videos
                .get(i)
                .ok_or_else(|| Error::Validation(format!("video index {i} out of range")))?;
            let features = crate::synthdata::read_features(&manifest.feature_path(v))?;
            if features.shape()[1] != manifest.feature_dim {
                return Err(Error::format(
                    manifest.feature_path(v),
                    format!("feature dim {} != manifest {}", features.shape()[1], manifest.feature_dim),
                ));
            }
            let sup = derive_supervision(
                &v.first_occurrences,
                features.shape()[0],
                manifest.num_classes,
                bg_fraction,
                derive_seed(seed, SALT_NEGATIVES, i as u64),
            )?;
            Ok((features, sup))
        });
        let mut features = Vec::with_capacity(indices.len());
        let mut supervision = Vec::with_capacity(indices.len());
        for r in loaded {
            let (f, s) = r?;
            features.push(f);
            supervision.push(s);
        }
        Ok(Self {
            frames,
            feature_dim: manifest.feature_dim,
            num_classes: manifest.num_classes,
            labels: indices.iter().map(|&i| manifest.videos[i].video_labels()).collect(),
            indices: indices.to_vec(),
            features,
            supervision,
        })
    }

    pub fn load_all(manifest: &Manifest, frames: usize, seed: u64, bg_fraction: f64, exec: Exec) -> Result<Self> {
        let all: Vec<usize> = (0..manifest.videos.len()).collect();
        Self::load(manifest, &all, frames, seed, bg_fraction, exec)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Batch of the videos at the given positions of this data set.
    pub fn batch(&self, positions: &[usize]) -> Batch {
        Batch {
            items: positions
                .iter()
                .map(|&p| {
                    pad_item(
                        self.indices[p],
                        &self.features[p],
                        &self.supervision[p],
                        self.labels[p].clone(),
                        self.frames,
                    )
                })
                .collect(),
            frames: self.frames,
            feature_dim: self.feature_dim,
        }
    }
}

/// Reads the listed videos and pads or truncates them to `frames`.
pub fn make_batch(
    manifest: &Manifest,
    indices: &[usize],
    frames: usize,
    seed: u64,
    bg_fraction: f64,
) -> Result<Batch> {
    let data = TrainingData::load(manifest, indices, frames, seed, bg_fraction, Exec::Sequential)?;
    let positions: Vec<usize> = (0..indices.len()).collect();
    Ok(data.batch(&positions))
}

/// Records the per-video objective of `mode` on `tape`.
pub fn video_objective(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    item: &BatchItem,
    mode: AblationMode,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if params.config().heads != mode.heads() {
        return Err(Error::Config(format!(
            "mode {} needs the {:?} head layout",
            mode.name(),
            mode.heads()
        )));
    }
    let sup = &item.supervision;
    let fv = forward_on_tape(tape, params, vars, &item.features, &item.mask)?;
    let cond_weight = sup.cond_weight();
    let terms = match mode {
        AblationMode::FoVlPd => {
            let f = fv.foreground.expect("decomposed head");
            let f_th = fv.foreground_thresholded.expect("decomposed head");
            LossTerms {
                ce: Some(losses::bce_foreground(tape, f_th, &sup.fg_labels, &sup.fg_label_mask)?.var),
                bg_only: Some(losses::total_mass_bg(tape, f, &item.mask, sup.is_bg_only)?),
                laplacian: Some(losses::laplacian_reg(tape, f, &item.mask)?),
                conditional: Some(losses::conditional_loss(tape, fv.conditional, &sup.cond_labels, &cond_weight)?.var),
                video: Some(losses::video_loss(tape, fv.video, &item.labels)?),
            }
        }
        AblationMode::Fo | AblationMode::FoVl => {
            // The single head is trained directly on labeled frames: positives
            // carry their class targets, sampled negatives all-zero targets.
            let frame = tape.bce(fv.action, &sup.cond_labels, &sup.label_weight())?;
            let cond = losses::conditional_loss(tape, fv.action, &sup.cond_labels, &cond_weight)?.var;
            let video = match mode {
                AblationMode::FoVl => Some(losses::video_loss(tape, fv.video, &item.labels)?),
                _ => None,
            };
            LossTerms {
                ce: Some(frame),
                conditional: Some(cond),
                video,
                ..LossTerms::default()
            }
        }
    };
    losses::total_loss(tape, &terms, weights)
}

/// Gradient of one video's loss with respect to every parameter, in layout order.
pub fn video_gradient(
    params: &ModelParams,
    item: &BatchItem,
    mode: AblationMode,
    weights: &LossWeights,
) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let vars = params.load(&mut tape, true);
    let (loss, breakdown) = video_objective(&mut tape, params, &vars, item, mode, weights)?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((grads, breakdown))
}

/// Mean gradient and loss over a batch, reduced in batch order.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &Batch,
    mode: AblationMode,
    weights: &LossWeights,
    exec: Exec,
) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch_gradient"));
    }
    let per_video = exec.map(&batch.items, |item| video_gradient(params, item, mode, weights));
    let mut sum: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut breakdowns = Vec::with_capacity(batch.len());
    for r in per_video {
        let (grads, b) = r?;
        for (acc, g) in sum.iter_mut().zip(&grads) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        breakdowns.push(b);
    }
    let n = batch.len() as f32;
    sum.iter_mut().flatten().for_each(|v| *v /= n);
    Ok((sum, LossBreakdown::mean(&breakdowns)))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub videos: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub params: ModelParams,
    pub steps: usize,
    pub history: Vec<StepRecord>,
    /// Checkpoints written, one per epoch, then the final one.
    pub checkpoints: Vec<PathBuf>,
    /// Seed the shuffling stream was derived from.
    pub shuffle_seed: u64,
}

pub const CHECKPOINT_NAME: &str = "checkpoint.c2f";
pub const LOG_NAME: &str = "train_log.jsonl";

/// Trains on every video of `manifest`. With `out`, writes a checkpoint per
/// epoch, the final `checkpoint.c2f` and the step log there.
pub fn train(config: &TrainConfig, manifest: &Manifest, out: Option<&Path>, exec: Exec) -> Result<TrainingRun> {
    config.validate()?;
    let model_config = config.effective_model();
    let mut params = ModelParams::init(&model_config, config.seed)?;
    check_compatible(&params, manifest)?;
    let data = TrainingData::load_all(manifest, model_config.max_frames, config.seed, config.bg_fraction, exec)?;
    train_on(config, &data, &mut params, out, exec)
}

/// Continues training `params` on prepared data.
pub fn train_on(
    config: &TrainConfig,
    data: &TrainingData,
    params: &mut ModelParams,
    out: Option<&Path>,
    exec: Exec,
) -> Result<TrainingRun> {
    config.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match out {
        Some(dir) => {
            let p = dir.join(LOG_NAME);
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let shuffle_seed = derive_seed(config.seed, SALT_SHUFFLE, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut adam = AdamState::new(config.learning_rate);
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.batch(chunk);
            let (grads, loss) = match batch_gradient(params, &batch, config.mode, &config.loss, exec) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss { component, dump, .. }) => {
                    return Err(Error::NonFiniteLoss { component, step, dump })
                }
                Err(e) => return Err(e),
            };
            if let Some(component) = loss.non_finite() {
                return Err(Error::NonFiniteLoss {
                    component,
                    step,
                    dump: format!("{loss:?}"),
                });
            }
            adam.step(params.named_mut(), &grads)?;
            let record = StepRecord {
                epoch,
                step,
                videos: chunk.len(),
                loss,
            };
            if let Some((file, path)) = log.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            history.push(record);
            step += 1;
        }
        if let Some(dir) = out {
            let p = dir.join(format!("checkpoint_epoch{:03}.c2f", epoch + 1));
            params.write_checkpoint(&p)?;
            checkpoints.push(p);
        }
    }
    if let Some(dir) = out {
        let p = dir.join(CHECKPOINT_NAME);
        params.write_checkpoint(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainingRun {
        params: params.clone(),
        steps: step,
        history,
        checkpoints,
        shuffle_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub mode: AblationMode,
    pub first_occurrence: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_occurrence: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub arms: Vec<ArmReport>,
}

impl AblationReport {
    pub fn arm(&self, mode: AblationMode) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.mode == mode)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let protocols: [(&str, fn(&ArmReport) -> Option<&EvalReport>); 2] = [
            ("first-occurrence", |a| Some(&a.first_occurrence)),
            ("all-occurrence", |a| a.all_occurrence.as_ref()),
        ];
        for (name, get) in protocols {
            if self.arms.iter().all(|a| get(a).is_none()) {
                continue;
            }
            let _ = writeln!(s, "{name} (seed {})", self.seed);
            let _ = writeln!(s, "{:<12}{:>8}{:>8}{:>8}{:>8}", "mode", "0.0", "0.1", "0.2", "AVG");
            for arm in &self.arms {
                let Some(r) = get(arm) else { continue };
                let _ = write!(s, "{:<12}", arm.mode.name());
                for v in &r.map {
                    let _ = write!(s, "{v:>8.1}");
                }
                let _ = writeln!(s, "{:>8.1}", r.average_map);
            }
        }
        s
    }
}

/// Trains each mode with the same seed and corpus and scores it on `test`.
///
/// The all-occurrence report is produced when the test manifest carries
/// segments. With `out`, each arm writes into `out/<slug>/`.
pub fn ablate(
    config: &TrainConfig,
    modes: &[AblationMode],
    train_manifest: &Manifest,
    test_manifest: &Manifest,
    inference: &InferenceConfig,
    out: Option<&Path>,
    exec: Exec,
) -> Result<AblationReport> {
    config.validate()?;
    let data = TrainingData::load_all(
        train_manifest,
        config.model.max_frames,
        config.seed,
        config.bg_fraction,
        exec,
    )?;
    let names = class_names(test_manifest.num_classes);
    let mut arms = Vec::new();
    for &mode in modes {
        let arm_config = TrainConfig {
            mode,
            ..config.clone()
        };
        let dir = out.map(|o| o.join(mode.slug()));
        let mut params = ModelParams::init(&arm_config.effective_model(), arm_config.seed)?;
        check_compatible(&params, train_manifest)?;
        let run = train_on(&arm_config, &data, &mut params, dir.as_deref(), exec)?;
        let preds = run_inference(&run.params, test_manifest, inference, exec)?;
        let first_occurrence = evaluate(&preds, test_manifest, Protocol::FirstOccurrence, &names)?;
        let all_occurrence = if test_manifest.has_segments() {
            Some(evaluate(&preds, test_manifest, Protocol::AllOccurrence, &names)?)
        } else {
            None
        };
        if let Some(d) = &dir {
            preds.write(&d.join("predictions.json"))?;
            first_occurrence.write(d, "report_first_occurrence")?;
            if let Some(r) = &all_occurrence {
                r.write(d, "report_all_occurrence")?;
            }
        }
        arms.push(ArmReport {
            mode,
            first_occurrence,
            all_occurrence,
        });
    }
    let report = AblationReport {
        seed: config.seed,
        arms,
    };
    if let Some(o) = out {
        let p = o.join("ablation.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        let p = o.join("ablation.txt");
        std::fs::write(&p, report.to_table()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}
