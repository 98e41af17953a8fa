//! Joint training of the front-end controller and a small classifier on
//! the synthetic tasks, plus the evaluation and ablation harness.
//!
//! The back end is deliberately small: frame features are mean-pooled over
//! time and fed to a one-hidden-layer MLP (ReLU, width 128) with a softmax
//! readout. Training samples a random fixed-length crop of every clip each
//! step, runs the front end with gradient recording (the feedback
//! recurrence truncated every `bptt_window` frames), and takes one Adam
//! step per batch on the mean cross-entropy. Controller and classifier
//! share the optimizer — the whole point is that gradients reach the
//! controller through the filter re-synthesis.
//!
//! Evaluation follows whole-clip inference: consecutive non-overlapping
//! 1 s segments, logits averaged across segments, top-1/top-5 against the
//! label, plus the per-channel lagged energy-Q correlation summarizing how
//! the feedback reacts to loudness.

pub mod tasks;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frontend::{
    AfcNodes, BnBatchAccum, ControllerInput, Frontend, FrontendConfig, FrontendError,
};
use crate::gabor::SubbandTensor;
use crate::grad::adam::{AdamConfig, AdamState};
use crate::grad::params::{ParamId, ParamStore};
use crate::grad::{NodeId, Tape};
use tasks::{Split, ToyTask};

// ============================================================================
// Errors
// ============================================================================

#[derive(Debug)]
pub enum TrainError {
    TaskTooSmall(String),
    SplitLeakage,
    Frontend(FrontendError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::TaskTooSmall(what) => write!(f, "task too small: {what}"),
            TrainError::SplitLeakage => {
                write!(f, "train/valid/test splits share clip content")
            }
            TrainError::Frontend(e) => write!(f, "front-end error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<FrontendError> for TrainError {
    fn from(e: FrontendError) -> Self {
        TrainError::Frontend(e)
    }
}

// ============================================================================
// Variants
// ============================================================================

/// The six front-end conditions the ablation compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Full adaptive front end: level rule + controller, fixed bank on.
    #[serde(rename = "ada_fe")]
    AdaFe,
    /// Controller only (level rule structurally absent), reading FM.
    #[serde(rename = "ada_fe_s_fm")]
    AdaFeSFm,
    /// Controller only, reading dB energy.
    #[serde(rename = "ada_fe_s_eg")]
    AdaFeSEg,
    /// Controller only, reading energy and FM concatenated.
    #[serde(rename = "ada_fe_s_egfm")]
    AdaFeSEgFm,
    /// No adaptation at all: Q pinned at its resting value.
    #[serde(rename = "frozen_q_baseline")]
    FrozenQBaseline,
    /// Full adaptive front end without the fixed analysis bank.
    #[serde(rename = "no_fixed_layer")]
    NoFixedLayer,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::AdaFe => "ada_fe",
            Variant::AdaFeSFm => "ada_fe_s_fm",
            Variant::AdaFeSEg => "ada_fe_s_eg",
            Variant::AdaFeSEgFm => "ada_fe_s_egfm",
            Variant::FrozenQBaseline => "frozen_q_baseline",
            Variant::NoFixedLayer => "no_fixed_layer",
        }
    }

    pub fn all() -> [Variant; 6] {
        [
            Variant::AdaFe,
            Variant::AdaFeSFm,
            Variant::AdaFeSEg,
            Variant::AdaFeSEgFm,
            Variant::FrozenQBaseline,
            Variant::NoFixedLayer,
        ]
    }

    /// Whether this condition trains (and therefore needs) the controller.
    pub fn trains_controller(self) -> bool {
        !matches!(self, Variant::FrozenQBaseline)
    }

    /// Derives the front-end configuration for this condition from a base
    /// configuration (band, filter counts, frame geometry are inherited).
    pub fn apply(self, base: &FrontendConfig) -> FrontendConfig {
        let mut cfg = base.clone();
        cfg.controller_width = 0;
        cfg.fixed_layer_enabled = true;
        cfg.adaptation_enabled = true;
        match self {
            Variant::AdaFe => {
                cfg.lda_enabled = true;
                cfg.afc_input = ControllerInput::Fm;
            }
            Variant::AdaFeSFm => {
                cfg.lda_enabled = false;
                cfg.afc_input = ControllerInput::Fm;
            }
            Variant::AdaFeSEg => {
                cfg.lda_enabled = false;
                cfg.afc_input = ControllerInput::Energy;
            }
            Variant::AdaFeSEgFm => {
                cfg.lda_enabled = false;
                cfg.afc_input = ControllerInput::EnergyFm;
            }
            Variant::FrozenQBaseline => {
                cfg.lda_enabled = false;
                cfg.adaptation_enabled = false;
            }
            Variant::NoFixedLayer => {
                cfg.lda_enabled = true;
                cfg.afc_input = ControllerInput::Fm;
                cfg.fixed_layer_enabled = false;
            }
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::all()
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::all().iter().map(|v| v.label()).collect();
                format!("unknown variant {s:?} ({})", names.join("|"))
            })
    }
}

// ============================================================================
// Config and report
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Epoch cap; early stopping usually ends sooner.
    pub max_epochs: usize,
    /// Early-stopping patience on validation top-1.
    pub patience: usize,
    pub batch_size: usize,
    /// Crop length sampled per clip each step (seconds).
    pub clip_seconds: f64,
    /// Frames between feedback-gradient truncations (0 = full chain).
    pub bptt_window: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Classifier hidden width.
    pub hidden_width: usize,
    /// Seed the controller-input normalizer statistics with one no-grad
    /// pass before the first step.
    pub warm_start_bn: bool,
    /// Class-balanced training subsample (0 = use every training clip).
    pub max_train_clips: usize,
    /// Validation subsample for the per-epoch early-stopping metric
    /// (0 = full validation split).
    pub max_valid_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AdaFe,
            seed: 0,
            max_epochs: 150,
            patience: 15,
            batch_size: 64,
            clip_seconds: 1.0,
            bptt_window: 8,
            // The optimizer's own default (1e-4) suits large corpora; the
            // desk-scale tasks here converge in a handful of epochs at 1e-3.
            lr: 1e-3,
            weight_decay: 1e-4,
            hidden_width: 128,
            warm_start_bn: true,
            max_train_clips: 0,
            max_valid_clips: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::TaskTooSmall("batch size must be >= 1".into()));
        }
        if !(self.clip_seconds > 0.0) {
            return Err(TrainError::TaskTooSmall("clip seconds must be positive".into()));
        }
        if self.hidden_width == 0 {
            return Err(TrainError::TaskTooSmall("hidden width must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::TaskTooSmall("need at least one epoch".into()));
        }
        Ok(())
    }
}

/// Outcome of one training or evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    /// Epochs actually trained (early stopping included).
    pub epochs: usize,
    /// Validation top-1 after each epoch; length == `epochs`.
    pub valid_curve: Vec<f64>,
    /// Mean training loss of each epoch; length == `epochs`.
    pub loss_curve: Vec<f64>,
    /// Median over channels of the mean lagged energy-Q correlation on the
    /// test set; NaN when Q never moves (frozen baseline).
    pub q_energy_corr_median: f64,
}

// ============================================================================
// Parameter plumbing
// ============================================================================

const CLF_PARAM_NAMES: [&str; 4] =
    ["clf.fc1.weight", "clf.fc1.bias", "clf.fc2.weight", "clf.fc2.bias"];

#[derive(Debug, Clone, Copy)]
struct ClfNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Full parameter store for one run: controller tensors (frozen for the
/// baseline condition) followed by the classifier.
pub fn init_run_params(
    fe: &Frontend<f32>,
    classes: usize,
    hidden: usize,
    seed: u64,
    train_controller: bool,
) -> ParamStore<f32> {
    let mut params = fe.init_params(seed);
    if !train_controller {
        for name in crate::frontend::AFC_PARAM_NAMES {
            if let Some(id) = params.id(name) {
                params.entry_mut(id).trainable = false;
            }
        }
    }
    let d = fe.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed_c1f5));
    let mut he = |rows: usize, cols: usize| -> Vec<f32> {
        let std = (2.0 / cols as f64).sqrt();
        (0..rows * cols)
            .map(|_| {
                let n: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                (n * std) as f32
            })
            .collect()
    };
    let w1 = he(hidden, d);
    params.insert("clf.fc1.weight", hidden, d, w1, true);
    params.insert("clf.fc1.bias", hidden, 1, vec![0.0; hidden], true);
    // Zero output layer: logits start at exactly zero (loss = ln K), so no
    // epochs are wasted shrinking He-scale logits, and an untrained model
    // scores exactly 1/K under index tie-breaking.
    params.insert("clf.fc2.weight", classes, hidden, vec![0.0; classes * hidden], true);
    params.insert("clf.fc2.bias", classes, 1, vec![0.0; classes], true);
    params
}

fn clf_leaves(
    tape: &mut Tape<f32>,
    params: &ParamStore<f32>,
    trainable: bool,
) -> Result<ClfNodes, TrainError> {
    let mut ids = Vec::with_capacity(4);
    for name in CLF_PARAM_NAMES {
        let e = params
            .get(name)
            .ok_or_else(|| TrainError::Frontend(FrontendError::MissingParam(name.into())))?;
        ids.push(tape.leaf(&e.values, e.rows, e.cols, trainable));
    }
    Ok(ClfNodes { w1: ids[0], b1: ids[1], w2: ids[2], b2: ids[3] })
}

fn emit_classifier(tape: &mut Tape<f32>, pooled: NodeId, clf: &ClfNodes) -> NodeId {
    let pre1 = tape.matmul(clf.w1, pooled);
    let pre1 = tape.add(pre1, clf.b1);
    let h = tape.relu(pre1);
    let pre2 = tape.matmul(clf.w2, h);
    tape.add(pre2, clf.b2)
}

/// Plain-math classifier forward for inference.
pub fn classify_pooled(params: &ParamStore<f32>, pooled: &[f32]) -> Result<Vec<f32>, TrainError> {
    let get = |name: &str| {
        params
            .get(name)
            .ok_or_else(|| TrainError::Frontend(FrontendError::MissingParam(name.into())))
    };
    let w1 = get("clf.fc1.weight")?;
    let b1 = get("clf.fc1.bias")?;
    let w2 = get("clf.fc2.weight")?;
    let b2 = get("clf.fc2.bias")?;
    assert_eq!(w1.cols, pooled.len(), "pooled feature width");
    let hidden = w1.rows;
    let classes = w2.rows;
    let mut h = vec![0.0f32; hidden];
    for i in 0..hidden {
        let mut acc = 0.0f32;
        for (j, &p) in pooled.iter().enumerate() {
            acc += w1.values[i * pooled.len() + j] * p;
        }
        h[i] = (acc + b1.values[i]).max(0.0);
    }
    let mut logits = vec![0.0f32; classes];
    for i in 0..classes {
        let mut acc = 0.0f32;
        for (j, &hv) in h.iter().enumerate() {
            acc += w2.values[i * hidden + j] * hv;
        }
        logits[i] = acc + b2.values[i];
    }
    Ok(logits)
}

/// Tape leaves matched to `trainable_ids` order, so per-clip gradients land
/// in the optimizer's buffers by position.
fn trainable_leaves(
    params: &ParamStore<f32>,
    ids: &[ParamId],
    afc: Option<&AfcNodes>,
    clf: &ClfNodes,
) -> Vec<NodeId> {
    ids.iter()
        .map(|&id| {
            let name = params.entry(id).name.as_str();
            match (name, afc) {
                ("afc.bn.gamma", Some(a)) => a.bn_gamma,
                ("afc.bn.beta", Some(a)) => a.bn_beta,
                ("afc.fc1.weight", Some(a)) => a.w1,
                ("afc.fc1.bias", Some(a)) => a.b1,
                ("afc.fc2.diag", Some(a)) => a.d,
                ("afc.fc2.bias", Some(a)) => a.b2,
                ("clf.fc1.weight", _) => clf.w1,
                ("clf.fc1.bias", _) => clf.b1,
                ("clf.fc2.weight", _) => clf.w2,
                ("clf.fc2.bias", _) => clf.b2,
                (other, _) => unreachable!("unexpected trainable tensor {other}"),
            }
        })
        .collect()
}

// ============================================================================
// Shared helpers
// ============================================================================

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Frames covering `seconds` of audio (ceiling, at least 1).
pub fn frames_for_seconds(fe: &Frontend<f32>, seconds: f64) -> usize {
    ((seconds * fe.cfg.sample_rate / fe.frame_len as f64).ceil() as usize).max(1)
}

/// Rank of the label's logit (0 = top-1), ties broken by class index so
/// degenerate classifiers stay deterministic.
pub fn label_rank(logits: &[f32], label: usize) -> usize {
    let lv = logits[label];
    let mut rank = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > lv || (v == lv && j < label) {
            rank += 1;
        }
    }
    rank
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Class-balanced deterministic subsample: keeps the first ⌊budget/K⌋
/// clips of each class in a seeded shuffle of `idx`.
fn balanced_subsample(
    task: &ToyTask,
    idx: &[usize],
    budget: usize,
    seed: u64,
) -> Vec<usize> {
    if budget == 0 || budget >= idx.len() {
        return idx.to_vec();
    }
    let k = task.class_count();
    let per_class = (budget / k).max(1);
    let mut shuffled = idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xba1a_9ced));
    shuffled.shuffle(&mut rng);
    let mut taken = vec![0usize; k];
    let mut out = Vec::with_capacity(per_class * k);
    for &i in &shuffled {
        let c = task.clips[i].label;
        if taken[c] < per_class {
            taken[c] += 1;
            out.push(i);
        }
    }
    out.sort_unstable();
    out
}

/// Prepares the Q-independent part of the pipeline for every clip
/// (parallel across clips, deterministic order).
pub fn prepare_all(
    fe: &Frontend<f32>,
    task: &ToyTask,
) -> Result<Vec<Arc<SubbandTensor<f32>>>, TrainError> {
    let tensors: Result<Vec<_>, FrontendError> = task
        .clips
        .par_iter()
        .map(|clip| {
            let mut scratch = fe.scratch();
            fe.prepare_subbands(&clip.wave, &mut scratch).map(Arc::new)
        })
        .collect();
    Ok(tensors?)
}

// ============================================================================
// Per-clip passes
// ============================================================================

struct ClipResult {
    loss: f64,
    grads: Vec<Vec<f32>>,
    bn_rows: Vec<f32>,
    bn_width: usize,
}

/// Forward + backward over one training crop with the adaptive front end
/// on the tape. Gradients come back scaled by `inv_batch` so summing
/// across the batch yields batch-mean gradients.
#[allow(clippy::too_many_arguments)]
fn clip_pass_adaptive(
    fe: &Frontend<f32>,
    s: &SubbandTensor<f32>,
    label: usize,
    params: &ParamStore<f32>,
    ids: &[ParamId],
    lens: &[usize],
    bn_mean: &[f32],
    bn_var: &[f32],
    bptt_window: usize,
    offset: usize,
    crop: usize,
    inv_batch: f64,
) -> Result<ClipResult, TrainError> {
    let mut tape = Tape::<f32>::new();
    let afc = fe.afc_leaves(&mut tape, params, true)?;
    let clf = clf_leaves(&mut tape, params, true)?;
    let un = fe.emit_window(&mut tape, s, offset, crop, &afc, bn_mean, bn_var, bptt_window)?;
    let logits = emit_classifier(&mut tape, un.pooled, &clf);
    let loss = tape.softmax_cross_entropy(logits, label);
    let loss_val = tape.value(loss)[0] as f64;
    let head = tape.affine(loss, inv_batch, 0.0);
    tape.backward(head);
    let leaves = trainable_leaves(params, ids, Some(&afc), &clf);
    let mut grads: Vec<Vec<f32>> = lens.iter().map(|&l| vec![0.0; l]).collect();
    for (slot, &leaf) in leaves.iter().enumerate() {
        tape.accumulate_grad(leaf, &mut grads[slot]);
    }
    let bn_width = fe.cfg.afc_input.width(fe.adaptive_channels());
    let mut bn_rows = Vec::with_capacity(un.frames.len() * bn_width);
    for fr in &un.frames {
        bn_rows.extend_from_slice(tape.value(fr.ctrl_input));
    }
    Ok(ClipResult { loss: loss_val, grads, bn_rows, bn_width })
}

/// Per-frame features of one clip under a pinned front end, cached once:
/// with Q frozen the features carry no cross-frame state, so a crop's
/// pooled features are just the window mean.
pub struct ClipFeatures {
    data: Vec<f32>,
    pub frames: usize,
    pub dim: usize,
}

impl ClipFeatures {
    pub fn pooled_window(&self, start: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.dim];
        for t in start..start + n {
            for (o, &v) in out.iter_mut().zip(&self.data[t * self.dim..(t + 1) * self.dim]) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Classifier-only forward + backward for the frozen baseline.
fn clip_pass_frozen(
    feats: &ClipFeatures,
    label: usize,
    params: &ParamStore<f32>,
    ids: &[ParamId],
    lens: &[usize],
    offset: usize,
    crop: usize,
    inv_batch: f64,
) -> Result<ClipResult, TrainError> {
    let pooled = feats.pooled_window(offset, crop);
    let mut tape = Tape::<f32>::new();
    let p = tape.leaf(&pooled, pooled.len(), 1, false);
    let clf = clf_leaves(&mut tape, params, true)?;
    let logits = emit_classifier(&mut tape, p, &clf);
    let loss = tape.softmax_cross_entropy(logits, label);
    let loss_val = tape.value(loss)[0] as f64;
    let head = tape.affine(loss, inv_batch, 0.0);
    tape.backward(head);
    let leaves = trainable_leaves(params, ids, None, &clf);
    let mut grads: Vec<Vec<f32>> = lens.iter().map(|&l| vec![0.0; l]).collect();
    for (slot, &leaf) in leaves.iter().enumerate() {
        tape.accumulate_grad(leaf, &mut grads[slot]);
    }
    Ok(ClipResult { loss: loss_val, grads, bn_rows: Vec::new(), bn_width: 0 })
}

// ============================================================================
// Evaluation
// ============================================================================

#[derive(Debug, Clone, Copy)]
pub struct SplitScores {
    pub top1: f64,
    pub top5: f64,
    pub q_energy_corr_median: f64,
}

/// Whole-clip inference over the given clip indices: consecutive
/// non-overlapping 1 s segments, averaged logits, rank metrics, and the
/// per-channel lagged energy-Q correlation.
pub fn eval_indices(
    fe: &Frontend<f32>,
    task: &ToyTask,
    prepared: &[Arc<SubbandTensor<f32>>],
    idx: &[usize],
    params: &ParamStore<f32>,
) -> Result<SplitScores, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::TaskTooSmall("evaluation split is empty".into()));
    }
    let seg = frames_for_seconds(fe, 1.0);
    let classes = task.class_count();
    // Literal top-5: trivially 1.0 when the task has five or fewer classes.
    let k_eff = 5;
    let channels = fe.adaptive_channels();
    struct ClipEval {
        top1: bool,
        topk: bool,
        corr: Vec<(f64, usize)>,
    }
    let per_clip: Result<Vec<ClipEval>, TrainError> = idx
        .par_iter()
        .map(|&ci| {
            let s = &prepared[ci];
            let label = task.clips[ci].label;
            let mut scratch = fe.scratch();
            let mut logit_sum = vec![0.0f64; classes];
            let mut corr = vec![(0.0f64, 0usize); channels];
            let mut start = 0;
            let mut segments = 0;
            while start < s.frames() {
                let n = seg.min(s.frames() - start);
                let out = fe.run_window(s, start, n, params, &mut scratch)?;
                let fd = out.feature_dim;
                let mut pooled = vec![0.0f32; fd];
                for t in 0..n {
                    for (p, &v) in pooled.iter_mut().zip(&out.features[t * fd..(t + 1) * fd]) {
                        *p += v;
                    }
                }
                pooled.iter_mut().for_each(|v| *v /= n as f32);
                let logits = classify_pooled(params, &pooled)?;
                for (acc, &l) in logit_sum.iter_mut().zip(&logits) {
                    *acc += l as f64;
                }
                for (ch, slot) in corr.iter_mut().enumerate() {
                    if let Some(c) = out.qtrace.lagged_energy_q(ch) {
                        slot.0 += c;
                        slot.1 += 1;
                    }
                }
                segments += 1;
                start += n;
            }
            let avg: Vec<f32> =
                logit_sum.iter().map(|&v| (v / segments as f64) as f32).collect();
            let rank = label_rank(&avg, label);
            Ok(ClipEval { top1: rank == 0, topk: rank < k_eff, corr })
        })
        .collect();
    let per_clip = per_clip?;
    let n = per_clip.len() as f64;
    let top1 = per_clip.iter().filter(|c| c.top1).count() as f64 / n;
    let top5 = per_clip.iter().filter(|c| c.topk).count() as f64 / n;
    let mut channel_means = Vec::new();
    for ch in 0..channels {
        let (mut sum, mut cnt) = (0.0f64, 0usize);
        for c in &per_clip {
            sum += c.corr[ch].0;
            cnt += c.corr[ch].1;
        }
        if cnt > 0 {
            channel_means.push(sum / cnt as f64);
        }
    }
    Ok(SplitScores { top1, top5, q_energy_corr_median: median(channel_means) })
}

/// Evaluates stored parameters on a task's test split (no training).
pub fn evaluate(
    task: &ToyTask,
    params: &ParamStore<f32>,
    tcfg: &TrainConfig,
    base_fcfg: &FrontendConfig,
) -> Result<EvalReport, TrainError> {
    let fe = Frontend::<f32>::new(tcfg.variant.apply(base_fcfg))?;
    if !task.splits_disjoint() {
        return Err(TrainError::SplitLeakage);
    }
    let prepared = prepare_all(&fe, task)?;
    let idx = task.indices(Split::Test);
    let scores = eval_indices(&fe, task, &prepared, &idx, params)?;
    Ok(EvalReport {
        variant: tcfg.variant.label().to_string(),
        seed: tcfg.seed,
        top1: scores.top1,
        top5: scores.top5,
        epochs: 0,
        valid_curve: Vec::new(),
        loss_curve: Vec::new(),
        q_energy_corr_median: scores.q_energy_corr_median,
    })
}

// ============================================================================
// Training
// ============================================================================

/// Trains the configured variant on the task. Returns the best parameters
/// (by validation top-1) and the report with test metrics and curves.
pub fn train(
    task: &ToyTask,
    tcfg: &TrainConfig,
    base_fcfg: &FrontendConfig,
) -> Result<(ParamStore<f32>, EvalReport), TrainError> {
    train_with_cache(task, tcfg, base_fcfg, None)
}

/// [`train`] with an optional pre-built subband cache (index == clip
/// index), shared across runs whose fixed-layer setting matches.
pub fn train_with_cache(
    task: &ToyTask,
    tcfg: &TrainConfig,
    base_fcfg: &FrontendConfig,
    cache: Option<&[Arc<SubbandTensor<f32>>]>,
) -> Result<(ParamStore<f32>, EvalReport), TrainError> {
    tcfg.validate()?;
    let fe = Frontend::<f32>::new(tcfg.variant.apply(base_fcfg))?;
    for split in Split::all() {
        if task.indices(split).is_empty() {
            return Err(TrainError::TaskTooSmall(format!("{} split is empty", split.label())));
        }
    }
    if !task.splits_disjoint() {
        return Err(TrainError::SplitLeakage);
    }

    let prepared_owned;
    let prepared: &[Arc<SubbandTensor<f32>>] = match cache {
        Some(c) => {
            assert_eq!(c.len(), task.clips.len(), "cache must cover every clip");
            c
        }
        None => {
            prepared_owned = prepare_all(&fe, task)?;
            &prepared_owned
        }
    };

    let train_idx = balanced_subsample(
        task,
        &task.indices(Split::Train),
        tcfg.max_train_clips,
        mix(tcfg.seed, 1),
    );
    let valid_idx = balanced_subsample(
        task,
        &task.indices(Split::Valid),
        tcfg.max_valid_clips,
        mix(tcfg.seed, 2),
    );
    let test_idx = task.indices(Split::Test);
    if train_idx.is_empty() || valid_idx.is_empty() {
        return Err(TrainError::TaskTooSmall("subsampled split is empty".into()));
    }

    let classes = task.class_count();
    let adapting = tcfg.variant.trains_controller();
    let mut params =
        init_run_params(&fe, classes, tcfg.hidden_width, tcfg.seed, adapting);
    let ids = params.trainable_ids();
    let lens = params.lens(&ids);
    let adam_cfg = AdamConfig {
        lr: tcfg.lr,
        weight_decay: tcfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::<f32>::new(adam_cfg, &lens);

    // Frozen fast path: per-frame features are Q-independent, so extract
    // them once and train only the classifier on pooled windows.
    let frozen_feats: Option<Vec<ClipFeatures>> = if adapting {
        None
    } else {
        let feats: Result<Vec<_>, TrainError> = train_idx
            .par_iter()
            .map(|&ci| {
                let mut scratch = fe.scratch();
                let out = fe.run_prepared(&prepared[ci], &params, &mut scratch)?;
                Ok(ClipFeatures {
                    frames: out.qtrace.frames(),
                    dim: out.feature_dim,
                    data: out.features,
                })
            })
            .collect();
        Some(feats?)
    };
    // Clip index -> position within `train_idx` (for the frozen cache).
    let mut slot_of = vec![usize::MAX; task.clips.len()];
    for (slot, &ci) in train_idx.iter().enumerate() {
        slot_of[ci] = slot;
    }

    // Seed the controller-input normalizer from one no-grad pass over the
    // first batch worth of clips: stream each clip and collect the
    // controller-input rows (energy/FM as configured) frame by frame.
    if adapting && tcfg.warm_start_bn {
        let width = fe.cfg.afc_input.width(fe.adaptive_channels());
        let mut accum = BnBatchAccum::new(width);
        let warm = &train_idx[..train_idx.len().min(tcfg.batch_size)];
        let rows: Result<Vec<Vec<f32>>, TrainError> = warm
            .par_iter()
            .map(|&ci| {
                let s = &prepared[ci];
                let mut tape = Tape::<f32>::new();
                let mut state = fe.begin_utterance(&params)?;
                let mut rows = Vec::with_capacity(s.frames() * width);
                for t in 0..s.frames() {
                    let step = fe.step_rows(&mut state, &params, s.frame_matrix(t), &mut tape)?;
                    match fe.cfg.afc_input {
                        ControllerInput::Fm => rows.extend_from_slice(&step.fm),
                        ControllerInput::Energy => rows.extend_from_slice(&step.e_db),
                        ControllerInput::EnergyFm => {
                            rows.extend_from_slice(&step.e_db);
                            rows.extend_from_slice(&step.fm);
                        }
                    }
                }
                Ok(rows)
            })
            .collect();
        for clip_rows in rows? {
            for row in clip_rows.chunks(width) {
                accum.push_row(row);
            }
        }
        fe.absorb_bn_batch(&mut params, &accum)?;
    }

    let crop_cap = frames_for_seconds(&fe, tcfg.clip_seconds);
    let mut best_params: Option<ParamStore<f32>> = None;
    let mut best_top1 = f64::NEG_INFINITY;
    let mut bad_epochs = 0usize;
    let mut valid_curve = Vec::new();
    let mut loss_curve = Vec::new();

    for epoch in 0..tcfg.max_epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(tcfg.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_clips = 0usize;

        for batch in order.chunks(tcfg.batch_size) {
            let inv_batch = 1.0 / batch.len() as f64;
            // Draw crop offsets sequentially (determinism), then fan out.
            let jobs: Vec<(usize, usize, usize)> = batch
                .iter()
                .map(|&ci| {
                    let t = prepared[ci].frames();
                    let crop = crop_cap.min(t);
                    let offset = if t > crop { rng.gen_range(0..=t - crop) } else { 0 };
                    (ci, offset, crop)
                })
                .collect();
            let bn_mean: Vec<f32>;
            let bn_var: Vec<f32>;
            {
                let m = params.get("afc.bn.running_mean").expect("stats exist");
                let v = params.get("afc.bn.running_var").expect("stats exist");
                bn_mean = m.values.clone();
                bn_var = v.values.clone();
            }
            let results: Result<Vec<ClipResult>, TrainError> = jobs
                .par_iter()
                .map(|&(ci, offset, crop)| match &frozen_feats {
                    Some(feats) => {
                        let slot = slot_of[ci];
                        clip_pass_frozen(
                            &feats[slot],
                            task.clips[ci].label,
                            &params,
                            &ids,
                            &lens,
                            offset,
                            crop,
                            inv_batch,
                        )
                    }
                    None => clip_pass_adaptive(
                        &fe,
                        &prepared[ci],
                        task.clips[ci].label,
                        &params,
                        &ids,
                        &lens,
                        &bn_mean,
                        &bn_var,
                        tcfg.bptt_window,
                        offset,
                        crop,
                        inv_batch,
                    ),
                })
                .collect();
            let results = results?;

            let mut master: Vec<Vec<f32>> = lens.iter().map(|&l| vec![0.0; l]).collect();
            let mut accum: Option<BnBatchAccum> = None;
            for r in &results {
                epoch_loss += r.loss;
                epoch_clips += 1;
                for (m, g) in master.iter_mut().zip(&r.grads) {
                    for (a, &b) in m.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                if r.bn_width > 0 {
                    let acc = accum.get_or_insert_with(|| BnBatchAccum::new(r.bn_width));
                    for row in r.bn_rows.chunks(r.bn_width) {
                        acc.push_row(row);
                    }
                }
            }
            {
                let grad_refs: Vec<&[f32]> = master.iter().map(|g| g.as_slice()).collect();
                let mut slices = params.values_mut(&ids);
                adam.step(&mut slices, &grad_refs);
            }
            if let Some(acc) = accum {
                fe.absorb_bn_batch(&mut params, &acc)?;
            }
        }

        loss_curve.push(epoch_loss / epoch_clips.max(1) as f64);
        let scores = eval_indices(&fe, task, prepared, &valid_idx, &params)?;
        valid_curve.push(scores.top1);

        if scores.top1 > best_top1 + 1e-12 {
            best_top1 = scores.top1;
            best_params = Some(params.clone());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= tcfg.patience {
                break;
            }
        }
    }

    let final_params = best_params.unwrap_or(params);
    let scores = eval_indices(&fe, task, prepared, &test_idx, &final_params)?;
    let epochs = valid_curve.len();
    let report = EvalReport {
        variant: tcfg.variant.label().to_string(),
        seed: tcfg.seed,
        top1: scores.top1,
        top5: scores.top5,
        epochs,
        valid_curve,
        loss_curve,
        q_energy_corr_median: scores.q_energy_corr_median,
    };
    Ok((final_params, report))
}

// ============================================================================
// Ablation matrix
// ============================================================================

/// All runs of a variants x seeds sweep plus the two CSV artifacts.
#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub runs: Vec<EvalReport>,
    /// One row per run: variant, seed, top1, top5, epochs, corr median.
    pub per_run_csv: String,
    /// One row per variant: run count, mean and std of top-1/top-5.
    pub summary_csv: String,
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Runs every variant with every seed on one task, sharing the task's
/// prepared subbands across runs (and asserting all runs saw the same
/// test content).
pub fn ablation_matrix(
    task: &ToyTask,
    seeds: &[u64],
    base_fcfg: &FrontendConfig,
    base_tcfg: &TrainConfig,
) -> Result<MatrixResult, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::TaskTooSmall("need at least one seed".into()));
    }
    let test_fingerprint: u64 =
        task.split_hashes(Split::Test).iter().fold(0, |acc, h| acc ^ h);

    // One cache per fixed-layer setting; everything else about variant
    // flags leaves the prepared subbands untouched.
    let mut cache_fixed: Option<Vec<Arc<SubbandTensor<f32>>>> = None;
    let mut cache_raw: Option<Vec<Arc<SubbandTensor<f32>>>> = None;

    let mut runs = Vec::with_capacity(Variant::all().len() * seeds.len());
    for variant in Variant::all() {
        for &seed in seeds {
            let fcfg = variant.apply(base_fcfg);
            // Keep at most one cache alive: at ~2.5 MB per clip-second a
            // second concurrent cache would double peak memory.
            let cache = if fcfg.fixed_layer_enabled {
                if cache_fixed.is_none() {
                    cache_raw = None;
                    let fe = Frontend::<f32>::new(fcfg.clone())?;
                    cache_fixed = Some(prepare_all(&fe, task)?);
                }
                cache_fixed.as_deref()
            } else {
                if cache_raw.is_none() {
                    cache_fixed = None;
                    let fe = Frontend::<f32>::new(fcfg.clone())?;
                    cache_raw = Some(prepare_all(&fe, task)?);
                }
                cache_raw.as_deref()
            };
            let tcfg = TrainConfig { variant, seed, ..base_tcfg.clone() };
            let (_, report) = train_with_cache(task, &tcfg, base_fcfg, cache)?;
            let fp: u64 = task.split_hashes(Split::Test).iter().fold(0, |acc, h| acc ^ h);
            assert_eq!(fp, test_fingerprint, "test split changed between runs");
            runs.push(report);
        }
    }

    let mut per_run = String::from("variant,seed,top1,top5,epochs,q_energy_corr_median\n");
    for r in &runs {
        per_run.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            fmt_metric(r.top1),
            fmt_metric(r.top5),
            r.epochs,
            fmt_metric(r.q_energy_corr_median)
        ));
    }

    let mut summary =
        String::from("variant,runs,top1_mean,top1_std,top5_mean,top5_std,epochs_mean\n");
    for variant in Variant::all() {
        let vr: Vec<&EvalReport> =
            runs.iter().filter(|r| r.variant == variant.label()).collect();
        let n = vr.len() as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| vr.iter().map(|r| f(r)).sum::<f64>() / n;
        let std = |f: &dyn Fn(&EvalReport) -> f64, m: f64| {
            if vr.len() < 2 {
                0.0
            } else {
                (vr.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        };
        let m1 = mean(&|r| r.top1);
        let m5 = mean(&|r| r.top5);
        let me = mean(&|r| r.epochs as f64);
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            variant.label(),
            vr.len(),
            fmt_metric(m1),
            fmt_metric(std(&|r| r.top1, m1)),
            fmt_metric(m5),
            fmt_metric(std(&|r| r.top5, m5)),
            fmt_metric(me)
        ));
    }

    Ok(MatrixResult { runs, per_run_csv: per_run, summary_csv: summary })
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use tasks::{gen_synthetic_task, TaskKind};

    #[test]
    fn variant_flags_match_their_conditions() {
        let base = FrontendConfig::default();
        let f = Variant::AdaFe.apply(&base);
        assert!(f.lda_enabled && f.fixed_layer_enabled && f.adaptation_enabled);
        assert_eq!(f.afc_input, ControllerInput::Fm);

        let f = Variant::AdaFeSFm.apply(&base);
        assert!(!f.lda_enabled && f.adaptation_enabled);

        let f = Variant::AdaFeSEg.apply(&base);
        assert_eq!(f.afc_input, ControllerInput::Energy);

        let f = Variant::AdaFeSEgFm.apply(&base);
        assert_eq!(f.afc_input, ControllerInput::EnergyFm);

        let f = Variant::FrozenQBaseline.apply(&base);
        assert!(!f.adaptation_enabled);

        let f = Variant::NoFixedLayer.apply(&base);
        assert!(!f.fixed_layer_enabled && f.lda_enabled);
        for v in Variant::all() {
            v.apply(&base).validate().unwrap();
            let parsed: Variant = v.label().parse().unwrap();
            assert_eq!(parsed, v);
        }
        assert!("ada_fe_s_everything".parse::<Variant>().is_err());
    }

    #[test]
    fn label_rank_breaks_ties_by_index() {
        let logits = vec![0.0f32; 8];
        assert_eq!(label_rank(&logits, 0), 0, "all-equal logits put class 0 on top");
        assert_eq!(label_rank(&logits, 3), 3);
        let logits = vec![1.0, 3.0, 2.0, 3.0];
        assert_eq!(label_rank(&logits, 1), 0);
        assert_eq!(label_rank(&logits, 3), 1, "earlier equal logit outranks");
        assert_eq!(label_rank(&logits, 0), 3);
    }

    #[test]
    fn median_handles_odd_even_empty() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn balanced_subsample_is_balanced_and_deterministic() {
        let task = gen_synthetic_task(TaskKind::NoisyVowels, 5);
        let idx = task.indices(Split::Train);
        let a = balanced_subsample(&task, &idx, 40, 9);
        let b = balanced_subsample(&task, &idx, 40, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        for class in 0..4 {
            let n = a.iter().filter(|&&i| task.clips[i].label == class).count();
            assert_eq!(n, 10);
        }
        let full = balanced_subsample(&task, &idx, 0, 9);
        assert_eq!(full, idx);
    }

    #[test]
    fn frames_for_seconds_matches_frame_geometry() {
        let fe = Frontend::<f32>::new(FrontendConfig::default()).unwrap();
        assert_eq!(frames_for_seconds(&fe, 1.0), 91);
        assert_eq!(frames_for_seconds(&fe, 0.5), 46);
        assert_eq!(frames_for_seconds(&fe, 0.001), 1);
    }

    #[test]
    fn pooled_window_is_window_mean() {
        let feats = ClipFeatures {
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            frames: 3,
            dim: 2,
        };
        assert_eq!(feats.pooled_window(0, 3), vec![3.0, 4.0]);
        assert_eq!(feats.pooled_window(1, 2), vec![4.0, 5.0]);
        assert_eq!(feats.pooled_window(2, 1), vec![5.0, 6.0]);
    }

    #[test]
    fn classifier_graph_matches_plain_forward() {
        let fe = Frontend::<f32>::new(FrontendConfig {
            n_filters: 6,
            filter_len: 21,
            frame_ms: 4.0,
            dft_len: 256,
            ..FrontendConfig::default()
        })
        .unwrap();
        let params = init_run_params(&fe, 3, 8, 7, true);
        let d = fe.feature_dim();
        let pooled: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).sin()).collect();
        let direct = classify_pooled(&params, &pooled).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = tape.leaf(&pooled, d, 1, false);
        let clf = clf_leaves(&mut tape, &params, false).unwrap();
        let logits = emit_classifier(&mut tape, p, &clf);
        assert_eq!(tape.value(logits), &direct[..]);
    }

    #[test]
    fn frozen_run_params_exclude_controller_from_training() {
        let fe = Frontend::<f32>::new(Variant::FrozenQBaseline.apply(&FrontendConfig::default()))
            .unwrap();
        let params = init_run_params(&fe, 8, 16, 0, false);
        let names: Vec<String> = params
            .trainable_ids()
            .iter()
            .map(|&id| params.entry(id).name.clone())
            .collect();
        assert_eq!(
            names,
            vec!["clf.fc1.weight", "clf.fc1.bias", "clf.fc2.weight", "clf.fc2.bias"]
        );
    }

    #[test]
    fn csv_number_formatting_handles_nan() {
        assert_eq!(fmt_metric(f64::NAN), "NaN");
        assert_eq!(fmt_metric(0.25), "0.250000");
    }
}
