//! Training protocol: crop/flip augmentation, Adam with a halving learning
//! rate, the expansion factor, epoch reports, and checkpointing of both
//! parameters and optimizer state.
//!
//! Everything is deterministic under a fixed seed: each epoch derives its
//! own rng, which is consumed in a documented order (sample shuffle, then
//! per sample the crop y offset, crop x offset, and flip draw), so two runs
//! with equal inputs produce byte-identical checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::groundtruth::{
    compute_class_thresholds, make_attention_targets, render_annotation, GroundTruthError,
    PointAnnotation,
};
use crate::io::{Checkpoint, FormatError, Image, Sample};
use crate::losses::{
    targets_from_groundtruth, total_loss, weight_schedule, LossError, LossKind, LossOptions,
    SsimConstants,
};
use crate::model::{forward, ForwardOptions, ModelConfig, ModelError, Parameters};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("invalid training input: {0}")]
    BadInput(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite gradient in `{0}`; aborting")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, sample {sample}; aborting")]
    NonFiniteLoss { epoch: usize, sample: usize },
    #[error(transparent)]
    Groundtruth(#[from] GroundTruthError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ── configuration ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub expansion: f64,
    pub crop_fraction: f64,
    pub flip_prob: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub supervision_mask: [bool; 4],
    pub enable_bl: bool,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr0: 2e-5,
            lr_halving_period: 100,
            expansion: 50.0,
            crop_fraction: 0.5,
            flip_prob: 0.5,
            batch_size: 1,
            seed: 0,
            supervision_mask: [true; 4],
            enable_bl: true,
            loss_kind: LossKind::Bsl,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(TrainError::BadConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.lr_halving_period == 0 {
            return Err(TrainError::BadConfig("lr_halving_period must be ≥ 1".into()));
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "expansion must be positive, got {}",
                self.expansion
            )));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "crop_fraction must be in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TrainError::BadConfig(format!(
                "flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be ≥ 1".into()));
        }
        if !self.supervision_mask.iter().any(|&s| s) {
            return Err(TrainError::BadConfig(
                "at least one supervision stage must be enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            kind: self.loss_kind,
            enable_bl: self.enable_bl,
            supervision: self.supervision_mask,
        }
    }
}

/// Learning rate halves every `lr_halving_period` epochs.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr0 * 0.5f64.powi((epoch / config.lr_halving_period) as i32)
}

// ── augmentation ─────────────────────────────────────────────────────────

fn crop_image(image: &Image, ox: usize, oy: usize, cw: usize, ch: usize) -> Image {
    let c = image.channels;
    let mut data = Vec::with_capacity(cw * ch * c);
    for y in 0..ch {
        let row = ((oy + y) * image.width + ox) * c;
        data.extend_from_slice(&image.data[row..row + cw * c]);
    }
    Image {
        width: cw,
        height: ch,
        channels: c,
        data,
    }
}

fn flip_image(image: &Image) -> Image {
    let (w, h, c) = (image.width, image.height, image.channels);
    let mut data = vec![0u8; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            data[dst..dst + c].copy_from_slice(&image.data[src..src + c]);
        }
    }
    Image {
        width: w,
        height: h,
        channels: c,
        data,
    }
}

/// Random crop to `crop_fraction` of each side (rounded down to a multiple
/// of 8, floor 8) at a uniform offset, then a horizontal flip with
/// probability `flip_prob`. Points are translated into crop coordinates and
/// dropped when they fall outside; a flip mirrors x across the crop width.
///
/// Rng draws, in order: crop y offset, crop x offset, flip Bernoulli.
pub fn augment(sample: &Sample, config: &TrainConfig, rng: &mut impl Rng) -> Result<Sample> {
    let (w, h) = (sample.image.width, sample.image.height);
    if w < 16 || h < 16 {
        return Err(TrainError::BadInput(format!(
            "augmentation needs at least a 16x16 image, got {w}x{h}"
        )));
    }
    let side = |n: usize| ((n as f64 * config.crop_fraction) as usize / 8 * 8).max(8);
    let (cw, ch) = (side(w), side(h));
    let oy = rng.gen_range(0..=h - ch);
    let ox = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(config.flip_prob);

    let mut image = crop_image(&sample.image, ox, oy, cw, ch);
    if flip {
        image = flip_image(&image);
    }
    let points = sample
        .annotation
        .points
        .iter()
        .filter_map(|&(x, y)| {
            let (x, y) = (x - ox as f64, y - oy as f64);
            if !(0.0..cw as f64).contains(&x) || !(0.0..ch as f64).contains(&y) {
                return None;
            }
            let x = if flip {
                // Mirror across the crop; a point at exactly 0 would land on
                // the exclusive right edge, so nudge it just inside.
                let m = cw as f64 - x;
                if m >= cw as f64 { cw as f64 - 1e-6 } else { m }
            } else {
                x
            };
            Some((x, y))
        })
        .collect();
    let annotation = PointAnnotation::new(&sample.annotation.image_id, cw, ch, points)?;
    Ok(Sample { image, annotation })
}

// ── optimizer ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters<f32>) -> Self {
        let m = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect::<BTreeMap<_, _>>();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place. Gradients are given per
/// parameter name; missing names count as zero gradients.
pub fn adam_step(
    params: &mut Parameters<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for name in grads.keys() {
        if !state.m.contains_key(name) {
            return Err(TrainError::BadInput(format!(
                "gradient for unknown parameter `{name}`"
            )));
        }
    }
    for (name, grad) in grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(grad) = grads.get(&name) else {
            continue;
        };
        let tensor = params.get(&name);
        if grad.len() != tensor.numel() {
            return Err(TrainError::BadInput(format!(
                "gradient for `{name}` has {} elements, parameter has {}",
                grad.len(),
                tensor.numel()
            )));
        }
        let m = state.m.get_mut(&name).expect("checked above");
        let v = state.v.get_mut(&name).expect("state mirrors parameters");
        let mut data: Vec<f32> = tensor.data().to_vec();
        for e in 0..data.len() {
            let g = grad[e] as f64;
            let me = ADAM_BETA1 * m[e] as f64 + (1.0 - ADAM_BETA1) * g;
            let ve = ADAM_BETA2 * v[e] as f64 + (1.0 - ADAM_BETA2) * g * g;
            m[e] = me as f32;
            v[e] = ve as f32;
            let update = lr * (me / bc1) / ((ve / bc2).sqrt() + ADAM_EPS);
            data[e] = (data[e] as f64 - update) as f32;
        }
        let shape = tensor.shape();
        params.set(&name, Tensor::new(shape, data).expect("shape unchanged"));
    }
    Ok(())
}

// ── training loop ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_density_term: f64,
    pub mean_bl: Option<f64>,
    pub mean_cam_ce: Option<f64>,
    pub mean_fam_ce: Option<f64>,
    pub lambda: f64,
    pub mu: f64,
}

impl std::fmt::Display for EpochReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.5}"),
            None => "-".into(),
        };
        write!(
            f,
            "epoch {:>4}  lr {:.4e}  total {:.5}  density {:.5}  bl {}  cam {}  fam {}  lambda {:.3}",
            self.epoch,
            self.lr,
            self.mean_total,
            self.mean_density_term,
            opt(self.mean_bl),
            opt(self.mean_cam_ce),
            opt(self.mean_fam_ce),
            self.lambda,
        )
    }
}

/// Class thresholds pooled over the full-resolution groundtruth of the
/// training set; crops during training reuse these so class semantics stay
/// stable across augmentation.
pub fn class_thresholds_for(samples: &[Sample], k: usize) -> Result<Vec<f64>> {
    let maps = samples
        .iter()
        .map(|s| render_annotation(&s.annotation))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(compute_class_thresholds(&maps, k)?)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One pass over the data: augment → forward → loss → backward → Adam, with
/// gradients averaged over each batch. Returns the epoch's mean loss terms.
pub fn train_epoch(
    params: &mut Parameters<f32>,
    state: &mut OptimizerState,
    samples: &[Sample],
    thresholds: &[f64],
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let k = params.config().k;
    let consts = SsimConstants::default();
    let weights = weight_schedule(epoch, config.epochs);
    let options = config.loss_options();
    let lr = lr_at_epoch(config, epoch);
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);

    let mut totals = (0.0, 0.0, 0.0, 0.0, 0.0); // total, density, bl, cam, fam
    let mut seen = 0usize;
    for batch in order.chunks(config.batch_size) {
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for &index in batch {
            let sample = augment(&samples[index], config, &mut rng)?;
            let dm = render_annotation(&sample.annotation)?;
            let attention = make_attention_targets(&dm, thresholds, k)?;
            let targets = targets_from_groundtruth(&dm, &attention, config.expansion);

            let mut tape = Tape::new();
            let tracked = params.tracked(&mut tape);
            let image = sample.image.to_tensor();
            let outputs = forward(&mut tape, &tracked, &image, ForwardOptions::default())?;
            let (loss, breakdown) =
                total_loss(&mut tape, &outputs, &targets, &weights, &consts, &options)?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    sample: index,
                });
            }
            tape.backward(&loss)?;
            for (name, tensor) in tracked.iter() {
                let Some(grad) = tape.grad(tensor) else {
                    continue;
                };
                let slot = grads
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for (acc, &g) in slot.iter_mut().zip(grad) {
                    *acc += g;
                }
            }
            totals.0 += breakdown.total;
            totals.1 += breakdown.density_term;
            totals.2 += breakdown.bl.unwrap_or(0.0);
            totals.3 += breakdown.cam_ce.unwrap_or(0.0);
            totals.4 += breakdown.fam_ce.unwrap_or(0.0);
            seen += 1;
        }
        let scale = 1.0 / batch.len() as f32;
        for grad in grads.values_mut() {
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        adam_step(params, &grads, state, lr)?;
    }
    let n = seen as f64;
    let options_bl = options.enable_bl && options.kind == LossKind::Bsl;
    Ok(EpochReport {
        epoch,
        lr,
        mean_total: totals.0 / n,
        mean_density_term: totals.1 / n,
        mean_bl: options_bl.then_some(totals.2 / n),
        mean_cam_ce: (params.config().use_crr).then_some(totals.3 / n),
        mean_fam_ce: (params.config().use_dle).then_some(totals.4 / n),
        lambda: weights.lambda,
        mu: weights.mu,
    })
}

/// Full training run: computes dataset class thresholds once, then iterates
/// epochs, logging one line per epoch.
pub fn train(
    params: &mut Parameters<f32>,
    state: &mut OptimizerState,
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let thresholds = class_thresholds_for(samples, params.config().k)?;
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let report = train_epoch(params, state, samples, &thresholds, config, epoch)?;
        log::info!("{report}");
        reports.push(report);
    }
    Ok(reports)
}

// ── checkpointing ────────────────────────────────────────────────────────

fn meta_entries(config: &ModelConfig) -> Vec<(&'static str, f32)> {
    vec![
        ("meta/k", config.k as f32),
        ("meta/width_mult", config.width_mult as f32),
        ("meta/input_channels", config.input_channels as f32),
        ("meta/dilation", config.dilation as f32),
        ("meta/init_std", config.init_std as f32),
        ("meta/use_crr", config.use_crr as u8 as f32),
        ("meta/use_dle", config.use_dle as u8 as f32),
    ]
}

/// Serialize parameters, optimizer moments, and the model configuration.
/// Round-trips are bit-exact on every payload.
pub fn save_checkpoint(
    path: &Path,
    params: &Parameters<f32>,
    state: &OptimizerState,
) -> Result<()> {
    let mut ck = Checkpoint::default();
    for (name, tensor) in params.iter() {
        ck.insert(name.clone(), tensor.shape(), tensor.data().to_vec());
        let shape = tensor.shape();
        ck.insert(format!("optim/m.{name}"), shape, state.m[name].clone());
        ck.insert(format!("optim/v.{name}"), shape, state.v[name].clone());
    }
    ck.insert_scalar("optim/step", state.step as f32);
    for (name, value) in meta_entries(&params.config()) {
        ck.insert_scalar(name, value);
    }
    Ok(crate::io::write_checkpoint(path, &ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, OptimizerState)> {
    let ck = crate::io::read_checkpoint(path)?;
    let need = |name: &str| -> Result<f32> {
        ck.scalar(name)
            .ok_or_else(|| TrainError::BadInput(format!("checkpoint lacks `{name}`")))
    };
    let config = ModelConfig {
        k: need("meta/k")? as usize,
        width_mult: need("meta/width_mult")? as f64,
        input_channels: need("meta/input_channels")? as usize,
        dilation: need("meta/dilation")? as usize,
        init_std: need("meta/init_std")? as f64,
        use_crr: need("meta/use_crr")? != 0.0,
        use_dle: need("meta/use_dle")? != 0.0,
    };
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, (shape, data)) in &ck.entries {
        if let Some(rest) = name.strip_prefix("optim/m.") {
            m.insert(rest.to_string(), data.clone());
        } else if let Some(rest) = name.strip_prefix("optim/v.") {
            v.insert(rest.to_string(), data.clone());
        } else if name.starts_with("optim/") || name.starts_with("meta/") {
            continue;
        } else {
            params.insert(name.clone(), Tensor::new(*shape, data.clone())?);
        }
    }
    let params = Parameters::from_named(config, params)?;
    for (name, tensor) in params.iter() {
        for (map, kind) in [(&m, "first"), (&v, "second")] {
            match map.get(name) {
                None => {
                    return Err(TrainError::BadInput(format!(
                        "checkpoint lacks the {kind}-moment entry for `{name}`"
                    )));
                }
                Some(data) if data.len() != tensor.numel() => {
                    return Err(TrainError::BadInput(format!(
                        "{kind}-moment entry for `{name}` has {} elements, expected {}",
                        data.len(),
                        tensor.numel()
                    )));
                }
                Some(_) => {}
            }
        }
    }
    let state = OptimizerState {
        m,
        v,
        step: need("optim/step")? as u64,
    };
    Ok((params, state))
}
