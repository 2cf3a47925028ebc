//! Evaluation: count errors (MAE/RMSE), density-map quality (SSIM/PSNR),
//! and the background false-recognition ratio.
//!
//! All metrics are pure functions of their inputs and are computed in `f64`
//! regardless of the model precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::groundtruth::{make_cam, render_annotation, GroundTruthError};
use crate::io::Sample;
use crate::losses::{self, LossError, SsimConstants};
use crate::model::{forward, ForwardOptions, ModelError, Parameters};
use crate::tensor::{Shape, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty record set")]
    EmptySet,
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("invalid metric input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Groundtruth(#[from] GroundTruthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Total mass below this counts as an empty prediction.
pub const MASS_GUARD: f64 = 1e-8;
/// PSNR reported for identical maps (and the cap for near-identical ones).
pub const PSNR_SENTINEL: f64 = 99.0;

// ── records ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub count_est: f64,
    pub count_gt: f64,
    pub ssim: f64,
    /// Decibels, capped at [`PSNR_SENTINEL`].
    pub psnr: f64,
    /// Predicted mass on groundtruth background pixels, after expansion
    /// division.
    pub bg_mass: f64,
    /// Predicted total mass after expansion division; equals `count_est`.
    pub total_mass: f64,
}

impl EvalRecord {
    pub fn bg_ratio(&self) -> f64 {
        if self.total_mass < MASS_GUARD {
            0.0
        } else {
            self.bg_mass / self.total_mass
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mae: f64,
    pub rmse: f64,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_bg_ratio: f64,
    pub n_images: usize,
}

// ── scalar metrics ───────────────────────────────────────────────────────

pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let sum: f64 = records
        .iter()
        .map(|r| (r.count_est - r.count_gt).abs())
        .sum();
    Ok(sum / records.len() as f64)
}

pub fn rmse(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let sum: f64 = records
        .iter()
        .map(|r| (r.count_est - r.count_gt).powi(2))
        .sum();
    Ok((sum / records.len() as f64).sqrt())
}

/// Peak signal-to-noise ratio with both maps normalized by the groundtruth
/// peak (density rasters have no natural 255 ceiling).
pub fn psnr(est: &[f32], gt: &[f32]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(MetricsError::BadInput(format!(
            "psnr inputs have {} vs {} elements",
            est.len(),
            gt.len()
        )));
    }
    let peak = gt.iter().copied().fold(f64::MIN, |m, v| m.max(v as f64));
    if peak <= 0.0 {
        return Err(MetricsError::Undefined(
            "psnr of an all-zero groundtruth map".into(),
        ));
    }
    let mse: f64 = est
        .iter()
        .zip(gt)
        .map(|(&e, &g)| {
            let d = (e as f64 - g as f64) / peak;
            d * d
        })
        .sum::<f64>()
        / est.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_SENTINEL))
}

/// Fraction of predicted mass on background pixels; zero for (near-)empty
/// predictions.
pub fn bg_ratio(est: &[f32], bg_mask: &[u8]) -> Result<f64> {
    if est.len() != bg_mask.len() {
        return Err(MetricsError::BadInput(format!(
            "bg_ratio inputs have {} vs {} elements",
            est.len(),
            bg_mask.len()
        )));
    }
    let total: f64 = est.iter().map(|&v| v as f64).sum();
    if total < MASS_GUARD {
        return Ok(0.0);
    }
    // `+ 0.0` turns the empty sum's -0.0 (no background pixels) into +0.0.
    let bg: f64 = est
        .iter()
        .zip(bg_mask)
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| v as f64)
        .sum::<f64>()
        + 0.0;
    Ok(bg / total)
}

/// SSIM between two full-resolution maps, computed in `f64`.
pub fn map_ssim(est: &Tensor<f32>, gt: &Tensor<f32>, consts: &SsimConstants) -> Result<f64> {
    let mut tape = Tape::new();
    let v = losses::ssim(&mut tape, &est.cast::<f64>(), &gt.cast::<f64>(), consts)?;
    Ok(v.item()?)
}

// ── evaluation driver ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    /// Model outputs are divided by this before any metric.
    pub expansion: f64,
    pub consts: SsimConstants,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            expansion: 50.0,
            consts: SsimConstants::default(),
        }
    }
}

/// Pad on the right/bottom by mirror reflection until both spatial dims are
/// multiples of `m`.
pub fn reflect_pad_to_multiple(t: &Tensor<f32>, m: usize) -> Tensor<f32> {
    let s = t.shape();
    let (hp, wp) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    if (hp, wp) == (s.h, s.w) {
        return t.clone();
    }
    // Fold an out-of-range index back into [0, n) by bouncing off both ends.
    let mirror = |i: usize, n: usize| -> usize {
        let period = 2 * n;
        let r = i % period;
        if r < n {
            r
        } else {
            period - 1 - r
        }
    };
    let src = t.data();
    Tensor::from_fn(Shape::new(s.n, s.c, hp, wp), |n, c, y, x| {
        let (sy, sx) = (mirror(y, s.h), mirror(x, s.w));
        src[((n * s.c + c) * s.h + sy) * s.w + sx]
    })
}

fn crop(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    let src = t.data();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        src[((n * s.c + c) * s.h + y) * s.w + x]
    })
}

/// Evaluate an arbitrary predictor. The predictor receives the image tensor
/// already reflect-padded to a multiple of 8 and must return a density map
/// of the same spatial size at expansion scale; the driver crops it back,
/// divides by the expansion, and computes all per-image metrics.
pub fn evaluate_with<F>(
    mut predict: F,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<(Vec<EvalRecord>, EvalSummary)>
where
    F: FnMut(&Tensor<f32>) -> crate::model::Result<Tensor<f32>>,
{
    if samples.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if !(cfg.expansion.is_finite() && cfg.expansion > 0.0) {
        return Err(MetricsError::BadInput(format!(
            "expansion must be positive, got {}",
            cfg.expansion
        )));
    }
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        let dm = render_annotation(&sample.annotation)?;
        let cam = make_cam(&dm);
        let image = sample.image.to_tensor();
        let padded = reflect_pad_to_multiple(&image, 8);
        let ps = padded.shape();
        let raw = predict(&padded)?;
        if raw.shape() != Shape::new(1, 1, ps.h, ps.w) {
            return Err(MetricsError::BadInput(format!(
                "predictor returned {}, expected (1, 1, {}, {})",
                raw.shape(),
                ps.h,
                ps.w
            )));
        }
        let raw = crop(&raw, dm.height, dm.width);
        let inv = (1.0 / cfg.expansion) as f32;
        let est = Tensor::new(raw.shape(), raw.data().iter().map(|&v| v * inv).collect())
            .expect("crop preserves dims");

        let count_est: f64 = est.data().iter().map(|&v| v as f64).sum();
        let count_gt = dm.count();
        let gt = dm.to_tensor();
        let ssim = map_ssim(&est, &gt, &cfg.consts)?;
        // An all-zero groundtruth leaves PSNR undefined; score the empty
        // prediction as perfect and anything else as maximally wrong.
        let psnr = match psnr(est.data(), gt.data()) {
            Ok(v) => v,
            Err(MetricsError::Undefined(_)) => {
                if count_est.abs() < MASS_GUARD {
                    PSNR_SENTINEL
                } else {
                    0.0
                }
            }
            Err(e) => return Err(e),
        };
        let bg_mask: Vec<u8> = cam.data.iter().map(|&v| 1 - v).collect();
        // `+ 0.0`: an image with no background pixels sums nothing, and the
        // empty float sum is -0.0.
        let bg_mass: f64 = est
            .data()
            .iter()
            .zip(&bg_mask)
            .filter(|(_, &m)| m != 0)
            .map(|(&v, _)| v as f64)
            .sum::<f64>()
            + 0.0;
        records.push(EvalRecord {
            image_id: sample.annotation.image_id.clone(),
            count_est,
            count_gt,
            ssim,
            psnr,
            bg_mass,
            total_mass: count_est,
        });
    }
    let summary = summarize(&records)?;
    Ok((records, summary))
}

/// Evaluate the model itself (no augmentation; original image sizes).
pub fn evaluate(
    params: &Parameters<f32>,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    evaluate_with(
        |image| {
            let mut tape = Tape::new();
            let outputs = forward(&mut tape, params, image, ForwardOptions::default())?;
            Ok(outputs.final_density().clone())
        },
        samples,
        cfg,
    )
}

pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary> {
    let n = records.len();
    if n == 0 {
        return Err(MetricsError::EmptySet);
    }
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
    Ok(EvalSummary {
        mae: mae(records)?,
        rmse: rmse(records)?,
        mean_ssim: mean(&|r| r.ssim),
        mean_psnr: mean(&|r| r.psnr),
        mean_bg_ratio: mean(&|r| r.bg_ratio()),
        n_images: n,
    })
}
