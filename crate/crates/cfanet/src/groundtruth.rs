//! Groundtruth synthesis from point annotations: geometry-adaptive Gaussian
//! density maps, the binary coarse attention mask, and the k-class fine
//! attention map with dataset-level density cutoffs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape, Tensor};

/// Density at or above this value marks a pixel as crowd; everything below
/// is background. Shared by the attention targets, the background loss term,
/// and the background-ratio metric.
pub const CROWD_THRESHOLD: f32 = 1e-5;

/// σ when an image has fewer than four heads and the 3-NN rule is undefined.
pub const FALLBACK_SIGMA: f64 = 15.0;

/// Number of nearest neighbors averaged into each head's σ.
pub const SIGMA_NEIGHBORS: usize = 3;

/// Gaussian kernels are truncated this many σ from the head position.
pub const KERNEL_RADIUS_SIGMAS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum GroundTruthError {
    #[error("annotation `{image}`: point {index} at ({x}, {y}) lies outside the {width}x{height} raster")]
    PointOutOfBounds {
        image: String,
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("annotation `{image}`: point {index} has non-finite coordinates")]
    NonFinitePoint { image: String, index: usize },
    #[error("got {sigmas} sigmas for {points} points")]
    SigmaCount { sigmas: usize, points: usize },
    #[error("raster length {len} does not match {width}x{height}")]
    RasterSize {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("class count k must be at least 2, got {0}")]
    BadClassCount(usize),
    #[error("expected {expected} descending thresholds, got {got:?}")]
    BadThresholds { expected: usize, got: Vec<f64> },
    #[error("empty crowd support")]
    EmptyCrowdSupport,
}

pub type Result<T> = std::result::Result<T, GroundTruthError>;

// ── annotations ──────────────────────────────────────────────────────────

/// Head positions for one image. Coordinates are sub-pixel, with pixel
/// (ix, iy) covering [ix, ix+1) x [iy, iy+1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    #[serde(rename = "image")]
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    pub fn new(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        points: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let ann = PointAnnotation {
            image_id: image_id.into(),
            width,
            height,
            points,
        };
        ann.validate()?;
        Ok(ann)
    }

    /// Every point must be finite and inside the raster.
    pub fn validate(&self) -> Result<()> {
        for (index, &(x, y)) in self.points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(GroundTruthError::NonFinitePoint {
                    image: self.image_id.clone(),
                    index,
                });
            }
            if x < 0.0 || x >= self.width as f64 || y < 0.0 || y >= self.height as f64 {
                return Err(GroundTruthError::PointOutOfBounds {
                    image: self.image_id.clone(),
                    index,
                    x,
                    y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

// ── density maps ─────────────────────────────────────────────────────────

/// Row-major people-per-pixel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DensityMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(GroundTruthError::RasterSize {
                len: data.len(),
                width,
                height,
            });
        }
        Ok(DensityMap {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DensityMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Total mass; equals the head count of the source annotation.
    pub fn count(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// View as a (1, 1, h, w) tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(Shape::new(1, 1, self.height, self.width), self.data.clone())
            .expect("raster length is validated at construction")
    }
}

/// Binary crowd mask; 1 where density reaches [`CROWD_THRESHOLD`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// View as a (1, 1, h, w) tensor of 0/1 floats.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.data.iter().map(|&v| v as f32).collect();
        Tensor::new(Shape::new(1, 1, self.height, self.width), data)
            .expect("mask length matches its dimensions")
    }
}

/// Per-pixel class indices in [0, k).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Supervision targets for both attention stages of one image.
#[derive(Clone, Debug)]
pub struct AttentionTargets {
    pub cam: Mask,
    pub fam: ClassMap,
    pub k: usize,
    /// Descending density cutoffs separating classes 1..k-1.
    pub thresholds: Vec<f64>,
}

// ── σ estimation ─────────────────────────────────────────────────────────

/// Per-head Gaussian widths: mean Euclidean distance to the three nearest
/// other heads, clamped to [1, 0.25·min(w, h)]. Images with fewer than four
/// heads fall back to [`FALLBACK_SIGMA`] (still clamped).
pub fn adaptive_sigmas(ann: &PointAnnotation) -> Vec<f64> {
    let lo = 1.0;
    let hi = (0.25 * ann.width.min(ann.height) as f64).max(lo);
    let n = ann.points.len();
    if n < SIGMA_NEIGHBORS + 1 {
        return vec![FALLBACK_SIGMA.clamp(lo, hi); n];
    }
    let mut sigmas = Vec::with_capacity(n);
    let mut best = [0.0f64; SIGMA_NEIGHBORS];
    for (i, &(xi, yi)) in ann.points.iter().enumerate() {
        // Ascending insertion keeps `best` the 3 smallest distances seen.
        let mut filled = 0;
        for (j, &(xj, yj)) in ann.points.iter().enumerate() {
            if i == j {
                continue;
            }
            let (dx, dy) = (xi - xj, yi - yj);
            let d = (dx * dx + dy * dy).sqrt();
            if filled < SIGMA_NEIGHBORS {
                best[filled] = d;
                filled += 1;
                best[..filled].sort_by(f64::total_cmp);
            } else if d < best[SIGMA_NEIGHBORS - 1] {
                best[SIGMA_NEIGHBORS - 1] = d;
                best.sort_by(f64::total_cmp);
            }
        }
        let mean = best.iter().sum::<f64>() / SIGMA_NEIGHBORS as f64;
        sigmas.push(mean.clamp(lo, hi));
    }
    sigmas
}

// ── density rendering ────────────────────────────────────────────────────

/// Rasterize one Gaussian per head, truncated at ±4σ and renormalized over
/// the in-bounds window so each head contributes exactly unit mass.
pub fn render_density(ann: &PointAnnotation, sigmas: &[f64]) -> Result<DensityMap> {
    if sigmas.len() != ann.points.len() {
        return Err(GroundTruthError::SigmaCount {
            sigmas: sigmas.len(),
            points: ann.points.len(),
        });
    }
    let (w, h) = (ann.width, ann.height);
    let mut acc = vec![0.0f64; w * h];
    let mut weights: Vec<f64> = Vec::new();
    for (&(x, y), &sigma) in ann.points.iter().zip(sigmas) {
        let r = KERNEL_RADIUS_SIGMAS * sigma;
        // Pixel centers sit at integer + 0.5.
        let x0 = ((x - r - 0.5).ceil().max(0.0)) as usize;
        let x1 = ((x + r - 0.5).floor()).min(w as f64 - 1.0) as usize;
        let y0 = ((y - r - 0.5).ceil().max(0.0)) as usize;
        let y1 = ((y + r - 0.5).floor()).min(h as f64 - 1.0) as usize;
        let inv = -0.5 / (sigma * sigma);
        weights.clear();
        let mut total = 0.0f64;
        for py in y0..=y1 {
            let dy = py as f64 + 0.5 - y;
            for px in x0..=x1 {
                let dx = px as f64 + 0.5 - x;
                let g = ((dx * dx + dy * dy) * inv).exp();
                weights.push(g);
                total += g;
            }
        }
        if total <= 0.0 {
            continue; // unreachable for in-bounds points, kept as a guard
        }
        let scale = 1.0 / total;
        let mut it = weights.iter();
        for py in y0..=y1 {
            let row = &mut acc[py * w..][..w];
            for slot in &mut row[x0..=x1] {
                *slot += it.next().unwrap() * scale;
            }
        }
    }
    let data = acc.into_iter().map(|v| v as f32).collect();
    DensityMap::new(w, h, data)
}

/// σ estimation and rendering in one step.
pub fn render_annotation(ann: &PointAnnotation) -> Result<DensityMap> {
    render_density(ann, &adaptive_sigmas(ann))
}

// ── attention targets ────────────────────────────────────────────────────

/// Binary crowd mask at the [`CROWD_THRESHOLD`] (inclusive).
pub fn make_cam(dm: &DensityMap) -> Mask {
    let data = dm
        .data
        .iter()
        .map(|&v| u8::from(v >= CROWD_THRESHOLD))
        .collect();
    Mask {
        width: dm.width,
        height: dm.height,
        data,
    }
}

/// Equal-mass density cutoffs over every crowd pixel in the dataset:
/// linearly interpolated quantiles at fractions (k-2-j)/(k-1), descending.
pub fn compute_class_thresholds(dataset: &[DensityMap], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(GroundTruthError::BadClassCount(k));
    }
    let mut pooled: Vec<f64> = dataset
        .iter()
        .flat_map(|dm| dm.data.iter())
        .filter(|&&v| v >= CROWD_THRESHOLD)
        .map(|&v| v as f64)
        .collect();
    if pooled.is_empty() {
        return Err(GroundTruthError::EmptyCrowdSupport);
    }
    pooled.sort_by(f64::total_cmp);
    let quantile = |p: f64| -> f64 {
        let pos = (pooled.len() - 1) as f64 * p;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(pooled.len() - 1);
        pooled[lo] + (pos - lo as f64) * (pooled[hi] - pooled[lo])
    };
    Ok((0..k - 1)
        .map(|j| quantile((k - 2 - j) as f64 / (k - 1) as f64))
        .collect())
}

/// Class of one density value under descending cutoffs: background below the
/// crowd threshold, otherwise one class per cutoff at or below the value,
/// with ties binding to the denser class.
fn classify(v: f32, thresholds: &[f64], k: usize) -> u8 {
    if v < CROWD_THRESHOLD {
        return 0;
    }
    let vd = v as f64;
    let above = thresholds.iter().filter(|&&t| t <= vd).count();
    above.clamp(1, k - 1) as u8
}

/// Per-pixel class map under dataset-level cutoffs.
pub fn make_fam(dm: &DensityMap, thresholds: &[f64], k: usize) -> Result<ClassMap> {
    if k < 2 {
        return Err(GroundTruthError::BadClassCount(k));
    }
    let descending = thresholds.windows(2).all(|w| w[0] >= w[1]);
    if thresholds.len() != k - 1 || !descending {
        return Err(GroundTruthError::BadThresholds {
            expected: k - 1,
            got: thresholds.to_vec(),
        });
    }
    let data = dm
        .data
        .iter()
        .map(|&v| classify(v, thresholds, k))
        .collect();
    Ok(ClassMap {
        width: dm.width,
        height: dm.height,
        k,
        data,
    })
}

/// Both attention targets for one density map.
pub fn make_attention_targets(
    dm: &DensityMap,
    thresholds: &[f64],
    k: usize,
) -> Result<AttentionTargets> {
    Ok(AttentionTargets {
        cam: make_cam(dm),
        fam: make_fam(dm, thresholds, k)?,
        k,
        thresholds: thresholds.to_vec(),
    })
}
