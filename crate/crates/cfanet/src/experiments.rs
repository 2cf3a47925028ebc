//! Desk-scale experiment harness shared by the CLI and the test suite:
//! dataset recipes over the synthetic scene generator, a train-then-evaluate
//! runner, and the standard ablation axes.
//!
//! Scene generation is a pure function of the recipe, so it fans out over a
//! small worker pool; every other stage is sequential.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::Sample;
use crate::losses::LossKind;
use crate::metrics::{evaluate, EvalConfig, EvalSummary, MetricsError};
use crate::model::{build, ModelConfig, ModelError, Parameters};
use crate::synth::{generate_scene, Background, Layout, SceneSpec, SynthError};
use crate::train::{train, EpochReport, OptimizerState, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("bad recipe: {0}")]
    BadRecipe(String),
    #[error("bad axis `{0}` (expected branches, supervision, k, loss, bl)")]
    BadAxis(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

// ── worker pool ──────────────────────────────────────────────────────────

/// Worker count from `CFANET_THREADS`, else the machine's parallelism.
/// Zero or unparseable values fall back to the default.
pub fn thread_budget() -> usize {
    let default = || {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    };
    match std::env::var("CFANET_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => default(),
        },
        Err(_) => default(),
    }
}

/// `(0..n).map(f)` over at most `threads` workers; output order is by index,
/// so results never depend on the thread count.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    (w..n)
                        .step_by(threads)
                        .map(|i| (i, f(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            for (i, value) in handle.join().expect("scene worker panicked") {
                slots[i] = Some(value);
            }
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("stride partition covers every index"))
        .collect()
}

// ── dataset recipes ──────────────────────────────────────────────────────

/// A deterministic synthetic dataset: `n_images` scenes cycling through the
/// listed layouts and backgrounds, with per-scene people counts and seeds
/// drawn from one generator seeded by `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetRecipe {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    /// Inclusive per-scene people count range.
    pub people: (usize, usize),
    pub layouts: Vec<Layout>,
    pub backgrounds: Vec<Background>,
    pub head_radius_range: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        DatasetRecipe {
            n_images: 8,
            width: 96,
            height: 96,
            people: (8, 20),
            layouts: vec![Layout::Uniform, Layout::Clustered, Layout::Gradient],
            backgrounds: vec![Background::Flat, Background::TexturedNoise],
            head_radius_range: (2.0, 3.5),
            seed: 0,
        }
    }
}

impl DatasetRecipe {
    /// Small mixed-layout set sized for single-core overfit runs.
    pub fn overfit(n_images: usize, seed: u64) -> Self {
        DatasetRecipe {
            n_images,
            seed,
            ..DatasetRecipe::default()
        }
    }

    /// Scenes whose backgrounds carry head-like clutter, for held-out
    /// false-recognition measurements.
    pub fn cluttered(n_images: usize, seed: u64) -> Self {
        DatasetRecipe {
            n_images,
            backgrounds: vec![Background::GeometricClutter],
            seed,
            ..DatasetRecipe::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(ExperimentError::BadRecipe("n_images must be ≥ 1".into()));
        }
        if self.people.0 > self.people.1 {
            return Err(ExperimentError::BadRecipe(format!(
                "people range ({}, {}) is inverted",
                self.people.0, self.people.1
            )));
        }
        if self.layouts.is_empty() || self.backgrounds.is_empty() {
            return Err(ExperimentError::BadRecipe(
                "layouts and backgrounds must each list at least one variant".into(),
            ));
        }
        Ok(())
    }

    /// The per-scene specs this recipe expands to. Scene `i` uses
    /// `layouts[i % ..]` and `backgrounds[i % ..]`; its people count and
    /// generator seed are consecutive draws from the recipe generator.
    pub fn scene_specs(&self) -> Result<Vec<SceneSpec>> {
        use rand::{Rng, SeedableRng};
        self.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.n_images)
            .map(|i| SceneSpec {
                width: self.width,
                height: self.height,
                n_people: rng.gen_range(self.people.0..=self.people.1),
                layout: self.layouts[i % self.layouts.len()],
                head_radius_range: self.head_radius_range,
                background: self.backgrounds[i % self.backgrounds.len()],
                seed: rng.gen(),
            })
            .collect())
    }

    /// Generate every scene, in parallel over [`thread_budget`] workers.
    pub fn build(&self) -> Result<Vec<Sample>> {
        let specs = self.scene_specs()?;
        parallel_map(specs.len(), thread_budget(), |i| {
            let (image, annotation) = generate_scene(&specs[i])?;
            Ok(Sample { image, annotation })
        })
        .into_iter()
        .collect()
    }
}

// ── single runs ──────────────────────────────────────────────────────────

/// Everything one training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// A finished run: the trained parameters, per-epoch loss reports, and
/// evaluation summaries on the training set (and held-out set, if given).
pub struct RunOutcome {
    pub params: Parameters<f32>,
    pub reports: Vec<EpochReport>,
    pub train_eval: EvalSummary,
    pub held_out_eval: Option<EvalSummary>,
    pub seconds: f64,
}

/// Train from scratch on `train_samples` (model init seeded by the train
/// seed), then evaluate on the training set and optionally on held-out data.
pub fn run(
    spec: &RunSpec,
    train_samples: &[Sample],
    held_out: Option<&[Sample]>,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let mut params = build(&spec.model, spec.train.seed)?;
    let mut state = OptimizerState::new(&params);
    let reports = train(&mut params, &mut state, train_samples, &spec.train)?;
    let eval_cfg = EvalConfig {
        expansion: spec.train.expansion,
        ..EvalConfig::default()
    };
    let (_, train_eval) = evaluate(&params, train_samples, &eval_cfg)?;
    let held_out_eval = match held_out {
        Some(samples) => Some(evaluate(&params, samples, &eval_cfg)?.1),
        None => None,
    };
    Ok(RunOutcome {
        params,
        reports,
        train_eval,
        held_out_eval,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ── ablation axes ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Decoder branch configuration: baseline, +CRR, +DLE, +CRR+DLE.
    Branches,
    /// Supervised decoder stages: {4}, {3–4}, {2–4}, {1–4}.
    Supervision,
    /// Density-level class count k ∈ {4, 6, 8, 10}.
    K,
    /// Density term: mse, ssim_only, sl_only, bsl.
    Loss,
    /// Background term on/off (with the structural term fixed).
    Bl,
}

pub const ALL_AXES: [AblationAxis; 5] = [
    AblationAxis::Branches,
    AblationAxis::Supervision,
    AblationAxis::K,
    AblationAxis::Loss,
    AblationAxis::Bl,
];

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Branches => "branches",
            AblationAxis::Supervision => "supervision",
            AblationAxis::K => "k",
            AblationAxis::Loss => "loss",
            AblationAxis::Bl => "bl",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branches" => Ok(AblationAxis::Branches),
            "supervision" => Ok(AblationAxis::Supervision),
            "k" => Ok(AblationAxis::K),
            "loss" => Ok(AblationAxis::Loss),
            "bl" => Ok(AblationAxis::Bl),
            _ => Err(ExperimentError::BadAxis(s.into())),
        }
    }
}

/// The named arms an axis expands to, each a delta on the base spec. Arms
/// vary exactly one knob; everything else comes from `base`.
pub fn arms_for(axis: AblationAxis, base: &RunSpec) -> Vec<(String, RunSpec)> {
    let arm = |name: &str, edit: &dyn Fn(&mut RunSpec)| {
        let mut spec = base.clone();
        edit(&mut spec);
        (name.to_string(), spec)
    };
    match axis {
        AblationAxis::Branches => vec![
            arm("baseline", &|s| {
                s.model.use_crr = false;
                s.model.use_dle = false;
            }),
            arm("+CRR", &|s| {
                s.model.use_crr = true;
                s.model.use_dle = false;
            }),
            arm("+DLE", &|s| {
                s.model.use_crr = false;
                s.model.use_dle = true;
            }),
            arm("+CRR+DLE", &|s| {
                s.model.use_crr = true;
                s.model.use_dle = true;
            }),
        ],
        AblationAxis::Supervision => vec![
            arm("stage 4", &|s| s.train.supervision_mask = [false, false, false, true]),
            arm("stages 3-4", &|s| s.train.supervision_mask = [false, false, true, true]),
            arm("stages 2-4", &|s| s.train.supervision_mask = [false, true, true, true]),
            arm("stages 1-4", &|s| s.train.supervision_mask = [true; 4]),
        ],
        AblationAxis::K => [4usize, 6, 8, 10]
            .iter()
            .map(|&k| arm(&format!("k={k}"), &|s| s.model.k = k))
            .collect(),
        AblationAxis::Loss => [
            LossKind::Mse,
            LossKind::SsimOnly,
            LossKind::SlOnly,
            LossKind::Bsl,
        ]
        .iter()
        .map(|&kind| arm(&kind.to_string(), &|s| s.train.loss_kind = kind))
        .collect(),
        AblationAxis::Bl => vec![
            arm("bl on", &|s| {
                s.train.loss_kind = LossKind::Bsl;
                s.train.enable_bl = true;
            }),
            arm("bl off", &|s| {
                s.train.loss_kind = LossKind::Bsl;
                s.train.enable_bl = false;
            }),
        ],
    }
}

// ── ablation runner ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub final_loss: f64,
    pub train: EvalSummary,
    pub held_out: Option<EvalSummary>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    /// Arm-major: every seed of the first arm, then the next arm, …
    pub runs: Vec<ArmRun>,
}

/// Run every arm of `axis` across `seeds` (each seed overrides the train
/// seed, which also seeds the model init). Arms share the same data.
pub fn ablate(
    axis: AblationAxis,
    base: &RunSpec,
    train_samples: &[Sample],
    held_out: Option<&[Sample]>,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(ExperimentError::BadRecipe("ablate needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    for (name, spec) in arms_for(axis, base) {
        for &seed in seeds {
            let mut spec = spec.clone();
            spec.train.seed = seed;
            log::info!("ablate {axis}: arm `{name}` seed {seed}");
            let outcome = run(&spec, train_samples, held_out)?;
            runs.push(ArmRun {
                arm: name.clone(),
                seed,
                final_loss: outcome.reports.last().map_or(f64::NAN, |r| r.mean_total),
                train: outcome.train_eval,
                held_out: outcome.held_out_eval,
                seconds: outcome.seconds,
            });
        }
    }
    Ok(AblationReport {
        axis: axis.to_string(),
        runs,
    })
}

impl AblationReport {
    /// Arm names in first-appearance order.
    pub fn arms(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for run in &self.runs {
            if !names.contains(&run.arm.as_str()) {
                names.push(&run.arm);
            }
        }
        names
    }

    fn arm_mean(&self, arm: &str, field: impl Fn(&ArmRun) -> Option<f64>) -> Option<f64> {
        let values: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(&field)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Mean held-out MAE for an arm, or the training MAE when no held-out
    /// set was evaluated.
    pub fn mean_mae(&self, arm: &str) -> Option<f64> {
        self.arm_mean(arm, |r| Some(r.held_out.as_ref().unwrap_or(&r.train).mae))
    }

    /// Mean held-out background ratio for an arm (training-set fallback).
    pub fn mean_bg_ratio(&self, arm: &str) -> Option<f64> {
        self.arm_mean(arm, |r| {
            Some(r.held_out.as_ref().unwrap_or(&r.train).mean_bg_ratio)
        })
    }

    /// Column-aligned summary, one row per arm, metrics averaged over seeds.
    /// Held-out columns show `-` when no held-out set was evaluated.
    pub fn text_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![vec![
            "arm".into(),
            "seeds".into(),
            "train mae".into(),
            "train rmse".into(),
            "held mae".into(),
            "held rmse".into(),
            "r_bg".into(),
            "ssim".into(),
            "final loss".into(),
        ]];
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for arm in self.arms() {
            let n_seeds = self.runs.iter().filter(|r| r.arm == arm).count();
            let held = |f: &dyn Fn(&EvalSummary) -> f64| {
                self.arm_mean(arm, |r| r.held_out.as_ref().map(f))
            };
            rows.push(vec![
                arm.to_string(),
                n_seeds.to_string(),
                cell(self.arm_mean(arm, |r| Some(r.train.mae))),
                cell(self.arm_mean(arm, |r| Some(r.train.rmse))),
                cell(held(&|s| s.mae)),
                cell(held(&|s| s.rmse)),
                cell(self.mean_bg_ratio(arm)),
                cell(self.arm_mean(arm, |r| {
                    Some(r.held_out.as_ref().unwrap_or(&r.train).mean_ssim)
                })),
                cell(self.arm_mean(arm, |r| Some(r.final_loss))),
            ]);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out
    }
}
