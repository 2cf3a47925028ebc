//! The flat-key run configuration: defaults, config-file loading, and flag
//! overrides. Precedence is defaults < config file < command-line flags.

use std::path::Path;

use cfanet::losses::LossKind;
use cfanet::model::ModelConfig;
use cfanet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Union of the model and training knobs plus artifact paths, serialized as
/// one flat JSON object. Unknown keys are rejected; every key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub k: usize,
    pub width_mult: f64,
    pub input_channels: usize,
    pub dilation: usize,
    pub init_std: f64,
    pub use_crr: bool,
    pub use_dle: bool,
    // training
    pub epochs: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub expansion: f64,
    pub crop_fraction: f64,
    pub flip_prob: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub supervision: [bool; 4],
    pub enable_bl: bool,
    pub loss_kind: LossKind,
    // paths
    pub manifest: Option<String>,
    pub held_out_manifest: Option<String>,
    pub checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            k: model.k,
            width_mult: model.width_mult,
            input_channels: model.input_channels,
            dilation: model.dilation,
            init_std: model.init_std,
            use_crr: model.use_crr,
            use_dle: model.use_dle,
            epochs: train.epochs,
            lr0: train.lr0,
            lr_halving_period: train.lr_halving_period,
            expansion: train.expansion,
            crop_fraction: train.crop_fraction,
            flip_prob: train.flip_prob,
            batch_size: train.batch_size,
            seed: train.seed,
            supervision: train.supervision_mask,
            enable_bl: train.enable_bl,
            loss_kind: train.loss_kind,
            manifest: None,
            held_out_manifest: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with the config file when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            width_mult: self.width_mult,
            input_channels: self.input_channels,
            dilation: self.dilation,
            init_std: self.init_std,
            use_crr: self.use_crr,
            use_dle: self.use_dle,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr0: self.lr0,
            lr_halving_period: self.lr_halving_period,
            expansion: self.expansion,
            crop_fraction: self.crop_fraction,
            flip_prob: self.flip_prob,
            batch_size: self.batch_size,
            seed: self.seed,
            supervision_mask: self.supervision,
            enable_bl: self.enable_bl,
            loss_kind: self.loss_kind,
        }
    }

    /// The manifest to read, preferring the flag over the config file.
    pub fn manifest_path(&self, flag: &Option<std::path::PathBuf>) -> Result<String, CliError> {
        flag.as_ref()
            .map(|p| p.display().to_string())
            .or_else(|| self.manifest.clone())
            .ok_or_else(|| CliError::Usage("no dataset: pass --manifest or set `manifest` in the config file".into()))
    }

    pub fn checkpoint_path(&self, flag: &Option<std::path::PathBuf>) -> Result<String, CliError> {
        flag.as_ref()
            .map(|p| p.display().to_string())
            .or_else(|| self.checkpoint.clone())
            .ok_or_else(|| CliError::Usage("no checkpoint: pass --checkpoint or set `checkpoint` in the config file".into()))
    }

    /// Overlay every flag the user actually passed.
    pub fn apply_net(&mut self, f: &crate::NetFlags) {
        macro_rules! put {
            ($($field:ident),*) => { $( if let Some(v) = f.$field { self.$field = v; } )* };
        }
        put!(k, width_mult, input_channels, dilation, init_std, use_crr, use_dle);
    }

    pub fn apply_train(&mut self, f: &crate::TrainFlags) {
        macro_rules! put {
            ($($field:ident),*) => { $( if let Some(v) = f.$field { self.$field = v; } )* };
        }
        put!(
            epochs,
            lr0,
            lr_halving_period,
            expansion,
            crop_fraction,
            flip_prob,
            batch_size,
            supervision,
            enable_bl,
            loss_kind
        );
    }
}
