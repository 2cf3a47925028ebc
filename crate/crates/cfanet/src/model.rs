//! The CFANet graph: a 10-conv encoder pooling to 1/8 scale, the CRR and DLE
//! attention decoders, and the attention-gated DME density decoder. All three
//! decoders walk the scales 1/8 → 1/4 → 1/2 → 1 in lockstep; every stage owns
//! one supervision head whose output is upsampled to input resolution.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ConvSpec, Scalar, Shape, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("parameters do not match the architecture: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

// ── configuration ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Density classes for the fine attention branch.
    pub k: usize,
    /// Uniform channel scale in (0, 1]; semantic channel counts (1, k) are
    /// never scaled.
    pub width_mult: f64,
    pub input_channels: usize,
    /// Dilation of the DME trunk convolutions.
    pub dilation: usize,
    /// Std-dev of the Gaussian weight init.
    pub init_std: f64,
    /// Keep the coarse (CRR) branch; off for the plain-decoder baseline.
    pub use_crr: bool,
    /// Keep the fine (DLE) branch.
    pub use_dle: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 6,
            width_mult: 1.0,
            input_channels: 3,
            dilation: 2,
            init_std: 0.01,
            use_crr: true,
            use_dle: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.k < 2 || self.k > 255 {
            return bad(format!("k must be in 2..=255, got {}", self.k));
        }
        if !self.width_mult.is_finite() || self.width_mult <= 0.0 || self.width_mult > 1.0 {
            return bad(format!("width_mult must be in (0, 1], got {}", self.width_mult));
        }
        if (64.0 * self.width_mult).round() < 1.0 {
            return bad(format!(
                "width_mult {} scales 64-channel stages below one channel",
                self.width_mult
            ));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.dilation == 0 {
            return bad("dilation must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }
}

/// How the DME consumes the attention maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    #[default]
    Normal,
    /// Diagnostic: feed literal zero maps through the fusion arithmetic.
    ForceZero,
    /// Skip fusion entirely.
    Disabled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub attention: AttentionMode,
}

// ── parameters ───────────────────────────────────────────────────────────

/// Named parameter tensors in sorted-name order.
#[derive(Clone, Debug)]
pub struct Parameters<T: Scalar = f32> {
    config: ModelConfig,
    map: BTreeMap<String, Tensor<T>>,
}

/// Canonical (name, shape) list; also the rng draw order during init.
fn parameter_specs(config: &ModelConfig) -> Vec<(String, Shape)> {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<(String, Shape)>, name: String, oc: usize, ic: usize, k: usize| {
        specs.push((format!("{name}.w"), Shape::new(oc, ic, k, k)));
        specs.push((format!("{name}.b"), Shape::new(1, oc, 1, 1)));
    };
    let branch = |specs: &mut Vec<(String, Shape)>,
                  prefix: &str,
                  in_ch: usize,
                  trunk: [usize; 4],
                  term_out: usize,
                  term_kernel: usize,
                  head_out: usize| {
        let mut ic = in_ch;
        for (i, &oc) in trunk.iter().enumerate() {
            conv(specs, format!("{prefix}.t{}", i + 1), oc, ic, 3);
            ic = oc;
        }
        conv(specs, format!("{prefix}.term"), term_out, trunk[3], term_kernel);
        for (i, &hic) in [trunk[0], trunk[1], trunk[2], term_out].iter().enumerate() {
            conv(specs, format!("{prefix}.h{}", i + 1), head_out, hic, 3);
        }
    };

    let s = |base: usize| config.scaled(base);
    let mut ic = config.input_channels;
    for (stage, (base, n_convs)) in [(64, 2), (128, 2), (256, 3), (512, 3)].iter().enumerate() {
        for ci in 0..*n_convs {
            conv(&mut specs, format!("enc.s{}.c{}", stage + 1, ci + 1), s(*base), ic, 3);
            ic = s(*base);
        }
    }
    let e4 = s(512);
    if config.use_crr {
        branch(&mut specs, "crr", e4, [s(256), s(128), s(128), s(64)], 1, 3, 1);
    }
    if config.use_dle {
        branch(&mut specs, "dle", e4, [s(256), s(256), s(128), s(64)], config.k, 3, config.k);
    }
    branch(&mut specs, "dme", e4, [s(512), s(256), s(256), s(64)], 1, 1, 1);
    specs
}

impl<T: Scalar> Parameters<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Replace a parameter's values; the shape is fixed by the architecture.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(slot.shape(), tensor.shape(), "parameter `{name}` shape is fixed");
        *slot = tensor;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config,
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }

    /// Register every tensor as a gradient-carrying leaf on `tape`.
    pub fn tracked(&self, tape: &mut Tape<T>) -> Parameters<T> {
        Parameters {
            config: self.config,
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v, true)))
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> {
    /// Rebuild from named tensors, insisting on the exact architecture.
    pub fn from_named(config: ModelConfig, map: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        if map.len() != specs.len() {
            return Err(ModelError::BadParameters(format!(
                "expected {} tensors, got {}",
                specs.len(),
                map.len()
            )));
        }
        for (name, shape) in &specs {
            match map.get(name) {
                None => {
                    return Err(ModelError::BadParameters(format!("missing `{name}`")));
                }
                Some(t) if t.shape() != *shape => {
                    return Err(ModelError::BadParameters(format!(
                        "`{name}` has shape {}, expected {}",
                        t.shape(),
                        shape
                    )));
                }
                Some(_) => {}
            }
        }
        Ok(Parameters { config, map })
    }
}

/// Gaussian-initialized parameters: weights ~ N(0, init_std²), biases zero,
/// drawn in canonical order so a seed pins every byte.
pub fn build(config: &ModelConfig, seed: u64) -> Result<Parameters<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_std).expect("validated init_std");
    let mut map = BTreeMap::new();
    for (name, shape) in parameter_specs(config) {
        let data = if name.ends_with(".b") {
            vec![0.0f32; shape.numel()]
        } else {
            (0..shape.numel())
                .map(|_| normal.sample(&mut rng) as f32)
                .collect()
        };
        map.insert(name, Tensor::new(shape, data).expect("spec shapes are consistent"));
    }
    Ok(Parameters {
        config: *config,
        map,
    })
}

// ── attention arithmetic ─────────────────────────────────────────────────

/// Attention weight per density class: 0 for background, c/(k-1) above.
pub fn class_weights(k: usize) -> Vec<f64> {
    (0..k).map(|c| c as f64 / (k - 1) as f64).collect()
}

fn check_pixelwise<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(ModelError::BadInput(format!(
            "{what}: spatial dims {sa} and {sb} do not match"
        )));
    }
    Ok(())
}

/// Expected class weight under the fine branch's softmax.
fn expected_weight<T: Scalar>(
    tape: &mut Tape<T>,
    fam_logits: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    if fam_logits.shape().c != k {
        return Err(ModelError::BadInput(format!(
            "fine attention logits need {k} channels, got {}",
            fam_logits.shape().c
        )));
    }
    let weights: Vec<T> = class_weights(k).into_iter().map(T::from_f64).collect();
    let probs = tape.channel_softmax(fam_logits)?;
    Ok(tape.channel_dot(&probs, &weights)?)
}

/// Fine-over-coarse attention: expected class weight plus crowd probability.
pub fn refine_attention<T: Scalar>(
    tape: &mut Tape<T>,
    fam_logits: &Tensor<T>,
    cam_logits: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    check_pixelwise("refine_attention", fam_logits, cam_logits)?;
    if cam_logits.shape().c != 1 {
        return Err(ModelError::BadInput(format!(
            "coarse attention logits need 1 channel, got {}",
            cam_logits.shape().c
        )));
    }
    let fine = expected_weight(tape, fam_logits, k)?;
    let coarse = tape.sigmoid(cam_logits)?;
    Ok(tape.add(&fine, &coarse)?)
}

/// Residual gating: out = fm + attention ⊙ fm, attention broadcast over
/// channels.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    fm: &Tensor<T>,
    attention: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_pixelwise("fuse", fm, attention)?;
    if attention.shape().c != 1 {
        return Err(ModelError::BadInput(format!(
            "attention must be single-channel, got {}",
            attention.shape().c
        )));
    }
    let gated = tape.mul(fm, attention)?;
    Ok(tape.add(fm, &gated)?)
}

// ── forward pass ─────────────────────────────────────────────────────────

/// All supervision maps at input resolution. `density[3]` is the model's
/// final estimate; the earlier entries exist for multi-level supervision.
#[derive(Clone, Debug)]
pub struct ModelOutputs<T: Scalar = f32> {
    /// One per stage when the CRR branch is present, else empty.
    pub cam_logits: Vec<Tensor<T>>,
    /// One per stage when the DLE branch is present, else empty.
    pub fam_logits: Vec<Tensor<T>>,
    /// Always four non-negative maps.
    pub density: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelOutputs<T> {
    pub fn final_density(&self) -> &Tensor<T> {
        &self.density[3]
    }
}

fn conv_step<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Parameters<T>,
    name: &str,
    x: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let w = params.get(&format!("{name}.w"));
    let b = params.get(&format!("{name}.b"));
    Ok(tape.conv2d(x, w, b, spec)?)
}

fn relu_conv<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Parameters<T>,
    name: &str,
    x: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let y = conv_step(tape, params, name, x, spec)?;
    Ok(tape.relu(&y)?)
}

fn upsample_times<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    times: usize,
) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for _ in 0..times {
        out = tape.upsample_bilinear2x(&out)?;
    }
    Ok(out)
}

/// CRR/DLE walk: four trunk convs with upsampling between stages, a terminal
/// conv refining stage 4, and one head per stage. Returns stage-resolution
/// head logits; stage 4's head reads the terminal features so every tensor
/// in the branch sits on the gradient path.
fn run_recognizer<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Parameters<T>,
    prefix: &str,
    f4: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let conv3 = ConvSpec::same(3, 1);
    let mut x = f4.clone();
    let mut taps = Vec::with_capacity(4);
    for i in 1..=4 {
        if i > 1 {
            x = tape.upsample_bilinear2x(&x)?;
        }
        x = relu_conv(tape, params, &format!("{prefix}.t{i}"), &x, conv3)?;
        taps.push(x.clone());
    }
    let term = relu_conv(tape, params, &format!("{prefix}.term"), &taps[3], conv3)?;
    taps[3] = term;
    (1..=4)
        .zip(&taps)
        .map(|(i, tap)| conv_step(tape, params, &format!("{prefix}.h{i}"), tap, conv3))
        .collect()
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Parameters<T>,
    image: &Tensor<T>,
    options: ForwardOptions,
) -> Result<ModelOutputs<T>> {
    let cfg = *params.config();
    let s = image.shape();
    if s.c != cfg.input_channels {
        return Err(ModelError::BadInput(format!(
            "expected {} input channels, got {}",
            cfg.input_channels, s.c
        )));
    }
    if s.h == 0 || s.w == 0 || s.h % 8 != 0 || s.w % 8 != 0 {
        return Err(ModelError::BadInput(format!(
            "input height and width must be positive multiples of 8, got {}x{}",
            s.h, s.w
        )));
    }

    // Encoder: 2-2-3-3 convs with a pool after each of the first 3 stages.
    let conv3 = ConvSpec::same(3, 1);
    let mut x = image.clone();
    for (stage, n_convs) in [(1usize, 2usize), (2, 2), (3, 3), (4, 3)] {
        if stage > 1 {
            x = tape.avgpool2(&x)?;
        }
        for ci in 1..=n_convs {
            x = relu_conv(tape, params, &format!("enc.s{stage}.c{ci}"), &x, conv3)?;
        }
    }
    let f4 = x;

    let crr_stage = if cfg.use_crr {
        Some(run_recognizer(tape, params, "crr", &f4)?)
    } else {
        None
    };
    let dle_stage = if cfg.use_dle {
        Some(run_recognizer(tape, params, "dle", &f4)?)
    } else {
        None
    };

    // Per-stage attention at stage resolution.
    let mut attention: Vec<Option<Tensor<T>>> = Vec::with_capacity(4);
    for i in 0..4 {
        let stage_attention = match options.attention {
            AttentionMode::Disabled => None,
            AttentionMode::ForceZero if cfg.use_crr || cfg.use_dle => {
                let scale = 8 >> i;
                Some(Tensor::zeros(Shape::new(s.n, 1, s.h / scale, s.w / scale)))
            }
            AttentionMode::ForceZero => None,
            AttentionMode::Normal => match (&dle_stage, &crr_stage) {
                (Some(fam), Some(cam)) => {
                    Some(refine_attention(tape, &fam[i], &cam[i], cfg.k)?)
                }
                (Some(fam), None) => Some(expected_weight(tape, &fam[i], cfg.k)?),
                (None, Some(cam)) => Some(tape.sigmoid(&cam[i])?),
                (None, None) => None,
            },
        };
        attention.push(stage_attention);
    }

    // DME: dilated trunk, attention-gated features, rectified heads.
    let trunk_spec = ConvSpec::same(3, cfg.dilation);
    let mut density = Vec::with_capacity(4);
    let mut x = f4;
    for i in 0..4 {
        if i > 0 {
            x = tape.upsample_bilinear2x(&x)?;
        }
        let f = relu_conv(tape, params, &format!("dme.t{}", i + 1), &x, trunk_spec)?;
        let g = match &attention[i] {
            Some(a) => fuse(tape, &f, a)?,
            None => f,
        };
        let tap = if i < 3 {
            g.clone()
        } else {
            relu_conv(tape, params, "dme.term", &g, ConvSpec::same(1, 1))?
        };
        let head = conv_step(tape, params, &format!("dme.h{}", i + 1), &tap, conv3)?;
        let rectified = tape.relu(&head)?;
        density.push(upsample_times(tape, &rectified, 3 - i)?);
        x = g;
    }

    let lift = |tape: &mut Tape<T>, stage: Option<Vec<Tensor<T>>>| -> Result<Vec<Tensor<T>>> {
        match stage {
            None => Ok(Vec::new()),
            Some(logits) => logits
                .iter()
                .enumerate()
                .map(|(i, t)| upsample_times(tape, t, 3 - i))
                .collect(),
        }
    };
    let cam_logits = lift(tape, crr_stage)?;
    let fam_logits = lift(tape, dle_stage)?;

    Ok(ModelOutputs {
        cam_logits,
        fam_logits,
        density,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            width_mult: 0.0625,
            ..ModelConfig::default()
        }
    }

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            Shape::new(1, c, h, w),
            (0..c * h * w).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parameter_inventory_matches_contract() {
        let params = build(&ModelConfig::default(), 0).unwrap();
        // 10 encoder convs, 9 convs per decoder branch, a weight and a bias
        // each.
        let enc_convs = params.names().filter(|n| n.starts_with("enc.") && n.ends_with(".w")).count();
        assert_eq!(enc_convs, 10);
        assert_eq!(params.len(), 2 * (10 + 3 * 9));
        assert_eq!(params.get("crr.term.w").shape(), Shape::new(1, 64, 3, 3));
        assert_eq!(params.get("dle.term.w").shape(), Shape::new(6, 64, 3, 3));
        assert_eq!(params.get("dme.term.w").shape(), Shape::new(1, 64, 1, 1));
        assert_eq!(params.get("crr.t1.w").shape(), Shape::new(256, 512, 3, 3));
        assert_eq!(params.get("dle.h1.w").shape(), Shape::new(6, 256, 3, 3));
        assert_eq!(params.get("dle.h4.w").shape(), Shape::new(6, 6, 3, 3));
        assert_eq!(params.get("dme.h1.w").shape(), Shape::new(1, 512, 3, 3));
        assert_eq!(params.get("dme.h4.w").shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(params.get("enc.s1.c1.w").shape(), Shape::new(64, 3, 3, 3));
        assert_eq!(params.get("enc.s4.c3.b").shape(), Shape::new(1, 512, 1, 1));
    }

    #[test]
    fn width_mult_scales_features_not_semantics() {
        let config = ModelConfig {
            width_mult: 0.125,
            ..ModelConfig::default()
        };
        let params = build(&config, 0).unwrap();
        assert_eq!(params.get("enc.s1.c1.w").shape(), Shape::new(8, 3, 3, 3));
        assert_eq!(params.get("dme.t1.w").shape(), Shape::new(64, 64, 3, 3));
        assert_eq!(params.get("crr.term.w").shape(), Shape::new(1, 8, 3, 3));
        assert_eq!(params.get("dle.term.w").shape(), Shape::new(6, 8, 3, 3));
        assert_eq!(params.get("dle.h4.w").shape(), Shape::new(6, 6, 3, 3));
    }

    #[test]
    fn build_is_seed_deterministic_with_zero_biases() {
        let config = tiny_config();
        let a = build(&config, 42).unwrap();
        let b = build(&config, 42).unwrap();
        let c = build(&config, 43).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).data(), "{name} differs across runs");
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} must start at zero");
            }
        }
        assert!(a.iter().any(|(n, t)| t.data() != c.get(n).data()));
    }

    #[test]
    fn forward_emits_full_resolution_maps() {
        let params = build(&tiny_config(), 1).unwrap();
        let image = random_image(2, 3, 64, 48);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &image, ForwardOptions::default()).unwrap();
        assert_eq!(out.density.len(), 4);
        assert_eq!(out.cam_logits.len(), 4);
        assert_eq!(out.fam_logits.len(), 4);
        for d in &out.density {
            assert_eq!(d.shape(), Shape::new(1, 1, 64, 48));
            assert!(d.data().iter().all(|&v| v >= 0.0), "density must be rectified");
        }
        for c in &out.cam_logits {
            assert_eq!(c.shape(), Shape::new(1, 1, 64, 48));
        }
        for f in &out.fam_logits {
            assert_eq!(f.shape(), Shape::new(1, 6, 64, 48));
        }
        assert!(std::ptr::eq(out.final_density(), &out.density[3]));
    }

    #[test]
    fn zero_parameters_emit_zero_density() {
        let mut params = build(&tiny_config(), 1).unwrap();
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let shape = params.get(&name).shape();
            params.set(&name, Tensor::zeros(shape));
        }
        let image = random_image(3, 3, 32, 32);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &image, ForwardOptions::default()).unwrap();
        for d in &out.density {
            assert!(d.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = build(&tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        let odd = random_image(0, 3, 60, 64);
        assert!(matches!(
            forward(&mut tape, &params, &odd, ForwardOptions::default()),
            Err(ModelError::BadInput(_))
        ));
        let gray = random_image(0, 1, 64, 64);
        assert!(matches!(
            forward(&mut tape, &params, &gray, ForwardOptions::default()),
            Err(ModelError::BadInput(_))
        ));
    }

    #[test]
    fn forced_zero_attention_matches_disabled_bit_for_bit() {
        let params = build(&tiny_config(), 5).unwrap();
        let image = random_image(6, 3, 32, 40);
        let mut tape = Tape::new();
        let forced = forward(
            &mut tape,
            &params,
            &image,
            ForwardOptions {
                attention: AttentionMode::ForceZero,
            },
        )
        .unwrap();
        let mut tape = Tape::new();
        let disabled = forward(
            &mut tape,
            &params,
            &image,
            ForwardOptions {
                attention: AttentionMode::Disabled,
            },
        )
        .unwrap();
        for (a, b) in forced.density.iter().zip(&disabled.density) {
            assert_eq!(a.data(), b.data(), "zeroed attention must be a no-op");
        }
    }

    #[test]
    fn class_weights_hit_documented_values() {
        assert_eq!(class_weights(6), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(class_weights(2), vec![0.0, 1.0]);
    }

    #[test]
    fn uniform_attention_sums_to_one() {
        // Uniform softmax over k=6 has expected weight 0.5; sigmoid(0) adds
        // another 0.5.
        let mut tape = Tape::<f64>::new();
        let fam = Tensor::zeros(Shape::new(1, 6, 4, 4));
        let cam = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let a = refine_attention(&mut tape, &fam, &cam, 6).unwrap();
        for &v in a.data().iter() {
            assert!((v - 1.0).abs() < 1e-12, "attention {v}");
        }
    }

    #[test]
    fn certain_background_suppresses_attention() {
        let mut tape = Tape::<f32>::new();
        let mut fam_data = vec![-20.0f32; 6 * 16];
        fam_data[..16].fill(20.0); // class 0 plane
        let fam = Tensor::new(Shape::new(1, 6, 4, 4), fam_data).unwrap();
        let cam = Tensor::full(Shape::new(1, 1, 4, 4), -20.0);
        let a = refine_attention(&mut tape, &fam, &cam, 6).unwrap();
        for &v in a.data().iter() {
            assert!(v < 1e-4, "attention {v} not suppressed");
        }
    }

    #[test]
    fn attention_shape_errors() {
        let mut tape = Tape::<f32>::new();
        let fam = Tensor::zeros(Shape::new(1, 6, 4, 4));
        let cam = Tensor::zeros(Shape::new(1, 1, 8, 8));
        assert!(matches!(
            refine_attention(&mut tape, &fam, &cam, 6),
            Err(ModelError::BadInput(_))
        ));
        let wide_cam = Tensor::zeros(Shape::new(1, 2, 4, 4));
        assert!(matches!(
            refine_attention(&mut tape, &fam, &wide_cam, 6),
            Err(ModelError::BadInput(_))
        ));
    }

    #[test]
    fn fuse_identities() {
        let mut tape = Tape::<f32>::new();
        let fm = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let zero = Tensor::zeros(Shape::new(1, 1, 1, 2));
        assert_eq!(fuse(&mut tape, &fm, &zero).unwrap().data(), fm.data());
        let one = Tensor::full(Shape::new(1, 1, 1, 2), 1.0);
        assert_eq!(fuse(&mut tape, &fm, &one).unwrap().data(), &[2.0, 4.0]);
        let att = Tensor::new(Shape::new(1, 1, 1, 2), vec![0.5, 0.0]).unwrap();
        assert_eq!(fuse(&mut tape, &fm, &att).unwrap().data(), &[1.5, 2.0]);
        let bad = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(fuse(&mut tape, &fm, &bad).is_err());
    }

    #[test]
    fn baseline_config_drops_attention_branches() {
        let config = ModelConfig {
            use_crr: false,
            use_dle: false,
            ..tiny_config()
        };
        let params = build(&config, 2).unwrap();
        assert!(params.names().all(|n| !n.starts_with("crr.") && !n.starts_with("dle.")));
        let image = random_image(7, 3, 32, 32);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &image, ForwardOptions::default()).unwrap();
        assert!(out.cam_logits.is_empty());
        assert!(out.fam_logits.is_empty());
        assert_eq!(out.density.len(), 4);
    }

    #[test]
    fn partial_branches_still_gate_density() {
        for (use_crr, use_dle) in [(true, false), (false, true)] {
            let config = ModelConfig {
                use_crr,
                use_dle,
                ..tiny_config()
            };
            let params = build(&config, 3).unwrap();
            let image = random_image(8, 3, 32, 32);
            let mut tape = Tape::new();
            let normal = forward(&mut tape, &params, &image, ForwardOptions::default()).unwrap();
            let mut tape = Tape::new();
            let disabled = forward(
                &mut tape,
                &params,
                &image,
                ForwardOptions {
                    attention: AttentionMode::Disabled,
                },
            )
            .unwrap();
            assert_ne!(
                normal.density[3].data(),
                disabled.density[3].data(),
                "attention from a single branch must still act (crr={use_crr}, dle={use_dle})"
            );
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let base = ModelConfig::default();
        for config in [
            ModelConfig { k: 1, ..base },
            ModelConfig { k: 300, ..base },
            ModelConfig { width_mult: 0.0, ..base },
            ModelConfig { width_mult: 1.5, ..base },
            ModelConfig { width_mult: 0.001, ..base },
            ModelConfig { input_channels: 0, ..base },
            ModelConfig { dilation: 0, ..base },
            ModelConfig { init_std: 0.0, ..base },
        ] {
            assert!(config.validate().is_err(), "{config:?} must be rejected");
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn from_named_round_trips_and_rejects_mismatches() {
        let config = tiny_config();
        let params = build(&config, 9).unwrap();
        let map: BTreeMap<String, Tensor<f32>> =
            params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let back = Parameters::from_named(config, map.clone()).unwrap();
        assert_eq!(back.len(), params.len());

        let mut missing = map.clone();
        missing.remove("dme.term.w");
        assert!(matches!(
            Parameters::from_named(config, missing),
            Err(ModelError::BadParameters(_))
        ));

        let mut reshaped = map;
        reshaped.insert("dme.term.w".into(), Tensor::zeros(Shape::new(1, 4, 3, 3)));
        assert!(matches!(
            Parameters::from_named(config, reshaped),
            Err(ModelError::BadParameters(_))
        ));
    }
}
