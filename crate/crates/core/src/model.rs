//! The waveform transformer: patch split, affine patch projection, class
//! token, positional embeddings, pre-norm encoder, and a wide/deep head.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{GeluKind, Tape, Tensor, TensorError, Var};
use crate::dsp::ProcessedWindow;

/// Additive score applied to masked keys when padding masking is enabled.
const MASK_SCORE: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("window is {leads}x{samples}, model expects {expected_leads}x{expected_samples}")]
    WindowShape {
        leads: usize,
        samples: usize,
        expected_leads: usize,
        expected_samples: usize,
    },
    #[error("wide feature vector has length {actual}, model expects {expected}")]
    WideLength { expected: usize, actual: usize },
    #[error("parameter set mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionalKind {
    #[default]
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_leads: usize,
    pub d_patch: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout_encoder: f64,
    pub d_deep: usize,
    pub d_wide: usize,
    pub d_class: usize,
    pub dropout_head: f64,
    pub window_samples: usize,
    pub gelu: GeluKind,
    pub positional: PositionalKind,
    /// Masks keys whose patch lies entirely in the zero padding.
    pub mask_padding: bool,
    pub dropout_after_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_leads: 12,
            d_patch: 64,
            d_model: 768,
            num_layers: 12,
            num_heads: 12,
            d_ff: 768,
            dropout_encoder: 0.1,
            d_deep: 64,
            d_wide: 22,
            d_class: 26,
            dropout_head: 0.2,
            window_samples: 7680,
            gelu: GeluKind::default(),
            positional: PositionalKind::default(),
            mask_padding: false,
            dropout_after_positional: true,
        }
    }
}

impl ModelConfig {
    pub fn for_leads(num_leads: usize) -> Self {
        Self {
            num_leads,
            ..Self::default()
        }
    }

    /// Small configuration for gradient checks and overfitting runs.
    pub fn toy() -> Self {
        Self {
            num_leads: 2,
            d_patch: 4,
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            d_ff: 16,
            d_deep: 8,
            d_wide: 4,
            d_class: 3,
            window_samples: 12,
            ..Self::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        self.window_samples / self.d_patch
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn token_width(&self) -> usize {
        self.num_leads * self.d_patch
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_leads", self.num_leads),
            ("d_patch", self.d_patch),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("d_deep", self.d_deep),
            ("d_wide", self.d_wide),
            ("d_class", self.d_class),
            ("window_samples", self.window_samples),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !self.window_samples.is_multiple_of(self.d_patch) {
            return Err(ModelError::Config(format!(
                "window_samples {} not divisible by d_patch {}",
                self.window_samples, self.d_patch
            )));
        }
        for (name, p) in [("dropout_encoder", self.dropout_encoder), ("dropout_head", self.dropout_head)] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.token_width() * d + d + d;
        let positional = match self.positional {
            PositionalKind::Learned => self.seq_len() * d,
            PositionalKind::Sinusoidal => 0,
        };
        let per_layer = 4 * (d * d + d) + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d) + 4 * d;
        let head = 2 * d + (d * self.d_deep + self.d_deep) + ((self.d_deep + self.d_wide) * self.d_class + self.d_class);
        embed + positional + self.num_layers * per_layer + head
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let gelu = match self.gelu {
            GeluKind::Tanh => "tanh",
            GeluKind::Erf => "erf",
        };
        let positional = match self.positional {
            PositionalKind::Learned => "learned",
            PositionalKind::Sinusoidal => "sinusoidal",
        };
        let _ = writeln!(s, "num_leads = {}", self.num_leads);
        let _ = writeln!(s, "d_patch = {}", self.d_patch);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "dropout_encoder = {}", self.dropout_encoder);
        let _ = writeln!(s, "d_deep = {}", self.d_deep);
        let _ = writeln!(s, "d_wide = {}", self.d_wide);
        let _ = writeln!(s, "d_class = {}", self.d_class);
        let _ = writeln!(s, "dropout_head = {}", self.dropout_head);
        let _ = writeln!(s, "window_samples = {}", self.window_samples);
        let _ = writeln!(s, "gelu = {gelu}");
        let _ = writeln!(s, "positional = {positional}");
        let _ = writeln!(s, "mask_padding = {}", self.mask_padding);
        let _ = writeln!(s, "dropout_after_positional = {}", self.dropout_after_positional);
        s
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    /// Keys not present keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, ModelError> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets a single field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.parse()
                .map_err(|_| ModelError::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "num_leads" => self.num_leads = num(key, value)?,
            "d_patch" => self.d_patch = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "num_layers" => self.num_layers = num(key, value)?,
            "num_heads" => self.num_heads = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "dropout_encoder" => self.dropout_encoder = num(key, value)?,
            "d_deep" => self.d_deep = num(key, value)?,
            "d_wide" => self.d_wide = num(key, value)?,
            "d_class" => self.d_class = num(key, value)?,
            "dropout_head" => self.dropout_head = num(key, value)?,
            "window_samples" => self.window_samples = num(key, value)?,
            "mask_padding" => self.mask_padding = num(key, value)?,
            "dropout_after_positional" => self.dropout_after_positional = num(key, value)?,
            "gelu" => {
                self.gelu = match value {
                    "tanh" => GeluKind::Tanh,
                    "erf" => GeluKind::Erf,
                    _ => return Err(ModelError::Config(format!("gelu: unknown variant {value:?}"))),
                }
            }
            "positional" => {
                self.positional = match value {
                    "learned" => PositionalKind::Learned,
                    "sinusoidal" => PositionalKind::Sinusoidal,
                    _ => return Err(ModelError::Config(format!("positional: unknown variant {value:?}"))),
                }
            }
            _ => return Err(ModelError::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub q_weight: T,
    pub q_bias: T,
    pub k_weight: T,
    pub k_bias: T,
    pub v_weight: T,
    pub v_bias: T,
    pub out_weight: T,
    pub out_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff1_weight: T,
    pub ff1_bias: T,
    pub ff2_weight: T,
    pub ff2_bias: T,
}

impl<T> LayerWeights<T> {
    const NAMES: [&'static str; 16] = [
        "ln1.gain",
        "ln1.bias",
        "attention.q.weight",
        "attention.q.bias",
        "attention.k.weight",
        "attention.k.bias",
        "attention.v.weight",
        "attention.v.bias",
        "attention.out.weight",
        "attention.out.bias",
        "ln2.gain",
        "ln2.bias",
        "ff1.weight",
        "ff1.bias",
        "ff2.weight",
        "ff2.bias",
    ];

    fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.q_weight,
            &self.q_bias,
            &self.k_weight,
            &self.k_bias,
            &self.v_weight,
            &self.v_bias,
            &self.out_weight,
            &self.out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff1_weight,
            &self.ff1_bias,
            &self.ff2_weight,
            &self.ff2_bias,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.q_weight,
            &mut self.q_bias,
            &mut self.k_weight,
            &mut self.k_bias,
            &mut self.v_weight,
            &mut self.v_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff1_weight,
            &mut self.ff1_bias,
            &mut self.ff2_weight,
            &mut self.ff2_bias,
        ]
    }

    fn from_iter(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            q_weight: it.next()?,
            q_bias: it.next()?,
            k_weight: it.next()?,
            k_bias: it.next()?,
            v_weight: it.next()?,
            v_bias: it.next()?,
            out_weight: it.next()?,
            out_bias: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            ff1_weight: it.next()?,
            ff1_bias: it.next()?,
            ff2_weight: it.next()?,
            ff2_bias: it.next()?,
        })
    }
}

/// Every trainable array of the model, generic over its representation
/// (concrete tensors, tape variables, shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub class_token: T,
    /// Absent with sinusoidal positions.
    pub positional: Option<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_ln_gain: T,
    pub final_ln_bias: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

pub type ModelParams = Weights<Tensor>;

impl<T> Weights<T> {
    /// Fully qualified names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "patch_projection.weight".to_string(),
            "patch_projection.bias".into(),
            "class_token".into(),
        ];
        if self.positional.is_some() {
            names.push("positional_embedding".into());
        }
        for i in 0..self.layers.len() {
            names.extend(LayerWeights::<T>::NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        names.extend(
            [
                "final_ln.gain",
                "final_ln.bias",
                "head.fc1.weight",
                "head.fc1.bias",
                "head.fc2.weight",
                "head.fc2.bias",
            ]
            .map(String::from),
        );
        names
    }

    /// Values in the same order as [`Weights::names`].
    pub fn values(&self) -> Vec<&T> {
        let mut v = vec![&self.patch_weight, &self.patch_bias, &self.class_token];
        v.extend(self.positional.as_ref());
        for layer in &self.layers {
            v.extend(layer.refs());
        }
        v.extend([
            &self.final_ln_gain,
            &self.final_ln_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]);
        v
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.class_token];
        v.extend(self.positional.as_mut());
        for layer in &mut self.layers {
            v.extend(layer.refs_mut());
        }
        v.extend([
            &mut self.final_ln_gain,
            &mut self.final_ln_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]);
        v
    }

    /// Rebuilds the structure from values in canonical order.
    pub fn from_values(values: Vec<T>, num_layers: usize, has_positional: bool) -> Option<Self> {
        let expected = 3 + usize::from(has_positional) + 16 * num_layers + 6;
        if values.len() != expected {
            return None;
        }
        let mut it = values.into_iter();
        let patch_weight = it.next()?;
        let patch_bias = it.next()?;
        let class_token = it.next()?;
        let positional = if has_positional { Some(it.next()?) } else { None };
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            layers.push(LayerWeights::from_iter(it.by_ref().take(16))?);
        }
        Some(Self {
            patch_weight,
            patch_bias,
            class_token,
            positional,
            layers,
            final_ln_gain: it.next()?,
            final_ln_bias: it.next()?,
            fc1_weight: it.next()?,
            fc1_bias: it.next()?,
            fc2_weight: it.next()?,
            fc2_bias: it.next()?,
        })
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<Weights<U>, E> {
        let names = self.names();
        let mut out = Vec::with_capacity(names.len());
        for (name, value) in names.iter().zip(self.values()) {
            out.push(f(name, value)?);
        }
        Ok(Weights::from_values(out, self.layers.len(), self.positional.is_some())
            .expect("mapped values keep the layout"))
    }

    pub fn len(&self) -> usize {
        3 + usize::from(self.positional.is_some()) + 16 * self.layers.len() + 6
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Weights<Vec<usize>> {
    /// Expected shape of every parameter.
    pub fn shapes(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = || LayerWeights {
            ln1_gain: vec![d],
            ln1_bias: vec![d],
            q_weight: vec![d, d],
            q_bias: vec![d],
            k_weight: vec![d, d],
            k_bias: vec![d],
            v_weight: vec![d, d],
            v_bias: vec![d],
            out_weight: vec![d, d],
            out_bias: vec![d],
            ln2_gain: vec![d],
            ln2_bias: vec![d],
            ff1_weight: vec![d, config.d_ff],
            ff1_bias: vec![config.d_ff],
            ff2_weight: vec![config.d_ff, d],
            ff2_bias: vec![d],
        };
        Weights {
            patch_weight: vec![config.token_width(), d],
            patch_bias: vec![d],
            class_token: vec![d],
            positional: (config.positional == PositionalKind::Learned).then(|| vec![config.seq_len(), d]),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            final_ln_gain: vec![d],
            final_ln_bias: vec![d],
            fc1_weight: vec![d, config.d_deep],
            fc1_bias: vec![config.d_deep],
            fc2_weight: vec![config.d_deep + config.d_wide, config.d_class],
            fc2_bias: vec![config.d_class],
        }
    }
}

impl ModelParams {
    pub fn parameter_count(&self) -> usize {
        self.values().iter().map(|t| t.numel()).sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names().into_iter().zip(self.values().into_iter().cloned()).collect()
    }

    /// Inverse of [`ModelParams::to_named`]; names, order and shapes must
    /// match the config exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let shapes = Weights::shapes(config);
        let expected_names = shapes.names();
        if named.len() != expected_names.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, found {}",
                expected_names.len(),
                named.len()
            )));
        }
        let mut values = Vec::with_capacity(named.len());
        for ((name, tensor), (expected, shape)) in named.into_iter().zip(expected_names.iter().zip(shapes.values())) {
            if &name != expected {
                return Err(ModelError::Params(format!("expected tensor {expected}, found {name}")));
            }
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::Params(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            values.push(tensor);
        }
        Ok(Self::from_values(values, config.num_layers, config.positional == PositionalKind::Learned)
            .expect("count checked above"))
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Weights::shapes(config).try_map(|_, s| Tensor::zeros(s.clone()))?)
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|t| t.all_finite())
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn quantize_f32(&mut self) {
        for t in self.values_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

/// Truncated-normal (σ = 0.02, cut at ±2σ) weights and embeddings, zero
/// biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let params = Weights::shapes(config).try_map(|name, shape| {
        let n: usize = shape.iter().product();
        let data = if is_gain(name) {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                })
                .collect()
        };
        Tensor::new(shape.clone(), data)
    })?;
    Ok(params)
}

/// Splits a window into `N` tokens of width `num_leads·d_patch`, each
/// holding one patch of every lead, lead-major.
pub fn patchify(signal: &[Vec<f64>], config: &ModelConfig) -> Result<Tensor, ModelError> {
    let samples = signal.first().map_or(0, Vec::len);
    if signal.len() != config.num_leads
        || samples != config.window_samples
        || signal.iter().any(|r| r.len() != samples)
    {
        return Err(ModelError::WindowShape {
            leads: signal.len(),
            samples,
            expected_leads: config.num_leads,
            expected_samples: config.window_samples,
        });
    }
    let n = config.num_patches();
    let dp = config.d_patch;
    let mut data = Vec::with_capacity(n * config.token_width());
    for t in 0..n {
        for lead in signal {
            data.extend_from_slice(&lead[t * dp..(t + 1) * dp]);
        }
    }
    Ok(Tensor::new(vec![n, config.token_width()], data)?)
}

/// Fixed sine/cosine position table of shape `[seq_len, d_model]`.
pub fn sinusoidal_positions(seq_len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(seq_len * d_model);
    for pos in 0..seq_len {
        for i in 0..d_model {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![seq_len, d_model], data).expect("non-empty table")
}

/// Inputs of one forward pass beyond the parameters.
#[derive(Debug, Clone)]
pub struct ForwardInput<'a> {
    pub tokens: &'a Tensor,
    pub wide: &'a [f64],
    /// First padded sample of the window.
    pub pad_start: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout_seed: u64,
    pub capture_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout_seed: 0,
            capture_attention: false,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout_seed,
            capture_attention: false,
        }
    }
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Debug, Clone)]
pub struct TapeOutput {
    pub logits: Var,
    pub probabilities: Var,
    /// `attention[layer][head]`, each `[seq_len, seq_len]`, when captured.
    pub attention: Vec<Vec<Var>>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct DropoutSeeds {
    base: u64,
    counter: u64,
}

impl DropoutSeeds {
    fn next(&mut self) -> u64 {
        self.counter += 1;
        splitmix64(self.base ^ splitmix64(self.counter))
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Records one forward pass on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    weights: &Weights<Var>,
    input: &ForwardInput<'_>,
    config: &ModelConfig,
    options: &ForwardOptions,
) -> Result<TapeOutput, ModelError> {
    let n = config.num_patches();
    if input.tokens.shape() != [n, config.token_width()] {
        return Err(ModelError::WindowShape {
            leads: input.tokens.shape().get(1).copied().unwrap_or(0) / config.d_patch,
            samples: input.tokens.shape()[0] * config.d_patch,
            expected_leads: config.num_leads,
            expected_samples: config.window_samples,
        });
    }
    if input.wide.len() != config.d_wide {
        return Err(ModelError::WideLength {
            expected: config.d_wide,
            actual: input.wide.len(),
        });
    }
    let train = options.mode == Mode::Train;
    let mut seeds = DropoutSeeds {
        base: options.dropout_seed,
        counter: 0,
    };
    let d = config.d_model;
    let seq = config.seq_len();
    let p_enc = config.dropout_encoder;

    let tokens = tape.constant(input.tokens.clone());
    let projected = affine(tape, tokens, weights.patch_weight, weights.patch_bias)?;
    let cls = tape.reshape(weights.class_token, vec![1, d])?;
    let mut x = tape.concat(&[cls, projected], 0)?;
    let positions = match weights.positional {
        Some(p) => p,
        None => tape.constant(sinusoidal_positions(seq, d)),
    };
    x = tape.add(x, positions)?;
    if config.dropout_after_positional {
        x = tape.dropout(x, p_enc, seeds.next(), train)?;
    }

    let mask = if config.mask_padding && input.pad_start < config.window_samples {
        let mut m = vec![0.0; seq];
        for t in 0..n {
            if t * config.d_patch >= input.pad_start {
                m[t + 1] = MASK_SCORE;
            }
        }
        Some(tape.constant(Tensor::new(vec![seq], m)?))
    } else {
        None
    };

    let dh = config.head_width();
    let score_scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::new();
    for layer in &weights.layers {
        let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = affine(tape, h, layer.q_weight, layer.q_bias)?;
        let k = affine(tape, h, layer.k_weight, layer.k_bias)?;
        let v = affine(tape, h, layer.v_weight, layer.v_bias)?;
        let mut head_outputs = Vec::with_capacity(config.num_heads);
        let mut layer_maps = Vec::new();
        for head in 0..config.num_heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, score_scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights_h = tape.softmax(scores)?;
            if options.capture_attention {
                layer_maps.push(weights_h);
            }
            let dropped = tape.dropout(weights_h, p_enc, seeds.next(), train)?;
            head_outputs.push(tape.matmul(dropped, vh)?);
        }
        if options.capture_attention {
            attention.push(layer_maps);
        }
        let merged = tape.concat(&head_outputs, 1)?;
        let attn_out = affine(tape, merged, layer.out_weight, layer.out_bias)?;
        let attn_out = tape.dropout(attn_out, p_enc, seeds.next(), train)?;
        x = tape.add(x, attn_out)?;

        let h2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let ff = affine(tape, h2, layer.ff1_weight, layer.ff1_bias)?;
        let ff = tape.gelu(ff, config.gelu)?;
        let ff = affine(tape, ff, layer.ff2_weight, layer.ff2_bias)?;
        let ff = tape.dropout(ff, p_enc, seeds.next(), train)?;
        x = tape.add(x, ff)?;
    }

    let x = tape.layer_norm(x, weights.final_ln_gain, weights.final_ln_bias)?;
    let class_state = tape.slice(x, 0, 0, 1)?;
    let deep = affine(tape, class_state, weights.fc1_weight, weights.fc1_bias)?;
    let deep = tape.gelu(deep, config.gelu)?;
    let deep = tape.dropout(deep, config.dropout_head, seeds.next(), train)?;
    let wide = tape.constant(Tensor::new(vec![1, config.d_wide], input.wide.to_vec())?);
    let joined = tape.concat(&[deep, wide], 1)?;
    let logits = affine(tape, joined, weights.fc2_weight, weights.fc2_bias)?;
    let logits = tape.reshape(logits, vec![config.d_class])?;
    let probabilities = tape.sigmoid(logits)?;
    Ok(TapeOutput {
        logits,
        probabilities,
        attention,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    /// Per layer, `[num_heads, seq_len, seq_len]`.
    pub attention_maps: Option<Vec<Tensor>>,
}

fn stack_maps(tape: &Tape, heads: &[Var]) -> Result<Tensor, TensorError> {
    let s = tape.shape(heads[0]).to_vec();
    let mut data = Vec::with_capacity(heads.len() * s[0] * s[1]);
    for h in heads {
        data.extend_from_slice(tape.value(*h).data());
    }
    Tensor::new(vec![heads.len(), s[0], s[1]], data)
}

/// Runs the model without recording gradients.
pub fn forward(
    params: &ModelParams,
    window: &ProcessedWindow,
    wide: &[f64],
    config: &ModelConfig,
    options: &ForwardOptions,
) -> Result<ModelOutput, ModelError> {
    let tokens = patchify(&window.signal, config)?;
    forward_tokens(
        params,
        &ForwardInput {
            tokens: &tokens,
            wide,
            pad_start: window.pad_start,
        },
        config,
        options,
    )
}

pub fn forward_tokens(
    params: &ModelParams,
    input: &ForwardInput<'_>,
    config: &ModelConfig,
    options: &ForwardOptions,
) -> Result<ModelOutput, ModelError> {
    let mut tape = Tape::new();
    let vars = params.try_map(|_, t| Ok::<_, ModelError>(tape.constant(t.clone())))?;
    let out = forward_on_tape(&mut tape, &vars, input, config, options)?;
    let attention_maps = if options.capture_attention {
        Some(
            out.attention
                .iter()
                .map(|heads| stack_maps(&tape, heads))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    Ok(ModelOutput {
        probabilities: tape.value(out.probabilities).data().to_vec(),
        logits: tape.value(out.logits).data().to_vec(),
        attention_maps,
    })
}

/// Mean binary cross-entropy of one sample and its gradient with respect to
/// every parameter.
pub fn loss_and_gradients(
    params: &ModelParams,
    input: &ForwardInput<'_>,
    targets: &[f64],
    config: &ModelConfig,
    options: &ForwardOptions,
) -> Result<(f64, ModelParams), ModelError> {
    let mut tape = Tape::new();
    let vars = params.try_map(|_, t| Ok::<_, ModelError>(tape.leaf(t.clone())))?;
    let out = forward_on_tape(&mut tape, &vars, input, config, options)?;
    let target = Tensor::new(vec![config.d_class], targets.to_vec())?;
    let loss = tape.binary_cross_entropy(out.probabilities, &target)?;
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let grad_params = vars.try_map(|_, v| Ok::<_, ModelError>(grads.get_or_zeros(*v, tape.shape(*v))))?;
    Ok((loss_value, grad_params))
}

/// Mean BCE of one sample, forward only.
pub fn loss_only(
    params: &ModelParams,
    input: &ForwardInput<'_>,
    targets: &[f64],
    config: &ModelConfig,
    options: &ForwardOptions,
) -> Result<f64, ModelError> {
    let out = forward_tokens(params, input, config, options)?;
    Ok(bce(&out.probabilities, targets))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1-1e-7]`.
pub fn bce(probabilities: &[f64], targets: &[f64]) -> f64 {
    let eps = 1e-7;
    probabilities
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / probabilities.len() as f64
}

/// Random wide vector and window for tests and benchmarks.
pub fn random_input(config: &ModelConfig, seed: u64) -> (Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal: Vec<Vec<f64>> = (0..config.num_leads)
        .map(|_| (0..config.window_samples).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let wide = (0..config.d_wide).map(|_| rng.random_range(-1.0..1.0)).collect();
    (patchify(&signal, config).expect("shape from config"), wide)
}
