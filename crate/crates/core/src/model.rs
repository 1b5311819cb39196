//! TCANet: a strided convolution plus six separable temporal convolutions,
//! a multi-head self-attention decoder and a pooled softmax classifier, with
//! two bias-free projection heads used only during training.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::ops::{self, Mode};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Input frames; the encoder halves this.
    pub frames: usize,
    pub channels: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    /// Separable layers after the strided first layer.
    pub separable_layers: usize,
    pub heads: usize,
    /// Divide attention logits by `sqrt(channels / heads)` instead of
    /// `channels / heads`.
    pub sqrt_scaling: bool,
    pub classes: usize,
    pub wvc_hidden: usize,
    pub teacher_dim: usize,
    pub siam_hidden: usize,
    pub siam_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            frames: 100,
            channels: 64,
            first_kernel: 3,
            kernel: 9,
            separable_layers: 6,
            heads: 4,
            sqrt_scaling: false,
            classes: 12,
            wvc_hidden: 128,
            teacher_dim: 768,
            siam_hidden: 128,
            siam_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.first_kernel.is_multiple_of(2) || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.frames == 0 || self.n_mels == 0 || self.classes == 0 {
            return Err(Error::Config("frames, mel bins and classes must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced by the encoder.
    pub fn encoded_frames(&self) -> usize {
        ops::conv_out_len(self.frames, 2)
    }

    /// Attention logit divisor: the per-head width, or its square root.
    pub fn attention_divisor(&self) -> f64 {
        let width = (self.channels / self.heads) as f64;
        if self.sqrt_scaling {
            width.sqrt()
        } else {
            width
        }
    }
}

/// Parameter indices of one encoder layer.
#[derive(Clone, Debug)]
enum EncoderLayer {
    Plain { weight: usize, bias: usize, gamma: usize, beta: usize },
    Separable { dw: usize, dw_bias: usize, pw: usize, pw_bias: usize, gamma: usize, beta: usize },
}

impl EncoderLayer {
    fn bn(&self) -> (usize, usize) {
        match *self {
            EncoderLayer::Plain { gamma, beta, .. } | EncoderLayer::Separable { gamma, beta, .. } => {
                (gamma, beta)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Indices {
    encoder: Vec<EncoderLayer>,
    /// Running mean / variance buffer indices per encoder layer.
    stats: Vec<(usize, usize)>,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    cls_w: usize,
    cls_b: usize,
    w1: usize,
    w2: usize,
    w3: usize,
    w4: usize,
}

/// TCANet weights, batch-norm statistics and configuration.
#[derive(Clone, Debug)]
pub struct Tcanet<S> {
    config: ModelConfig,
    store: ParamStore<S>,
    idx: Indices,
}

/// Every parameter of a [`Tcanet`] bound onto one tape.
///
/// Both siamese branches run through the same `Bound`, so they read the very
/// same parameter nodes and their gradients meet in one place.
pub struct Bound<'t, S> {
    vars: Vec<Var<'t, S>>,
}

impl<'t, S> Bound<'t, S> {
    fn at(&self, index: usize) -> Var<'t, S>
    where
        S: Copy,
    {
        self.vars[index]
    }

    /// The tape variable of parameter `index`.
    pub fn var(&self, index: usize) -> Var<'t, S>
    where
        S: Copy,
    {
        self.vars[index]
    }
}

/// Parameter-name prefixes of the model parts.
pub mod part {
    pub const ENCODER: &str = "enc.";
    pub const DECODER: &str = "dec.";
    pub const CLASSIFIER: &str = "cls.";
    pub const WVC_HEAD: &str = "wvc.";
    pub const SIAM_HEAD: &str = "siam.";
}

impl<S: Scalar> Tcanet<S> {
    /// Builds the model with zero weights, unit BN scale and unit running
    /// variance; call [`Tcanet::init_params`] for a trainable start.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut stats = Vec::new();
        let mut bn = |store: &mut ParamStore<S>, i: usize| {
            let gamma = store.add(&format!("enc.{i}.bn.gamma"), Tensor::ones(&[c]));
            let beta = store.add(&format!("enc.{i}.bn.beta"), Tensor::zeros(&[c]));
            let mean = store.add_buffer(&format!("enc.{i}.bn.running_mean"), Tensor::zeros(&[c]));
            let var = store.add_buffer(&format!("enc.{i}.bn.running_var"), Tensor::ones(&[c]));
            stats.push((mean, var));
            (gamma, beta)
        };

        let weight = store.add(
            "enc.0.conv.weight",
            Tensor::zeros(&[config.first_kernel, config.n_mels, c]),
        );
        let bias = store.add("enc.0.conv.bias", Tensor::zeros(&[c]));
        let (gamma, beta) = bn(&mut store, 0);
        encoder.push(EncoderLayer::Plain { weight, bias, gamma, beta });
        for i in 1..=config.separable_layers {
            let dw = store.add(&format!("enc.{i}.dw.weight"), Tensor::zeros(&[config.kernel, c]));
            let dw_bias = store.add(&format!("enc.{i}.dw.bias"), Tensor::zeros(&[c]));
            let pw = store.add(&format!("enc.{i}.pw.weight"), Tensor::zeros(&[c, c]));
            let pw_bias = store.add(&format!("enc.{i}.pw.bias"), Tensor::zeros(&[c]));
            let (gamma, beta) = bn(&mut store, i);
            encoder.push(EncoderLayer::Separable { dw, dw_bias, pw, pw_bias, gamma, beta });
        }

        let square = Tensor::zeros(&[c, c]);
        let idx = Indices {
            encoder,
            stats,
            wq: store.add("dec.wq", square.clone()),
            wk: store.add("dec.wk", square.clone()),
            wv: store.add("dec.wv", square.clone()),
            wo: store.add("dec.wo", square),
            cls_w: store.add("cls.weight", Tensor::zeros(&[c, config.classes])),
            cls_b: store.add("cls.bias", Tensor::zeros(&[config.classes])),
            w1: store.add("wvc.w1", Tensor::zeros(&[c, config.wvc_hidden])),
            w2: store.add("wvc.w2", Tensor::zeros(&[config.wvc_hidden, config.teacher_dim])),
            w3: store.add("siam.w3", Tensor::zeros(&[c, config.siam_hidden])),
            w4: store.add("siam.w4", Tensor::zeros(&[config.siam_hidden, config.siam_dim])),
        };
        Ok(Self { config, store, idx })
    }

    /// A freshly initialised model: Kaiming-uniform (fan-in, ReLU gain)
    /// convolution weights, Xavier-uniform dense weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.init_params(seed);
        Ok(model)
    }

    /// Re-draws every weight from `seed` and resets BN statistics.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.store.iter_mut() {
            let shape = p.value.shape().to_vec();
            let bound = match init_kind(&p.name, &shape) {
                Init::Kaiming { fan_in } => (6.0 / fan_in as f64).sqrt(),
                Init::Xavier { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::Const(v) => {
                    p.value.fill(lit(v));
                    continue;
                }
            };
            for x in p.value.data_mut() {
                *x = lit(rng.gen_range(-bound..bound));
            }
        }
        for (name, buf) in self.store.buffers_mut() {
            buf.fill(if name.ends_with("running_var") { S::one() } else { S::zero() });
        }
        self.store.zero_grad();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Marks which parameters take part in differentiation.
    pub fn set_trainable(&mut self, trainable: impl Fn(&str) -> bool) {
        for p in self.store.iter_mut() {
            p.requires_grad = trainable(&p.name);
        }
    }

    /// Places every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: (0..self.store.len()).map(|i| tape.param(&self.store, i)).collect(),
        }
    }

    /// `[B, frames, n_mels] → [B, frames/2, channels]`.
    ///
    /// In train mode the BN running statistics are updated.
    pub fn encoder_forward<'t>(&mut self, p: &Bound<'t, S>, x: Var<'t, S>, mode: Mode) -> Result<Var<'t, S>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.config.frames || shape[2] != self.config.n_mels {
            return Err(Error::contract(format!(
                "encoder expects [B,{},{}], got {shape:?}",
                self.config.frames, self.config.n_mels
            )));
        }
        let mut h = x;
        for (layer, &(mean, var)) in self.idx.encoder.iter().zip(&self.idx.stats) {
            h = match *layer {
                EncoderLayer::Plain { weight, bias, .. } => ops::conv1d(h, p.at(weight), p.at(bias), 2)?,
                EncoderLayer::Separable { dw, dw_bias, pw, pw_bias, .. } => {
                    ops::separable_conv1d(h, p.at(dw), p.at(dw_bias), p.at(pw), p.at(pw_bias))?
                }
            };
            let (gamma, beta) = layer.bn();
            let (mut rm, mut rv) = (
                std::mem::replace(self.store.buffer_mut(mean), Tensor::zeros(&[0])),
                std::mem::replace(self.store.buffer_mut(var), Tensor::zeros(&[0])),
            );
            let out = ops::batch_norm(h, p.at(gamma), p.at(beta), &mut rm, &mut rv, mode);
            *self.store.buffer_mut(mean) = rm;
            *self.store.buffer_mut(var) = rv;
            h = ops::relu(out?)?;
        }
        Ok(h)
    }

    /// Multi-head self-attention over encoder frames, then the output
    /// projection. Shape-preserving.
    pub fn decoder_forward<'t>(&self, p: &Bound<'t, S>, e: Var<'t, S>) -> Result<Var<'t, S>> {
        let q = ops::linear(e, p.at(self.idx.wq))?;
        let k = ops::linear(e, p.at(self.idx.wk))?;
        let v = ops::linear(e, p.at(self.idx.wv))?;
        let heads = ops::attention(q, k, v, self.config.heads, self.config.attention_divisor())?;
        ops::linear(heads, p.at(self.idx.wo))
    }

    /// Time-pooled class logits `[B, classes]`.
    pub fn logits<'t>(&self, p: &Bound<'t, S>, d: Var<'t, S>) -> Result<Var<'t, S>> {
        let pooled = ops::mean_time(d)?;
        ops::add_bias(ops::linear(pooled, p.at(self.idx.cls_w))?, p.at(self.idx.cls_b))
    }

    /// Class probabilities `[B, classes]`.
    pub fn classify<'t>(&self, p: &Bound<'t, S>, d: Var<'t, S>) -> Result<Var<'t, S>> {
        ops::softmax(self.logits(p, d)?)
    }

    /// `W2·ReLU(W1·e)` per frame: `[B,F,channels] → [B,F,teacher_dim]`.
    pub fn wvc_projection<'t>(&self, p: &Bound<'t, S>, e: Var<'t, S>) -> Result<Var<'t, S>> {
        let hidden = ops::relu(ops::linear(e, p.at(self.idx.w1))?)?;
        ops::linear(hidden, p.at(self.idx.w2))
    }

    /// `W4·ReLU(W3·d)` per frame: `[B,F,channels] → [B,F,siam_dim]`.
    pub fn siam_projection<'t>(&self, p: &Bound<'t, S>, d: Var<'t, S>) -> Result<Var<'t, S>> {
        let hidden = ops::relu(ops::linear(d, p.at(self.idx.w3))?)?;
        ops::linear(hidden, p.at(self.idx.w4))
    }

    /// Full classifier path in one call.
    pub fn forward<'t>(&mut self, p: &Bound<'t, S>, x: Var<'t, S>, mode: Mode) -> Result<Var<'t, S>> {
        let e = self.encoder_forward(p, x, mode)?;
        let d = self.decoder_forward(p, e)?;
        self.classify(p, d)
    }

    /// Eval-mode class probabilities for a feature batch `[B, frames, n_mels]`.
    pub fn predict(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.bind(&tape);
        let probs = self.forward(&p, tape.constant(x.clone()), Mode::Eval)?;
        let out = probs.value();
        Ok((*out).clone())
    }

    /// Learnable scalars of the deployed classifier (encoder, decoder and
    /// classifier; the projection heads are excluded).
    pub fn learnable_count(&self) -> usize {
        self.store.count(is_deployed)
    }

    /// Non-learnable BN running statistics.
    pub fn bn_statistics_count(&self) -> usize {
        self.store.buffers().map(|(_, t)| t.numel()).sum()
    }

    /// Total parameter count of the deployed classifier: learnable weights
    /// plus the BN running statistics stored with them.
    pub fn parameter_count(&self) -> usize {
        self.learnable_count() + self.bn_statistics_count()
    }

    /// Per-layer parameter table.
    pub fn describe(&self) -> Description {
        let mut rows = Vec::new();
        let group = |name: &str| -> String {
            let mut parts = name.split('.');
            match (parts.next(), parts.next()) {
                (Some("enc"), Some(i)) => format!("enc.{i}"),
                (Some(head), _) => head.to_owned(),
                _ => name.to_owned(),
            }
        };
        for p in self.store.iter() {
            let layer = group(&p.name);
            let kind = layer_kind(&layer, &self.config);
            match rows.last_mut() {
                Some(LayerRow { name, params, .. }) if *name == layer => *params += p.value.numel(),
                _ => rows.push(LayerRow {
                    name: layer,
                    kind,
                    params: p.value.numel(),
                    statistics: 0,
                    deployed: is_deployed(&p.name),
                }),
            }
        }
        for (name, t) in self.store.buffers() {
            let layer = group(name);
            if let Some(row) = rows.iter_mut().find(|r| r.name == layer) {
                row.statistics += t.numel();
            }
        }
        Description {
            rows,
            learnable: self.learnable_count(),
            statistics: self.bn_statistics_count(),
            total: self.parameter_count(),
            heads: self.store.count(|n| !is_deployed(n)),
        }
    }

    /// Writes parameters and BN statistics into `ckpt` under their names.
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        for p in self.store.iter() {
            ckpt.insert(&p.name, &p.value);
        }
        for (name, t) in self.store.buffers() {
            ckpt.insert(name, t);
        }
    }

    /// Restores every parameter and BN statistic; shapes must match.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<S>> {
            let t: Tensor<S> = ckpt
                .get(name)
                .ok_or_else(|| Error::NotFound(format!("checkpoint tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Format {
                    kind: "checkpoint",
                    detail: format!("`{name}` has shape {:?}, model expects {shape:?}", t.shape()),
                });
            }
            Ok(t)
        };
        for p in self.store.iter_mut() {
            p.value = fetch(&p.name, p.value.shape())?;
        }
        for (name, t) in self.store.buffers_mut() {
            *t = fetch(name, t.shape())?;
        }
        Ok(())
    }
}

/// Whether a parameter belongs to the deployed classifier.
pub fn is_deployed(name: &str) -> bool {
    !(name.starts_with(part::WVC_HEAD) || name.starts_with(part::SIAM_HEAD))
}

enum Init {
    Kaiming { fan_in: usize },
    Xavier { fan_in: usize, fan_out: usize },
    Const(f64),
}

fn init_kind(name: &str, shape: &[usize]) -> Init {
    if name.ends_with(".gamma") {
        Init::Const(1.0)
    } else if name.ends_with("bias") || name.ends_with(".beta") {
        Init::Const(0.0)
    } else if name.starts_with(part::ENCODER) {
        match shape {
            // [K, Cin, Cout]
            [k, cin, _] => Init::Kaiming { fan_in: k * cin },
            // depthwise [K, C]: each output sees K inputs
            [k, _] if name.contains(".dw.") => Init::Kaiming { fan_in: *k },
            // pointwise [Cin, Cout]
            [cin, _] => Init::Kaiming { fan_in: *cin },
            _ => Init::Const(0.0),
        }
    } else {
        Init::Xavier { fan_in: shape[0], fan_out: shape[shape.len() - 1] }
    }
}

fn layer_kind(layer: &str, cfg: &ModelConfig) -> String {
    let c = cfg.channels;
    match layer {
        "enc.0" => format!("conv1d k{} {}→{} /2 + BN", cfg.first_kernel, cfg.n_mels, c),
        l if l.starts_with("enc.") => format!("sep-conv1d k{} {c}→{c} + BN", cfg.kernel),
        "dec" => format!("attention {} heads, {c}×{c} ×4", cfg.heads),
        "cls" => format!("dense {c}→{} + softmax", cfg.classes),
        "wvc" => format!("wvc head {c}→{}→{}", cfg.wvc_hidden, cfg.teacher_dim),
        "siam" => format!("siam head {c}→{}→{}", cfg.siam_hidden, cfg.siam_dim),
        other => other.to_owned(),
    }
}

/// One row of [`Description`].
#[derive(Clone, Debug, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub params: usize,
    pub statistics: usize,
    /// False for the training-only projection heads.
    pub deployed: bool,
}

/// Layer table and parameter totals.
#[derive(Clone, Debug, Serialize)]
pub struct Description {
    pub rows: Vec<LayerRow>,
    /// Learnable scalars of the deployed classifier.
    pub learnable: usize,
    /// BN running statistics.
    pub statistics: usize,
    /// `learnable + statistics`: the reported model size.
    pub total: usize,
    /// Learnable scalars of the training-only projection heads.
    pub heads: usize,
}

impl fmt::Display for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:<32} {:>9} {:>7}", "layer", "type", "params", "stats")?;
        for r in self.rows.iter().filter(|r| r.deployed) {
            writeln!(f, "{:<8} {:<32} {:>9} {:>7}", r.name, r.kind, r.params, r.statistics)?;
        }
        writeln!(f, "{:-<59}", "")?;
        writeln!(f, "learnable parameters            {:>9}", self.learnable)?;
        writeln!(f, "batch-norm statistics           {:>9}", self.statistics)?;
        writeln!(f, "total parameters                {:>9}", self.total)?;
        writeln!(f)?;
        writeln!(f, "training-only projection heads:")?;
        for r in self.rows.iter().filter(|r| !r.deployed) {
            writeln!(f, "{:<8} {:<32} {:>9}", r.name, r.kind, r.params)?;
        }
        write!(f, "head parameters                 {:>9}", self.heads)
    }
}
