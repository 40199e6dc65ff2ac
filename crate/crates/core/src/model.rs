//! The full network: a 5×5 stem unit, a chain of intensive blocks, a
//! trailing dense block, dropout, and a valid-convolution readout.
//!
//! The readout spans the whole remaining map for classification, giving
//! `(n,1,1,K)` logits, and the full remaining height for sequences, giving
//! `(n,1,W',A+1)` frame logits.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::stream_rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{
    dense_block_forward, intensive_block_forward, transition_conv, BlockConfig, DenseBlockParams,
    IntensiveBlockParams,
};
use crate::ctc::{argmax, greedy_decode, FrameProbs, LabelSequence};
use crate::error::{Error, Result};
use crate::layers::{
    apply_buffer_updates, conv2d, conv_unit, dropout, softmax_forward, ConvKind, ConvParams,
    ConvUnitParams, ConvWeights, DropoutConfig, ForwardCtx,
};
use crate::params::{join, ParamKind, Parameterized};
use crate::tensor::{Padding, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Task {
    Classify {
        classes: usize,
    },
    /// Labels `1..=alphabet`, blank 0.
    Sequence {
        alphabet: usize,
    },
}

impl Task {
    /// Channels emitted by the readout.
    pub fn outputs(&self) -> usize {
        match *self {
            Task::Classify { classes } => classes,
            Task::Sequence { alphabet } => alphabet + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Intensive blocks.
    #[default]
    Intensive,
    /// Plain dense block + transition per stage.
    Dense,
}

fn default_stem() -> usize {
    16
}
fn default_stages() -> usize {
    2
}
fn default_dense_per_fusion() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub input: InputShape,
    #[serde(default = "default_stem")]
    pub stem_channels: usize,
    /// Stride of the 5×5 stem conv in both directions: 1 or 2.
    pub first_conv_stride: usize,
    #[serde(default)]
    pub blocks: BlockConfig,
    #[serde(default = "default_stages")]
    pub intensive_blocks: usize,
    #[serde(default = "default_dense_per_fusion")]
    pub dense_per_fusion: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub backbone: Backbone,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn mnist() -> Self {
        ModelConfig {
            task: Task::Classify { classes: 10 },
            input: InputShape {
                height: 28,
                width: 28,
                channels: 1,
            },
            stem_channels: default_stem(),
            first_conv_stride: 1,
            blocks: BlockConfig::default(),
            intensive_blocks: default_stages(),
            dense_per_fusion: default_dense_per_fusion(),
            dropout: default_dropout(),
            backbone: Backbone::Intensive,
            seed: 0,
        }
    }

    /// 32-row digit lines of the given width.
    pub fn digitlines(width: usize) -> Self {
        ModelConfig {
            task: Task::Sequence { alphabet: 10 },
            input: InputShape {
                height: 32,
                width,
                channels: 1,
            },
            first_conv_stride: 2,
            ..ModelConfig::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks.validate()?;
        DropoutConfig::new(self.dropout)?;
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        if height < 4 || width < 4 {
            return Err(Error::Config(format!(
                "input {height}x{width} is too small for two halvings (need at least 4x4)"
            )));
        }
        if channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config(
                "input and stem channels must be at least 1".into(),
            ));
        }
        if !matches!(self.first_conv_stride, 1 | 2) {
            return Err(Error::Config(format!(
                "first conv stride must be 1 or 2, got {}",
                self.first_conv_stride
            )));
        }
        if self.intensive_blocks == 0 || self.dense_per_fusion == 0 {
            return Err(Error::Config(
                "need at least one block stage and one dense block per fusion".into(),
            ));
        }
        match self.task {
            Task::Classify { classes } if classes < 2 => Err(Error::Config(format!(
                "classification needs at least 2 classes, got {classes}"
            ))),
            Task::Sequence { alphabet: 0 } => {
                Err(Error::Config("alphabet must be non-empty".into()))
            }
            _ => Ok(()),
        }
    }

    /// Spatial extent of the map entering the readout.
    pub fn feature_size(&self) -> (usize, usize) {
        let halve = |v: usize, s: usize| v.div_ceil(s);
        let mut h = halve(self.input.height, self.first_conv_stride);
        let mut w = halve(self.input.width, self.first_conv_stride);
        for _ in 0..self.intensive_blocks {
            h = halve(h, 2);
            w = halve(w, 2);
        }
        (h, w)
    }

    /// Frames emitted per line by the sequence readout.
    pub fn frame_count(&self) -> usize {
        self.feature_size().1
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn input_shape(&self, n: usize) -> Result<Shape> {
        Shape::new(n, self.input.height, self.input.width, self.input.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Stage {
    Intensive(IntensiveBlockParams),
    Dense {
        dense: DenseBlockParams,
        transition: ConvUnitParams,
    },
}

impl Stage {
    fn out_channels(&self) -> usize {
        match self {
            Stage::Intensive(b) => b.out_channels(),
            Stage::Dense { transition, .. } => transition.c_out(),
        }
    }
}

impl Parameterized for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            Stage::Intensive(b) => b.visit(prefix, f),
            Stage::Dense { dense, transition } => {
                dense.visit(&join(prefix, "dense1"), f);
                transition.visit(&join(prefix, "transition"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            Stage::Intensive(b) => b.visit_mut(prefix, f),
            Stage::Dense { dense, transition } => {
                dense.visit_mut(&join(prefix, "dense1"), f);
                transition.visit_mut(&join(prefix, "transition"), f);
            }
        }
    }
}

/// Paths: `conv1`, `block{i}`, `dense5`, `head`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1: ConvUnitParams,
    pub blocks: Vec<Stage>,
    pub dense5: DenseBlockParams,
    pub head: ConvParams,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, "init", 0);
        let s = cfg.first_conv_stride;
        let conv1 = ConvUnitParams::init(
            cfg.blocks.conv_kind,
            (5, 5),
            cfg.input.channels,
            cfg.stem_channels,
            (s, s),
            &mut rng,
        )?;
        let mut width = cfg.stem_channels;
        let mut blocks = Vec::with_capacity(cfg.intensive_blocks);
        for _ in 0..cfg.intensive_blocks {
            let stage = match cfg.backbone {
                Backbone::Intensive => Stage::Intensive(IntensiveBlockParams::init(
                    width,
                    &cfg.blocks,
                    cfg.dense_per_fusion,
                    &mut rng,
                )?),
                Backbone::Dense => {
                    let dense = DenseBlockParams::init(width, &cfg.blocks, &mut rng)?;
                    let out = cfg.blocks.compress(dense.out_channels())?;
                    let transition = ConvUnitParams::init(
                        cfg.blocks.conv_kind,
                        (3, 3),
                        dense.out_channels(),
                        out,
                        (2, 2),
                        &mut rng,
                    )?;
                    Stage::Dense { dense, transition }
                }
            };
            width = stage.out_channels();
            blocks.push(stage);
        }
        let dense5 = DenseBlockParams::init(width, &cfg.blocks, &mut rng)?;
        let (h, w) = cfg.feature_size();
        let kernel = match cfg.task {
            Task::Classify { .. } => (h, w),
            Task::Sequence { .. } => (h, 1),
        };
        let head = ConvParams::init(
            ConvKind::Standard,
            kernel,
            dense5.out_channels(),
            cfg.task.outputs(),
            (1, 1),
            Padding::Valid,
            &mut rng,
        )?;
        Ok(ModelParams {
            conv1,
            blocks,
            dense5,
            head,
        })
    }
}

impl Parameterized for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i + 1)), f);
        }
        self.dense5.visit(&join(prefix, "dense5"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i + 1)), f);
        }
        self.dense5.visit_mut(&join(prefix, "dense5"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Records the network on `tape` and returns the readout logits.
pub fn forward(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x: Var,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    let xs = tape.value(x).shape();
    if (xs.h, xs.w, xs.c) != (cfg.input.height, cfg.input.width, cfg.input.channels) {
        return Err(Error::Dimension(format!(
            "model expects {}x{}x{} inputs, got {xs}",
            cfg.input.height, cfg.input.width, cfg.input.channels
        )));
    }
    let mut h = conv_unit(tape, ctx, &[x], &params.conv1, "conv1")?;
    for (i, stage) in params.blocks.iter().enumerate() {
        let path = format!("block{}", i + 1);
        h = match stage {
            Stage::Intensive(b) => intensive_block_forward(tape, ctx, h, b, &path)?,
            Stage::Dense { dense, transition } => {
                let d = dense_block_forward(tape, ctx, h, dense, &join(&path, "dense1"))?;
                transition_conv(tape, ctx, d, transition, &join(&path, "transition"))?
            }
        };
    }
    let h = dense_block_forward(tape, ctx, h, &params.dense5, "dense5")?;
    let h = dropout(tape, ctx, h, DropoutConfig::new(cfg.dropout)?)?;
    readout(tape, h, &params.head)
}

fn readout(tape: &mut Tape, x: Var, head: &ConvParams) -> Result<Var> {
    let ConvWeights::Standard { kernel } = &head.weights else {
        return Err(Error::Contract(
            "readout must be a standard convolution".into(),
        ));
    };
    let k = tape.param("head.kernel", kernel.clone());
    let b = tape.param("head.bias", head.bias.clone());
    let z = conv2d(tape, x, k, head.stride, head.padding)?;
    tape.add(z, b)
}

/// Parameters plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Model { config, params })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        forward(tape, ctx, x, &self.params, &self.config)
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.forward(&mut tape, &mut ForwardCtx::eval(), xv)?;
        Ok(tape.value(z).clone())
    }

    /// Argmax of the class posterior; ties go to the lowest index.
    pub fn predict_classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let Task::Classify { .. } = self.config.task else {
            return Err(Error::Config(
                "classification prediction needs a classify model".into(),
            ));
        };
        Ok(classify_from_logits(&self.logits(x)?))
    }

    /// Greedy CTC decode of each sample's frame posteriors.
    pub fn predict_sequence(&self, x: &Tensor) -> Result<Vec<LabelSequence>> {
        let Task::Sequence { .. } = self.config.task else {
            return Err(Error::Config(
                "sequence prediction needs a sequence model".into(),
            ));
        };
        decode_from_logits(&self.logits(x)?)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }

    /// Replaces every batch-norm running statistic with the statistics of
    /// batch `x`, so eval mode reproduces train-mode normalisation on it.
    pub fn calibrate_batch_norm(&mut self, x: &Tensor) -> Result<()> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::calibrate();
        self.forward(&mut tape, &mut ctx, xv)?;
        apply_buffer_updates(&mut self.params, ctx.take_updates())
    }
}

impl Parameterized for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.params.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.params.visit_mut(prefix, f)
    }
}

/// Per-sample argmax over softmax of `(n,1,1,K)` logits.
pub fn classify_from_logits(logits: &Tensor) -> Vec<usize> {
    let probs = softmax_forward(logits);
    let k = probs.shape().c;
    probs.data().chunks_exact(k).map(argmax).collect()
}

/// Per-sample greedy decode of `(n,1,T,A+1)` logits.
pub fn decode_from_logits(logits: &Tensor) -> Result<Vec<LabelSequence>> {
    let s = logits.shape();
    let probs = softmax_forward(logits);
    probs
        .data()
        .chunks_exact(s.h * s.w * s.c)
        .map(|sample| {
            Ok(greedy_decode(&FrameProbs::new(
                s.h * s.w,
                s.c,
                sample.to_vec(),
            )?))
        })
        .collect()
}
