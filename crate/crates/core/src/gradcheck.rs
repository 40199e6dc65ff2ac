//! Finite-difference gradient checks over every layer, block and the full
//! model, as a runnable suite.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{finite_difference_check, BackwardOp, Tape, Var};
use crate::blocks::{
    dense_block_forward, intensive_block_forward, transition_conv, BlockConfig, DenseBlockParams,
    IntensiveBlockParams,
};
use crate::ctc::{ctc_loss_batch, LabelSequence};
use crate::error::{Error, Result};
use crate::layers::{
    batch_norm, conv2d, conv_unit, cross_entropy, depthwise_conv, dropout, pointwise_conv, relu,
    softmax, BatchNormParams, ConvKind, ConvUnitParams, DropoutConfig, ForwardCtx,
};
use crate::model::{forward, Backbone, InputShape, Model, ModelConfig, Task};
use crate::params::{join, ParamKind, ParamMap, Parameterized};
use crate::rng::stream_rng;
use crate::tensor::{Padding, Shape, Tensor};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;
/// A component passes when its worst relative error is below this.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSize {
    Tiny,
    Small,
}

impl FromStr for SuiteSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(SuiteSize::Tiny),
            "small" => Ok(SuiteSize::Small),
            other => Err(Error::Config(format!(
                "unknown suite size {other:?}; expected tiny or small"
            ))),
        }
    }
}

impl fmt::Display for SuiteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuiteSize::Tiny => "tiny",
            SuiteSize::Small => "small",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Identity whose backward rule scales the gradient, for negative controls.
struct Corrupt;

impl BackwardOp for Corrupt {
    fn name(&self) -> &'static str {
        "corrupt"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![wanted[0].then(|| grad.map(|g| 1.01 * g))]
    }
}

/// An input tensor checked alongside a parameterized network.
#[derive(Debug, Clone)]
struct Probe<P> {
    input: Tensor,
    net: P,
}

impl<P: Parameterized> Parameterized for Probe<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "input"), &self.input, ParamKind::Kernel);
        self.net.visit(&join(prefix, "net"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "input"), &mut self.input, ParamKind::Kernel);
        self.net.visit_mut(&join(prefix, "net"), f);
    }
}

impl Parameterized for () {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Tensor, ParamKind)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {}
}

struct Suite {
    rng: ChaCha8Rng,
    corrupt: bool,
    results: Vec<ComponentResult>,
}

impl Suite {
    /// Uniform in `[-1, 1]`, kept away from ReLU's kink.
    fn random(&mut self, dims: [usize; 4]) -> Tensor {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).expect("suite shape");
        Tensor::from_fn(shape, |_| {
            let v: f64 = self.rng.random_range(-1.0..1.0);
            if v.abs() < 0.01 {
                v.signum() * 0.01 + v
            } else {
                v
            }
        })
    }

    fn record(&mut self, component: impl Into<String>, err: Result<f64>) -> Result<()> {
        let err = err?;
        self.results.push(ComponentResult {
            component: component.into(),
            max_rel_error: err,
            pass: err < FD_TOLERANCE,
        });
        Ok(())
    }

    /// Checks `f(input)` projected onto random weights, over both the input
    /// and the parameters of `net`.
    fn check_net<P, F>(&mut self, name: &str, input: Tensor, net: P, mut f: F) -> Result<()>
    where
        P: Parameterized + Clone,
        F: FnMut(&mut Tape, Var, &P) -> Result<Var>,
    {
        let probe = Probe { input, net };
        let out_dims = {
            let mut tape = Tape::new();
            let x = tape.param("input", probe.input.clone());
            let y = f(&mut tape, x, &probe.net)?;
            tape.value(y).shape().to_array()
        };
        let w = self.random(out_dims);
        let corrupt = self.corrupt;
        let err = finite_difference_check(&probe, FD_EPSILON, |tape, p| {
            let x = tape.param("input", p.input.clone());
            let y = f(tape, x, &p.net)?;
            let y = if corrupt {
                let v = tape.value(y).clone();
                tape.record(v, &[y], Corrupt)
            } else {
                y
            };
            tape.weighted_sum(y, w.clone())
        });
        self.record(name, err)
    }
}

struct Dims {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
}

/// Runs the suite; with `corrupt`, every component's loss passes through a
/// deliberately wrong backward rule and the suite must fail.
pub fn run_suite(size: SuiteSize, corrupt: bool) -> Result<Vec<ComponentResult>> {
    let mut s = Suite {
        rng: stream_rng(0, "gradcheck", 0),
        corrupt,
        results: Vec::new(),
    };
    let d = match size {
        SuiteSize::Tiny => Dims {
            n: 2,
            h: 4,
            w: 5,
            c: 2,
        },
        SuiteSize::Small => Dims {
            n: 2,
            h: 6,
            w: 7,
            c: 3,
        },
    };
    let x = s.random([d.n, d.h, d.w, d.c]);
    let c_out = d.c + 1;

    s.check_net("relu", x.clone(), (), |tape, x, _| Ok(relu(tape, x)))?;

    for (stride, padding) in [
        ((1, 1), Padding::Same),
        ((2, 2), Padding::Same),
        ((1, 2), Padding::Valid),
    ] {
        let mut k = ParamMap::new();
        k.insert("kernel", s.random([3, 3, d.c, c_out]), ParamKind::Kernel);
        s.check_net(
            &format!("conv2d stride {stride:?} {padding:?}"),
            x.clone(),
            k,
            |tape, x, p| {
                let kv = tape.param("net.kernel", p.get("kernel").expect("kernel").clone());
                conv2d(tape, x, kv, stride, padding)
            },
        )?;
        let mut k = ParamMap::new();
        k.insert("kernel", s.random([3, 3, d.c, 1]), ParamKind::Kernel);
        s.check_net(
            &format!("depthwise stride {stride:?} {padding:?}"),
            x.clone(),
            k,
            |tape, x, p| {
                let kv = tape.param("net.kernel", p.get("kernel").expect("kernel").clone());
                depthwise_conv(tape, x, kv, stride, padding)
            },
        )?;
    }

    let mut k = ParamMap::new();
    k.insert("kernel", s.random([1, 1, d.c, c_out]), ParamKind::Kernel);
    s.check_net("pointwise", x.clone(), k, |tape, x, p| {
        let kv = tape.param("net.kernel", p.get("kernel").expect("kernel").clone());
        pointwise_conv(tape, x, kv)
    })?;

    let mut bn = BatchNormParams::new(d.c)?;
    bn.gamma = s.random([1, 1, 1, d.c]);
    bn.beta = s.random([1, 1, 1, d.c]);
    bn.running_var = bn.running_var.map(|v| v + 0.5);
    for (label, train) in [
        ("batch norm (batch statistics)", true),
        ("batch norm (running statistics)", false),
    ] {
        s.check_net(label, x.clone(), bn.clone(), |tape, x, p| {
            let g = tape.param("net.gamma", p.gamma.clone());
            let b = tape.param("net.beta", p.beta.clone());
            let mut ctx = if train {
                ForwardCtx::train(stream_rng(0, "gradcheck-dropout", 0))
            } else {
                ForwardCtx::eval()
            };
            batch_norm(tape, &mut ctx, x, g, b, p, "net")
        })?;
    }

    s.check_net("dropout (fixed mask)", x.clone(), (), |tape, x, _| {
        let mut ctx = ForwardCtx::train(stream_rng(0, "gradcheck-dropout", 1));
        dropout(tape, &mut ctx, x, DropoutConfig::new(0.3)?)
    })?;

    let classes = 4;
    let logits = s.random([d.n, 1, 1, classes]).map(|v| 3.0 * v);
    s.check_net("softmax", logits.clone(), (), |tape, z, _| {
        Ok(softmax(tape, z))
    })?;
    let labels: Vec<usize> = (0..d.n).map(|i| (i * 3 + 1) % classes).collect();
    let probe = Probe {
        input: logits,
        net: (),
    };
    let err = finite_difference_check(&probe, FD_EPSILON, |tape, p| {
        let z = tape.param("input", p.input.clone());
        let loss = cross_entropy(tape, z, &labels)?;
        corrupt_scalar(tape, loss, corrupt)
    });
    s.record("cross entropy", err)?;

    // Batch-statistic BN zeroes the gradient of any bias feeding it, which
    // leaves only roundoff for the relative error to measure; composite
    // checks therefore normalize with running statistics.
    for kind in [ConvKind::Standard, ConvKind::Separable] {
        for stride in [(1, 1), (2, 2)] {
            let unit = ConvUnitParams::init(kind, (3, 3), d.c, c_out, stride, &mut s.rng)?;
            s.check_net(
                &format!("conv unit {kind:?} stride {stride:?}"),
                x.clone(),
                unit,
                |tape, x, p| conv_unit(tape, &mut ForwardCtx::eval(), &[x], p, "net"),
            )?;
        }
    }

    let block_cfg = BlockConfig {
        growth_rate: 2,
        layer_count: 2,
        compression: 0.5,
        conv_kind: ConvKind::Separable,
    };
    let dense = DenseBlockParams::init(d.c, &block_cfg, &mut s.rng)?;
    s.check_net("dense block", x.clone(), dense, |tape, x, p| {
        dense_block_forward(tape, &mut ForwardCtx::eval(), x, p, "net")
    })?;
    let transition =
        ConvUnitParams::init(ConvKind::Separable, (3, 3), d.c, d.c, (2, 2), &mut s.rng)?;
    s.check_net("transition conv", x.clone(), transition, |tape, x, p| {
        transition_conv(tape, &mut ForwardCtx::eval(), x, p, "net")
    })?;
    let intensive = IntensiveBlockParams::init(d.c, &block_cfg, 2, &mut s.rng)?;
    s.check_net("intensive block", x.clone(), intensive, |tape, x, p| {
        intensive_block_forward(tape, &mut ForwardCtx::eval(), x, p, "net")
    })?;

    let frames = 6;
    let alphabet = 3;
    let logits = s.random([d.n, 1, frames, alphabet + 1]).map(|v| 2.0 * v);
    let targets: Vec<LabelSequence> = (0..d.n)
        .map(|i| LabelSequence::new(vec![1 + i % alphabet, 1 + (i + 1) % alphabet]))
        .collect::<Result<_>>()?;
    let probe = Probe {
        input: logits,
        net: (),
    };
    let err = finite_difference_check(&probe, FD_EPSILON, |tape, p| {
        let z = tape.param("input", p.input.clone());
        let loss = ctc_loss_batch(tape, z, &targets)?;
        corrupt_scalar(tape, loss, corrupt)
    });
    s.record("ctc logits", err)?;

    for task in [
        Task::Classify { classes: 3 },
        Task::Sequence { alphabet: 2 },
    ] {
        let cfg = miniature(size, task);
        let mut model = Model::new(cfg.clone())?;
        let shape = cfg.input_shape(2)?.to_array();
        let x = s.random(shape).map(|v| 0.5 + 0.5 * v);
        // Evaluation-mode BN with statistics of this very batch keeps the
        // normalized activations O(1), so the check is not lost in roundoff.
        model.calibrate_batch_norm(&x)?;
        let project = s.random(model.logits(&x)?.shape().to_array());
        let label = match task {
            Task::Classify { .. } => "full model (classify)",
            Task::Sequence { .. } => "full model (sequence, ctc)",
        };
        let err = finite_difference_check(&model.params, FD_EPSILON, |tape, p| {
            let xv = tape.constant(x.clone());
            let z = forward(tape, &mut ForwardCtx::eval(), xv, p, &cfg)?;
            let z = if corrupt {
                let v = tape.value(z).clone();
                tape.record(v, &[z], Corrupt)
            } else {
                z
            };
            match task {
                Task::Classify { .. } => tape.weighted_sum(z, project.clone()),
                Task::Sequence { .. } => {
                    let targets = [
                        LabelSequence::new(vec![1, 2])?,
                        LabelSequence::new(vec![2])?,
                    ];
                    ctc_loss_batch(tape, z, &targets)
                }
            }
        });
        s.record(label, err)?;
    }
    Ok(s.results)
}

fn corrupt_scalar(tape: &mut Tape, loss: Var, corrupt: bool) -> Result<Var> {
    if corrupt {
        let v = tape.value(loss).clone();
        Ok(tape.record(v, &[loss], Corrupt))
    } else {
        Ok(loss)
    }
}

/// Smallest model exercising every stage type.
pub fn miniature(size: SuiteSize, task: Task) -> ModelConfig {
    let (height, width) = match (size, task) {
        (SuiteSize::Tiny, Task::Classify { .. }) => (6, 6),
        (SuiteSize::Tiny, Task::Sequence { .. }) => (6, 12),
        (SuiteSize::Small, Task::Classify { .. }) => (8, 8),
        (SuiteSize::Small, Task::Sequence { .. }) => (8, 16),
    };
    ModelConfig {
        task,
        input: InputShape {
            height,
            width,
            channels: 1,
        },
        stem_channels: 4,
        first_conv_stride: 1,
        blocks: BlockConfig {
            growth_rate: 2,
            layer_count: 2,
            compression: 0.5,
            conv_kind: ConvKind::Separable,
        },
        intensive_blocks: 2,
        dense_per_fusion: 2,
        dropout: 0.2,
        backbone: Backbone::Intensive,
        seed: 5,
    }
}
