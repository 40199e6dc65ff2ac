//! Dense blocks, the intensive block built on them, and the stride-2
//! transition convolution.
//!
//! Channel bookkeeping for one intensive block with input width `c0`:
//!
//! ```text
//! fd1 = dense1(x)                 c0 + c·g
//! fd2 = dense2(fd1)               c0 + 2·c·g
//! fc1 = fusion1(fd2)              ⌊θ·|fd2|⌋
//! fc2 = [fc1, fd1]                |fc1| + |fd1|
//! fc3 = fusion2(fc2)              ⌊θ·|fc2|⌋
//! fc4 = [fc3, x]                  |fc3| + c0
//! out = transition(fc4)           ⌊θ·|fc4|⌋, spatial ⌈h/2⌉×⌈w/2⌉
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{conv_unit, ConvKind, ConvUnitParams, ForwardCtx};
use crate::params::{join, ParamKind, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Channels contributed by each dense layer (g).
    pub growth_rate: usize,
    /// Dense layers per dense block (c).
    pub layer_count: usize,
    /// Fraction of channels kept by fusion and transition convs (θ).
    pub compression: f64,
    pub conv_kind: ConvKind,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            growth_rate: 8,
            layer_count: 8,
            compression: 0.5,
            conv_kind: ConvKind::Separable,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.growth_rate == 0 || self.layer_count == 0 {
            return Err(Error::Config(
                "growth rate and layer count must be at least 1".into(),
            ));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression {} outside (0, 1]",
                self.compression
            )));
        }
        Ok(())
    }

    /// `⌊θ·channels⌋`, rejecting widths that compress to nothing.
    pub fn compress(&self, channels: usize) -> Result<usize> {
        let out = (self.compression * channels as f64 + 1e-9).floor() as usize;
        if out == 0 {
            return Err(Error::Config(format!(
                "compression {} leaves no channels out of {channels}",
                self.compression
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlockParams {
    pub layers: Vec<ConvUnitParams>,
    in_channels: usize,
    growth_rate: usize,
}

impl DenseBlockParams {
    pub fn init(in_channels: usize, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layer_count)
            .map(|i| {
                ConvUnitParams::init(
                    cfg.conv_kind,
                    (3, 3),
                    in_channels + i * cfg.growth_rate,
                    cfg.growth_rate,
                    (1, 1),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(DenseBlockParams {
            layers,
            in_channels,
            growth_rate: cfg.growth_rate,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth_rate
    }
}

impl Parameterized for DenseBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{}", i + 1)), f);
        }
    }
}

/// Layer `i` reads `[x, out₁, …, out_{i−1}]`; the block returns
/// `[x, out₁, …, out_c]`.
pub fn dense_block_forward(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x: Var,
    p: &DenseBlockParams,
    path: &str,
) -> Result<Var> {
    let xs = tape.value(x).shape();
    if xs.c != p.in_channels {
        return Err(Error::Dimension(format!(
            "{path}: dense block expects {} channels, input has shape {xs}",
            p.in_channels
        )));
    }
    let mut features = vec![x];
    for (i, layer) in p.layers.iter().enumerate() {
        let out = conv_unit(
            tape,
            ctx,
            &features,
            layer,
            &join(path, &format!("layer{}", i + 1)),
        )?;
        features.push(out);
    }
    tape.concat_channels(&features)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensiveBlockParams {
    /// Chained dense blocks of the dense fusion block (two by default).
    pub dense: Vec<DenseBlockParams>,
    pub fusion1: ConvUnitParams,
    pub fusion2: ConvUnitParams,
    pub transition: ConvUnitParams,
}

/// Channel widths along one intensive block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelTrace {
    pub input: usize,
    pub fd1: usize,
    pub fd_last: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub fc3: usize,
    pub fc4: usize,
    pub output: usize,
}

impl IntensiveBlockParams {
    pub fn init(
        in_channels: usize,
        cfg: &BlockConfig,
        dense_blocks: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dense_blocks == 0 {
            return Err(Error::Config(
                "a dense fusion block needs at least one dense block".into(),
            ));
        }
        let mut dense = Vec::with_capacity(dense_blocks);
        let mut width = in_channels;
        for _ in 0..dense_blocks {
            let block = DenseBlockParams::init(width, cfg, rng)?;
            width = block.out_channels();
            dense.push(block);
        }
        let fd1 = dense[0].out_channels();
        let fc1 = cfg.compress(width)?;
        let fusion1 = ConvUnitParams::init(cfg.conv_kind, (3, 3), width, fc1, (1, 1), rng)?;
        let fc2 = fc1 + fd1;
        let fc3 = cfg.compress(fc2)?;
        let fusion2 = ConvUnitParams::init(cfg.conv_kind, (3, 3), fc2, fc3, (1, 1), rng)?;
        let fc4 = fc3 + in_channels;
        let transition =
            ConvUnitParams::init(cfg.conv_kind, (3, 3), fc4, cfg.compress(fc4)?, (2, 2), rng)?;
        Ok(IntensiveBlockParams {
            dense,
            fusion1,
            fusion2,
            transition,
        })
    }

    pub fn channel_trace(&self) -> ChannelTrace {
        let fd1 = self.dense[0].out_channels();
        let fc1 = self.fusion1.c_out();
        let fc3 = self.fusion2.c_out();
        let input = self.dense[0].in_channels();
        ChannelTrace {
            input,
            fd1,
            fd_last: self.dense.last().expect("non-empty").out_channels(),
            fc1,
            fc2: fc1 + fd1,
            fc3,
            fc4: fc3 + input,
            output: self.transition.c_out(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.transition.c_out()
    }
}

impl Parameterized for IntensiveBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, d) in self.dense.iter().enumerate() {
            d.visit(&join(prefix, &format!("dense{}", i + 1)), f);
        }
        self.fusion1.visit(&join(prefix, "fusion1"), f);
        self.fusion2.visit(&join(prefix, "fusion2"), f);
        self.transition.visit(&join(prefix, "transition"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, d) in self.dense.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("dense{}", i + 1)), f);
        }
        self.fusion1.visit_mut(&join(prefix, "fusion1"), f);
        self.fusion2.visit_mut(&join(prefix, "fusion2"), f);
        self.transition.visit_mut(&join(prefix, "transition"), f);
    }
}

/// Runs the chained dense blocks, then the first fusion conv.
/// Returns `(fd1, fc1)`.
pub fn dense_fusion_block(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x: Var,
    p: &IntensiveBlockParams,
    path: &str,
) -> Result<(Var, Var)> {
    let fd1 = dense_block_forward(tape, ctx, x, &p.dense[0], &join(path, "dense1"))?;
    let mut fd = fd1;
    for (i, block) in p.dense.iter().enumerate().skip(1) {
        fd = dense_block_forward(
            tape,
            ctx,
            fd,
            block,
            &join(path, &format!("dense{}", i + 1)),
        )?;
    }
    let fc1 = conv_unit(tape, ctx, &[fd], &p.fusion1, &join(path, "fusion1"))?;
    Ok((fd1, fc1))
}

/// Every intermediate of one intensive block.
#[derive(Debug, Clone, Copy)]
pub struct IntensiveTrace {
    pub fd1: Var,
    pub fc1: Var,
    pub fc2: Var,
    pub fc3: Var,
    pub fc4: Var,
    pub output: Var,
}

pub fn intensive_block_forward(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x: Var,
    p: &IntensiveBlockParams,
    path: &str,
) -> Result<Var> {
    Ok(intensive_block_traced(tape, ctx, x, p, path)?.output)
}

pub fn intensive_block_traced(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x: Var,
    p: &IntensiveBlockParams,
    path: &str,
) -> Result<IntensiveTrace> {
    let (fd1, fc1) = dense_fusion_block(tape, ctx, x, p, path)?;
    let fc2 = tape.concat_channels(&[fc1, fd1])?;
    let fc3 = conv_unit(tape, ctx, &[fc2], &p.fusion2, &join(path, "fusion2"))?;
    let fc4 = tape.concat_channels(&[fc3, x])?;
    let output = transition_conv(tape, ctx, fc4, &p.transition, &join(path, "transition"))?;
    Ok(IntensiveTrace {
        fd1,
        fc1,
        fc2,
        fc3,
        fc4,
        output,
    })
}

/// Learnable stride-2 downsampling unit.
pub fn transition_conv(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x: Var,
    p: &ConvUnitParams,
    path: &str,
) -> Result<Var> {
    if p.conv.stride != (2, 2) {
        return Err(Error::Config(format!(
            "{path}: transition conv needs stride (2, 2), got {:?}",
            p.conv.stride
        )));
    }
    conv_unit(tape, ctx, &[x], p, path)
}
