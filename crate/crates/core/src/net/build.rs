use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Linear, Projection};
use super::{Block, BlockKind, Layer, Network, Skip};
use crate::error::{Error, Result};
use crate::spectrum::target_sigma;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Plain,
    Resnet,
    Procresnet,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Plain => "plain",
            Architecture::Resnet => "resnet",
            Architecture::Procresnet => "procresnet",
        }
    }
}

fn default_expansion() -> usize {
    4
}

fn default_input_channels() -> usize {
    3
}

fn default_proc_kernel() -> usize {
    3
}

/// Three-stage pre-activation bottleneck network. `depth` is the block
/// count `L`; each stage holds `L/3` blocks and its first block is a
/// transition. Stage `s` has bottleneck width `widths[s]` and output width
/// `expansion * widths[s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub architecture: Architecture,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub input_size: usize,
    pub classes: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Kernel size of the conv* layers.
    #[serde(default = "default_proc_kernel")]
    pub proc_kernel: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth < 3 || self.depth % 3 != 0 {
            return fail(format!(
                "depth {} must be a positive multiple of 3 (three stages)",
                self.depth
            ));
        }
        if self.widths.len() != 3 || self.widths.contains(&0) {
            return fail(format!("widths {:?} must be three positive values", self.widths));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_channels == 0 || self.expansion == 0 {
            return fail("input channels and expansion must be positive".into());
        }
        if self.proc_kernel == 0 || self.proc_kernel % 2 == 0 {
            return fail(format!("conv* kernel size {} must be odd", self.proc_kernel));
        }
        if self.input_size < 4 {
            return fail(format!(
                "input size {} too small for two stride-2 stages",
                self.input_size
            ));
        }
        // the last conv* runs at input_size / 2 and needs n >= k there
        if self.architecture == Architecture::Procresnet
            && self.input_size.div_ceil(2) < self.proc_kernel
        {
            return fail(format!(
                "input size {} too small for {}x{} conv* layers",
                self.input_size, self.proc_kernel, self.proc_kernel
            ));
        }
        Ok(())
    }

    pub fn stage_outputs(&self) -> [usize; 3] {
        [0, 1, 2].map(|s| self.expansion * self.widths[s])
    }
}

fn bn_relu_conv(
    layers: &mut Vec<Layer>,
    k: usize,
    input: usize,
    output: usize,
    stride: usize,
    rng: &mut Rng,
) {
    layers.push(Layer::BatchNorm(BatchNorm2d::new(input)));
    layers.push(Layer::Relu);
    layers.push(Layer::Conv(Conv2d::he(k, output, input, stride, rng)));
}

fn bottleneck(input: usize, mid: usize, output: usize, stride: usize, rng: &mut Rng) -> Vec<Layer> {
    let mut layers = Vec::with_capacity(9);
    bn_relu_conv(&mut layers, 1, input, mid, 1, rng);
    bn_relu_conv(&mut layers, 3, mid, mid, stride, rng);
    bn_relu_conv(&mut layers, 1, mid, output, 1, rng);
    layers
}

/// A conv* layer: He-initialized, then projected so its circular operator
/// at feature size `n` has every nonzero singular value equal to `sigma`.
pub(crate) fn conv_star(
    k: usize,
    output: usize,
    input: usize,
    stride: usize,
    n: usize,
    relu: bool,
    rng: &mut Rng,
) -> Result<Conv2d> {
    let mut conv = Conv2d::he(k, output, input, stride, rng);
    conv.projection = Some(Projection {
        n,
        sigma: target_sigma(output, input, relu),
    });
    conv.project()?;
    Ok(conv)
}

pub fn build_network(spec: &ArchSpec, rng: &mut Rng) -> Result<Network> {
    spec.validate()?;
    let outs = spec.stage_outputs();
    let per_stage = spec.depth / 3;
    let mut head = Vec::new();
    let mut channels = spec.input_channels;
    if spec.architecture != Architecture::Procresnet {
        head.push(Layer::Conv(Conv2d::he(3, spec.widths[0], channels, 1, rng)));
        channels = spec.widths[0];
    }
    let mut extent = spec.input_size;
    let mut blocks = Vec::with_capacity(spec.depth);
    for stage in 0..3 {
        let stride = if stage == 0 { 1 } else { 2 };
        let (mid, out) = (spec.widths[stage], outs[stage]);
        for i in 0..per_stage {
            let block = match (spec.architecture, i == 0) {
                (Architecture::Plain, first) => Block {
                    kind: BlockKind::Plain,
                    entry: vec![],
                    branch: bottleneck(
                        if first { channels } else { out },
                        mid,
                        out,
                        if first { stride } else { 1 },
                        rng,
                    ),
                    skip: Skip::None,
                },
                (Architecture::Resnet, true) => Block {
                    kind: BlockKind::TransitionOriginal,
                    entry: vec![],
                    branch: bottleneck(channels, mid, out, stride, rng),
                    skip: Skip::Conv(Conv2d::he(1, out, channels, stride, rng)),
                },
                (Architecture::Procresnet, true) => Block {
                    kind: BlockKind::TransitionProposed,
                    entry: vec![Layer::Conv(conv_star(
                        spec.proc_kernel,
                        out,
                        channels,
                        stride,
                        extent,
                        false,
                        rng,
                    )?)],
                    branch: bottleneck(out, mid, out, 1, rng),
                    skip: Skip::Identity,
                },
                (_, false) => Block {
                    kind: BlockKind::ResidualIdentity,
                    entry: vec![],
                    branch: bottleneck(out, mid, out, 1, rng),
                    skip: Skip::Identity,
                },
            };
            blocks.push(block);
        }
        channels = out;
        extent = extent.div_ceil(stride);
    }
    let tail = vec![
        Layer::BatchNorm(BatchNorm2d::new(channels)),
        Layer::Relu,
        Layer::GlobalAvgPool,
        Layer::Linear(Linear::new(channels, spec.classes, rng)),
    ];
    let net = Network {
        input_shape: vec![spec.input_channels, spec.input_size, spec.input_size],
        head,
        blocks,
        tail,
    };
    net.validate()?;
    Ok(net)
}

/// Batchnorm-free residual net whose blocks are `relu, conv, relu, conv` with
/// an identity skip. Branch kernels are He-initialized and scaled by
/// `branch_scale`.
pub fn corollary_network(
    input_channels: usize,
    channels: usize,
    size: usize,
    blocks: usize,
    classes: usize,
    branch_scale: f64,
    rng: &mut Rng,
) -> Result<Network> {
    if channels == 0 || size == 0 || classes < 2 {
        return Err(Error::Config(
            "corollary network needs positive channels/size and at least 2 classes".into(),
        ));
    }
    let conv = |rng: &mut Rng| {
        let mut c = Conv2d::he(3, channels, channels, 1, rng);
        c.kernel.weights_mut().scale(branch_scale);
        Layer::Conv(c)
    };
    let blocks = (0..blocks)
        .map(|_| Block {
            kind: BlockKind::ResidualIdentity,
            entry: vec![],
            branch: vec![Layer::Relu, conv(rng), Layer::Relu, conv(rng)],
            skip: Skip::Identity,
        })
        .collect();
    let net = Network {
        input_shape: vec![input_channels, size, size],
        head: vec![Layer::Conv(Conv2d::he(3, channels, input_channels, 1, rng))],
        blocks,
        tail: vec![
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(channels, classes, rng)),
        ],
    };
    net.validate()?;
    Ok(net)
}

/// Channel-sweep probe: `1x1 (in -> c), relu`, then the probed block
/// `3x3 (c -> d), relu`, then `1x1 (d -> hidden), relu`, pooling and a linear
/// classifier. With `projected` every convolution is a conv* with the
/// ReLU-corrected target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub c: usize,
    pub d: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub hidden: usize,
    pub classes: usize,
    pub projected: bool,
}

pub fn probe_network(spec: &ProbeSpec, rng: &mut Rng) -> Result<Network> {
    if spec.c == 0 || spec.d == 0 || spec.hidden == 0 || spec.input_size < 3 {
        return Err(Error::Config(format!("invalid probe network {spec:?}")));
    }
    let n = spec.input_size;
    let conv = |k: usize, out: usize, inp: usize, rng: &mut Rng| -> Result<Layer> {
        Ok(Layer::Conv(if spec.projected {
            conv_star(k, out, inp, 1, n, true, rng)?
        } else {
            Conv2d::he(k, out, inp, 1, rng)
        }))
    };
    let head = vec![conv(1, spec.c, spec.input_channels, rng)?, Layer::Relu];
    let probed = Block {
        kind: BlockKind::Plain,
        entry: vec![],
        branch: vec![conv(3, spec.d, spec.c, rng)?, Layer::Relu],
        skip: Skip::None,
    };
    let tail = vec![
        conv(1, spec.hidden, spec.d, rng)?,
        Layer::Relu,
        Layer::GlobalAvgPool,
        Layer::Linear(Linear::new(spec.hidden, spec.classes, rng)),
    ];
    let net = Network {
        input_shape: vec![spec.input_channels, n, n],
        head,
        blocks: vec![probed],
        tail,
    };
    net.validate()?;
    Ok(net)
}
