//! A small reverse-mode engine over fixed residual-network topologies.
//!
//! `forward` records every block-boundary activation on a [`Tape`];
//! `backward` replays it and returns parameter gradients together with
//! `dE/dx_l` at every boundary, which is what the gradient-norm probe reads.

mod build;
mod checkpoint;
mod gradcheck;
pub mod layers;
mod linear;
mod optim;

pub use build::{
    build_network, corollary_network, probe_network, ArchSpec, Architecture, ProbeSpec,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_with};
pub use layers::{BatchNorm2d, Conv2d, Linear, Mode, Projection};
pub use linear::{GramStats, LinearResNet, LinearTape};
pub use optim::Sgd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RealTensor;
use layers::{BatchNormCache, dims4};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    GlobalAvgPool,
    Linear(Linear),
}

#[derive(Clone, Debug)]
enum Cache {
    Input(RealTensor),
    BatchNorm(BatchNormCache),
    Shape(Vec<usize>),
    None,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(c) if c.projection.is_some() => "conv*",
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::GlobalAvgPool => "avgpool",
            Layer::Linear(_) => "linear",
        }
    }

    /// Output shape without the batch axis, or a dimension error.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (Layer::Conv(c), &[ch, h, w]) if ch == c.kernel.in_channels() => {
                Ok(vec![c.kernel.out_channels(), c.out_extent(h), c.out_extent(w)])
            }
            (Layer::BatchNorm(b), &[ch, _, _]) if ch == b.channels() => Ok(input.to_vec()),
            (Layer::Relu, _) => Ok(input.to_vec()),
            (Layer::GlobalAvgPool, &[ch, _, _]) => Ok(vec![ch]),
            (Layer::Linear(l), &[f]) if f == l.weight.shape()[1] => Ok(vec![l.weight.shape()[0]]),
            _ => Err(Error::dim(format!(
                "{} layer cannot take input shaped {input:?}",
                self.name()
            ))),
        }
    }

    pub fn params(&self) -> Vec<&RealTensor> {
        match self {
            Layer::Conv(c) => vec![c.kernel.weights()],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Relu | Layer::GlobalAvgPool => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut RealTensor> {
        match self {
            Layer::Conv(c) => vec![c.kernel.weights_mut()],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu | Layer::GlobalAvgPool => vec![],
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn buffers(&self) -> Vec<&RealTensor> {
        match self {
            Layer::BatchNorm(b) => vec![&b.running_mean, &b.running_var],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut RealTensor> {
        match self {
            Layer::BatchNorm(b) => vec![&mut b.running_mean, &mut b.running_var],
            _ => vec![],
        }
    }

    fn forward(&mut self, x: &RealTensor, mode: Mode) -> Result<(RealTensor, Cache)> {
        match self {
            Layer::Conv(c) => Ok((c.forward(x)?, Cache::Input(x.clone()))),
            Layer::BatchNorm(b) => {
                let (y, cache) = b.forward(x, mode)?;
                Ok((y, Cache::BatchNorm(cache)))
            }
            Layer::Relu => Ok((layers::relu(x), Cache::Input(x.clone()))),
            Layer::GlobalAvgPool => Ok((
                layers::global_avg_pool(x)?,
                Cache::Shape(x.shape().to_vec()),
            )),
            Layer::Linear(l) => Ok((l.forward(x)?, Cache::Input(x.clone()))),
        }
    }

    fn backward(&self, cache: &Cache, grad: &RealTensor) -> Result<(RealTensor, Vec<RealTensor>)> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Input(x)) => {
                let (gx, gw) = c.backward(x, grad)?;
                Ok((gx, vec![gw]))
            }
            (Layer::BatchNorm(b), Cache::BatchNorm(cache)) => {
                let (gx, gg, gb) = b.backward(cache, grad)?;
                Ok((gx, vec![gg, gb]))
            }
            (Layer::Relu, Cache::Input(x)) => Ok((layers::relu_backward(x, grad), vec![])),
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => {
                Ok((layers::global_avg_pool_backward(shape, grad)?, vec![]))
            }
            (Layer::Linear(l), Cache::Input(x)) => {
                let (gx, gw, gb) = l.backward(x, grad)?;
                Ok((gx, vec![gw, gb]))
            }
            _ => Err(Error::State(format!(
                "tape entry does not belong to a {} layer",
                self.name()
            ))),
        }
    }
}

fn run_forward(layers: &mut [Layer], x: &RealTensor, mode: Mode) -> Result<(RealTensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers.iter_mut() {
        let (next, cache) = layer.forward(&cur, mode)?;
        caches.push(cache);
        cur = next;
    }
    Ok((cur, caches))
}

/// Returns the input gradient and per-layer parameter gradients in forward order.
fn run_backward(
    layers: &[Layer],
    caches: &[Cache],
    grad: RealTensor,
) -> Result<(RealTensor, Vec<Vec<RealTensor>>)> {
    if caches.len() != layers.len() {
        return Err(Error::State("tape does not match the network".into()));
    }
    let mut grads = vec![Vec::new(); layers.len()];
    let mut g = grad;
    for (i, layer) in layers.iter().enumerate().rev() {
        let (gx, pg) = layer.backward(&caches[i], &g)?;
        grads[i] = pg;
        g = gx;
    }
    Ok((g, grads))
}

fn out_shape_of(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>> {
    layers
        .iter()
        .try_fold(input.to_vec(), |shape, layer| layer.out_shape(&shape))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Plain,
    ResidualIdentity,
    TransitionOriginal,
    TransitionProposed,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Plain => "plain",
            BlockKind::ResidualIdentity => "residual-identity",
            BlockKind::TransitionOriginal => "transition-original",
            BlockKind::TransitionProposed => "transition-proposed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Skip {
    None,
    Identity,
    Conv(Conv2d),
}

/// `x_{l+1} = branch(h) + skip(h)` with `h = entry(x_l)`. The entry path is
/// empty except for the proposed transition, where it holds the conv*.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub entry: Vec<Layer>,
    pub branch: Vec<Layer>,
    pub skip: Skip,
}

#[derive(Clone, Debug)]
struct BlockCache {
    entry: Vec<Cache>,
    branch: Vec<Cache>,
    skip: Option<Cache>,
}

impl Block {
    /// Checks the wiring for the given input shape and returns the output shape.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let h = out_shape_of(&self.entry, input)?;
        let main = out_shape_of(&self.branch, &h)?;
        let skip = match &self.skip {
            Skip::None => None,
            Skip::Identity => Some(h.clone()),
            Skip::Conv(c) => Some(Layer::Conv(c.clone()).out_shape(&h)?),
        };
        if let Some(s) = skip {
            if s != main {
                return Err(Error::dim(format!(
                    "{} block: main path gives {main:?} but skip gives {s:?}",
                    self.kind.as_str()
                )));
            }
        }
        if self.kind == BlockKind::ResidualIdentity && (main != input || self.skip != Skip::Identity) {
            return Err(Error::dim(format!(
                "residual-identity block must map {input:?} to itself through an identity skip"
            )));
        }
        Ok(main)
    }

    /// Whether the block changes channels or resolution.
    pub fn is_transition(&self, input: &[usize]) -> bool {
        matches!(
            self.kind,
            BlockKind::TransitionOriginal | BlockKind::TransitionProposed
        ) || self.out_shape(input).map(|s| s != input).unwrap_or(false)
    }

    fn forward(&mut self, x: &RealTensor, mode: Mode) -> Result<(RealTensor, BlockCache)> {
        let (h, entry) = run_forward(&mut self.entry, x, mode)?;
        let (mut out, branch) = run_forward(&mut self.branch, &h, mode)?;
        let skip = match &self.skip {
            Skip::None => None,
            Skip::Identity => {
                out.axpy(1.0, &h)?;
                Some(Cache::None)
            }
            Skip::Conv(c) => {
                out.axpy(1.0, &c.forward(&h)?)?;
                Some(Cache::Input(h.clone()))
            }
        };
        Ok((out, BlockCache { entry, branch, skip }))
    }

    /// Returns `(dE/dx_l, entry grads, branch grads, skip grads)`.
    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        cache: &BlockCache,
        grad: &RealTensor,
    ) -> Result<(RealTensor, Vec<Vec<RealTensor>>, Vec<Vec<RealTensor>>, Vec<RealTensor>)> {
        let (mut gh, branch_grads) = run_backward(&self.branch, &cache.branch, grad.clone())?;
        let skip_grads = match (&self.skip, &cache.skip) {
            (Skip::None, None) => vec![],
            (Skip::Identity, Some(Cache::None)) => {
                gh.axpy(1.0, grad)?;
                vec![]
            }
            (Skip::Conv(c), Some(Cache::Input(h))) => {
                let (gx, gw) = c.backward(h, grad)?;
                gh.axpy(1.0, &gx)?;
                vec![gw]
            }
            _ => return Err(Error::State("tape does not match the skip path".into())),
        };
        let (gx, entry_grads) = run_backward(&self.entry, &cache.entry, gh)?;
        Ok((gx, entry_grads, branch_grads, skip_grads))
    }

    fn params(&self) -> Vec<&RealTensor> {
        let mut out: Vec<&RealTensor> = self.entry.iter().flat_map(Layer::params).collect();
        out.extend(self.branch.iter().flat_map(Layer::params));
        if let Skip::Conv(c) = &self.skip {
            out.push(c.kernel.weights());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut RealTensor> {
        let mut out: Vec<&mut RealTensor> =
            self.entry.iter_mut().flat_map(Layer::params_mut).collect();
        out.extend(self.branch.iter_mut().flat_map(Layer::params_mut));
        if let Skip::Conv(c) = &mut self.skip {
            out.push(c.kernel.weights_mut());
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = Vec::new();
        for layer in self.entry.iter_mut().chain(self.branch.iter_mut()) {
            if let Layer::Conv(c) = layer {
                out.push(c);
            }
        }
        if let Skip::Conv(c) = &mut self.skip {
            out.push(c);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// `(channels, height, width)` of one example.
    pub input_shape: Vec<usize>,
    pub head: Vec<Layer>,
    pub blocks: Vec<Block>,
    /// Pooling and classifier; the loss is softmax cross-entropy on its output.
    pub tail: Vec<Layer>,
}

/// Activations and layer caches recorded by [`forward`].
///
/// `boundaries` holds the input, `x_1 .. x_{L+1}` and the logits.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub boundaries: Vec<RealTensor>,
    pub loss: f64,
    pub errors: usize,
    head: Vec<Cache>,
    blocks: Vec<BlockCache>,
    tail: Vec<Cache>,
    loss_grad: Option<RealTensor>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.loss_grad.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Same order as [`Network::params`].
    pub params: Vec<RealTensor>,
    /// `dE/dx_l` for `l = 1 .. L+1`.
    pub boundaries: Vec<RealTensor>,
    /// Gradient w.r.t. the network input.
    pub input: RealTensor,
}

impl GradReport {
    pub fn is_finite(&self) -> bool {
        self.params.iter().all(RealTensor::is_finite)
    }
}

impl Network {
    /// Validates the wiring and returns the per-example logit count.
    pub fn validate(&self) -> Result<usize> {
        let shapes = self.boundary_shapes()?;
        let out = out_shape_of(&self.tail, shapes.last().expect("at least x_1"))?;
        match out.as_slice() {
            &[classes] => Ok(classes),
            other => Err(Error::dim(format!("network tail produces {other:?}, not logits"))),
        }
    }

    /// Shapes of `x_1 .. x_{L+1}` without the batch axis.
    pub fn boundary_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![out_shape_of(&self.head, &self.input_shape)?];
        for block in &self.blocks {
            let next = block.out_shape(shapes.last().expect("nonempty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Per-block transition flags, using each block's actual input shape.
    pub fn transition_flags(&self) -> Result<Vec<bool>> {
        let shapes = self.boundary_shapes()?;
        Ok(self
            .blocks
            .iter()
            .zip(&shapes)
            .map(|(b, s)| b.is_transition(s))
            .collect())
    }

    /// Weight layers on the main path (convolutions and linear layers,
    /// skip-path convolutions excluded).
    pub fn depth(&self) -> usize {
        let weighted = |l: &&Layer| matches!(l, Layer::Conv(_) | Layer::Linear(_));
        self.head.iter().filter(weighted).count()
            + self
                .blocks
                .iter()
                .flat_map(|b| b.entry.iter().chain(&b.branch))
                .filter(weighted)
                .count()
            + self.tail.iter().filter(weighted).count()
    }

    pub fn params(&self) -> Vec<&RealTensor> {
        let mut out: Vec<&RealTensor> = self.head.iter().flat_map(Layer::params).collect();
        out.extend(self.blocks.iter().flat_map(Block::params));
        out.extend(self.tail.iter().flat_map(Layer::params));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut RealTensor> {
        let mut out: Vec<&mut RealTensor> =
            self.head.iter_mut().flat_map(Layer::params_mut).collect();
        out.extend(self.blocks.iter_mut().flat_map(Block::params_mut));
        out.extend(self.tail.iter_mut().flat_map(Layer::params_mut));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = Vec::new();
        for layer in self.head.iter_mut().chain(self.tail.iter_mut()) {
            if let Layer::Conv(c) = layer {
                out.push(c);
            }
        }
        for block in &mut self.blocks {
            out.extend(block.convs_mut());
        }
        out
    }

    /// Re-projects every conv* layer; returns the number projected.
    pub fn project(&mut self) -> Result<usize> {
        let mut count = 0;
        for conv in self.convs_mut() {
            if conv.project()?.is_some() {
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn forward(&mut self, batch: &RealTensor, labels: &[usize], mode: Mode) -> Result<(f64, Tape)> {
        let [n, c, h, w] = dims4(batch)?;
        if [c, h, w] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "batch examples shaped {:?}, network expects {:?}",
                [c, h, w],
                self.input_shape
            )));
        }
        if labels.len() != n {
            return Err(Error::dim(format!("{n} examples but {} labels", labels.len())));
        }
        let mut tape = Tape {
            boundaries: vec![batch.clone()],
            ..Tape::default()
        };
        let (mut x, head) = run_forward(&mut self.head, batch, mode).map_err(name_numeric("head"))?;
        if !x.is_finite() {
            return Err(Error::Numeric("head".into()));
        }
        tape.head = head;
        tape.boundaries.push(x.clone());
        for (l, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("block {} ({})", l + 1, block.kind.as_str());
            let (next, cache) = block.forward(&x, mode).map_err(name_numeric(&name))?;
            if !next.is_finite() {
                return Err(Error::Numeric(name));
            }
            tape.blocks.push(cache);
            tape.boundaries.push(next.clone());
            x = next;
        }
        let (logits, tail) = run_forward(&mut self.tail, &x, mode).map_err(name_numeric("tail"))?;
        let (loss, grad, errors) = layers::softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("loss".into()));
        }
        tape.tail = tail;
        tape.boundaries.push(logits);
        tape.loss = loss;
        tape.errors = errors;
        tape.loss_grad = Some(grad);
        Ok((loss, tape))
    }

    pub fn backward(&self, tape: &Tape) -> Result<GradReport> {
        let Some(loss_grad) = &tape.loss_grad else {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        };
        if tape.blocks.len() != self.blocks.len() || tape.head.len() != self.head.len() {
            return Err(Error::State("tape was recorded on a different network".into()));
        }
        let (mut g, tail_grads) = run_backward(&self.tail, &tape.tail, loss_grad.clone())?;
        let mut boundaries = vec![g.clone()];
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, cache) in self.blocks.iter().zip(&tape.blocks).rev() {
            let (gx, e, b, s) = block.backward(cache, &g)?;
            block_grads.push((e, b, s));
            boundaries.push(gx.clone());
            g = gx;
        }
        boundaries.reverse();
        block_grads.reverse();
        let (input, head_grads) = run_backward(&self.head, &tape.head, g)?;

        let mut params: Vec<RealTensor> = head_grads.into_iter().flatten().collect();
        for (e, b, s) in block_grads {
            params.extend(e.into_iter().flatten());
            params.extend(b.into_iter().flatten());
            params.extend(s);
        }
        params.extend(tail_grads.into_iter().flatten());
        Ok(GradReport {
            params,
            boundaries,
            input,
        })
    }

    /// Loss and error count in eval mode, in chunks of `batch` examples.
    pub fn evaluate(&mut self, images: &RealTensor, labels: &[usize], batch: usize) -> Result<(f64, usize)> {
        let [n, c, h, w] = dims4(images)?;
        let per = c * h * w;
        let mut total_loss = 0.0;
        let mut errors = 0;
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let chunk = RealTensor::from_vec(
                &[end - start, c, h, w],
                images.data()[start * per..end * per].to_vec(),
            )?;
            let (loss, tape) = self.forward(&chunk, &labels[start..end], Mode::Eval)?;
            total_loss += loss * (end - start) as f64;
            errors += tape.errors;
            start = end;
        }
        Ok((total_loss / n.max(1) as f64, errors))
    }
}

fn name_numeric(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric(_) => Error::Numeric(name.to_string()),
        other => other,
    }
}

/// Free-function form of [`Network::forward`] in train mode.
pub fn forward(net: &mut Network, batch: &RealTensor, labels: &[usize]) -> Result<(f64, Tape)> {
    net.forward(batch, labels, Mode::Train)
}

pub fn backward(net: &Network, tape: &Tape) -> Result<GradReport> {
    net.backward(tape)
}

#[cfg(test)]
mod tests;
