//! Checkpoints: a JSON manifest describing the topology and tensor layout,
//! plus a flat little-endian f64 blob holding parameters then buffers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Linear, Projection};
use super::{Block, BlockKind, Layer, Network, Skip};
use crate::error::{Error, Result};
use crate::spectrum::Kernel4;
use crate::tensor::RealTensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "procres-checkpoint";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerDesc {
    Conv {
        k: usize,
        out: usize,
        #[serde(rename = "in")]
        inp: usize,
        stride: usize,
        projection: Option<Projection>,
    },
    Batchnorm {
        channels: usize,
    },
    Relu,
    Avgpool,
    Linear {
        input: usize,
        output: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDesc {
    kind: BlockKind,
    entry: Vec<LayerDesc>,
    branch: Vec<LayerDesc>,
    skip: SkipDesc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SkipDesc {
    None,
    Identity,
    Conv(LayerDesc),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    input_shape: Vec<usize>,
    head: Vec<LayerDesc>,
    blocks: Vec<BlockDesc>,
    tail: Vec<LayerDesc>,
    tensors: Vec<TensorEntry>,
}

fn describe(layer: &Layer) -> LayerDesc {
    match layer {
        Layer::Conv(c) => LayerDesc::Conv {
            k: c.kernel.k(),
            out: c.kernel.out_channels(),
            inp: c.kernel.in_channels(),
            stride: c.stride,
            projection: c.projection,
        },
        Layer::BatchNorm(b) => LayerDesc::Batchnorm {
            channels: b.channels(),
        },
        Layer::Relu => LayerDesc::Relu,
        Layer::GlobalAvgPool => LayerDesc::Avgpool,
        Layer::Linear(l) => LayerDesc::Linear {
            input: l.weight.shape()[1],
            output: l.weight.shape()[0],
        },
    }
}

fn instantiate(desc: &LayerDesc) -> Result<Layer> {
    Ok(match *desc {
        LayerDesc::Conv {
            k,
            out,
            inp,
            stride,
            projection,
        } => {
            if stride == 0 {
                return Err(Error::Config("checkpoint conv with stride 0".into()));
            }
            let mut conv = Conv2d::new(Kernel4::new(k, out, inp, vec![0.0; k * k * out * inp])?, stride);
            conv.projection = projection;
            Layer::Conv(conv)
        }
        LayerDesc::Batchnorm { channels } => Layer::BatchNorm(BatchNorm2d::new(channels)),
        LayerDesc::Relu => Layer::Relu,
        LayerDesc::Avgpool => Layer::GlobalAvgPool,
        LayerDesc::Linear { input, output } => Layer::Linear(Linear {
            weight: RealTensor::zeros(&[output, input]),
            bias: RealTensor::zeros(&[output]),
        }),
    })
}

fn tensors(net: &Network) -> Vec<(String, &RealTensor)> {
    fn push_layer<'a>(out: &mut Vec<(String, &'a RealTensor)>, path: String, layer: &'a Layer) {
        for (i, p) in layer.params().into_iter().enumerate() {
            out.push((format!("{path}.{}.param{i}", layer.name()), p));
        }
    }
    let mut out = Vec::new();
    for (i, l) in net.head.iter().enumerate() {
        push_layer(&mut out, format!("head.{i}"), l);
    }
    for (b, block) in net.blocks.iter().enumerate() {
        for (i, l) in block.entry.iter().enumerate() {
            push_layer(&mut out, format!("blocks.{b}.entry.{i}"), l);
        }
        for (i, l) in block.branch.iter().enumerate() {
            push_layer(&mut out, format!("blocks.{b}.branch.{i}"), l);
        }
        if let Skip::Conv(c) = &block.skip {
            out.push((format!("blocks.{b}.skip.conv.param0"), c.kernel.weights()));
        }
    }
    for (i, l) in net.tail.iter().enumerate() {
        push_layer(&mut out, format!("tail.{i}"), l);
    }
    for (i, buffer) in all_layers(net).flat_map(Layer::buffers).enumerate() {
        out.push((format!("buffer{i}"), buffer));
    }
    out
}

fn all_layers(net: &Network) -> impl Iterator<Item = &Layer> {
    net.head
        .iter()
        .chain(net.blocks.iter().flat_map(|b| b.entry.iter().chain(&b.branch)))
        .chain(&net.tail)
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save_checkpoint(net: &Network, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors(net) {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        blob: blob_name.clone(),
        input_shape: net.input_shape.clone(),
        head: net.head.iter().map(describe).collect(),
        blocks: net
            .blocks
            .iter()
            .map(|b| BlockDesc {
                kind: b.kind,
                entry: b.entry.iter().map(describe).collect(),
                branch: b.branch.iter().map(describe).collect(),
                skip: match &b.skip {
                    Skip::None => SkipDesc::None,
                    Skip::Identity => SkipDesc::Identity,
                    Skip::Conv(c) => SkipDesc::Conv(describe(&Layer::Conv(c.clone()))),
                },
            })
            .collect(),
        tail: net.tail.iter().map(describe).collect(),
        tensors: entries,
    };
    fs::write(dir.join(&blob_name), blob)?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Network> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let layers = |descs: &[LayerDesc]| descs.iter().map(instantiate).collect::<Result<Vec<_>>>();
    let mut net = Network {
        input_shape: manifest.input_shape.clone(),
        head: layers(&manifest.head)?,
        blocks: manifest
            .blocks
            .iter()
            .map(|b| {
                Ok(Block {
                    kind: b.kind,
                    entry: layers(&b.entry)?,
                    branch: layers(&b.branch)?,
                    skip: match &b.skip {
                        SkipDesc::None => Skip::None,
                        SkipDesc::Identity => Skip::Identity,
                        SkipDesc::Conv(desc) => match instantiate(desc)? {
                            Layer::Conv(c) => Skip::Conv(c),
                            _ => return Err(Error::Config("skip path must be a conv".into())),
                        },
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?,
        tail: layers(&manifest.tail)?,
    };
    net.validate()?;

    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&manifest.blob))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config("checkpoint blob is not a whole number of f64".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let expected: Vec<(String, Vec<usize>)> = tensors(&net)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Config(format!(
            "manifest lists {} tensors, topology needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut slices = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        let len: usize = shape.iter().product();
        if &entry.name != name || &entry.shape != shape || entry.offset + len > values.len() {
            return Err(Error::Config(format!(
                "checkpoint tensor {} does not match the topology",
                entry.name
            )));
        }
        slices.push(&values[entry.offset..entry.offset + len]);
    }
    let mut targets: Vec<&mut RealTensor> = net.params_mut();
    let n_params = targets.len();
    for (t, s) in targets.iter_mut().zip(&slices[..n_params]) {
        t.data_mut().copy_from_slice(s);
    }
    let buffers: Vec<&mut RealTensor> = net
        .head
        .iter_mut()
        .chain(net.blocks.iter_mut().flat_map(|b| b.entry.iter_mut().chain(b.branch.iter_mut())))
        .chain(net.tail.iter_mut())
        .flat_map(Layer::buffers_mut)
        .collect();
    for (t, s) in buffers.into_iter().zip(&slices[n_params..]) {
        t.data_mut().copy_from_slice(s);
    }
    Ok(net)
}
