//! Small reference networks with seeded He initialization.

use crate::bn::{BNParams, DEFAULT_EPSILON, DEFAULT_RHO};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::tensor::{ConvParams, DepthwiseConvParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn he(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn bn(name: String, channels: usize) -> Result<LayerSpec> {
    Ok(LayerSpec::new(
        name,
        LayerKind::BatchNorm(BNParams::new(channels, DEFAULT_EPSILON, DEFAULT_RHO)?),
    ))
}

fn conv(rng: &mut ChaCha8Rng, name: String, oc: usize, ic: usize, k: usize, stride: usize) -> Result<LayerSpec> {
    Ok(LayerSpec::new(
        name,
        LayerKind::Conv {
            params: ConvParams::new(he(rng, &[oc, ic, k, k], ic * k * k), None)?,
            stride: (stride, stride),
            padding: (k / 2, k / 2),
        },
    ))
}

fn depthwise(rng: &mut ChaCha8Rng, name: String, ch: usize, k: usize, stride: usize) -> Result<LayerSpec> {
    Ok(LayerSpec::new(
        name,
        LayerKind::DepthwiseConv {
            params: DepthwiseConvParams::new(he(rng, &[ch, 1, k, k], k * k), None)?,
            stride: (stride, stride),
            padding: (k / 2, k / 2),
        },
    ))
}

fn head(rng: &mut ChaCha8Rng, layers: &mut Vec<LayerSpec>, ch: usize, classes: usize) {
    layers.push(LayerSpec::new("pool", LayerKind::GlobalAvgPool));
    layers.push(LayerSpec::new(
        "fc",
        LayerKind::Affine {
            weights: he(rng, &[ch, classes], ch),
            bias: vec![0.0; classes],
        },
    ));
}

/// `conv3x3 -> bn -> relu` per entry of `widths`, then pooling and an
/// affine classifier.
pub fn plain_cnn(input: [usize; 3], widths: &[usize], classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut ch = input[0];
    for (i, &w) in widths.iter().enumerate() {
        layers.push(conv(&mut rng, format!("c{i}"), w, ch, 3, 1)?);
        layers.push(bn(format!("c{i}.bn"), w)?);
        layers.push(LayerSpec::new(format!("c{i}.relu"), LayerKind::Relu));
        ch = w;
    }
    head(&mut rng, &mut layers, ch, classes);
    ModelGraph::new(input, layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableNetSpec {
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// `(output channels, depthwise stride)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub classes: usize,
    pub relu6: bool,
    pub seed: u64,
}

impl SeparableNetSpec {
    /// Six blocks on 3x16x16 inputs.
    pub fn toy(classes: usize, seed: u64) -> Self {
        SeparableNetSpec {
            input: [3, 16, 16],
            stem_channels: 8,
            stem_stride: 2,
            blocks: vec![(16, 1), (16, 1), (24, 2), (24, 1), (32, 1), (32, 1)],
            classes,
            relu6: false,
            seed,
        }
    }
}

/// MobileNet-style stack: a strided stem conv, then blocks of
/// `depthwise3x3 -> bn -> act -> conv1x1 -> bn -> act`, then the head.
///
/// Layers are named `stem`, `b{i}.dw`, `b{i}.pw` with `.bn` and `.act`
/// suffixes, `pool` and `fc`.
pub fn separable_net(spec: &SeparableNetSpec) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let act = |name: String| {
        LayerSpec::new(name, if spec.relu6 { LayerKind::Relu6 } else { LayerKind::Relu })
    };
    let mut layers = vec![
        conv(&mut rng, "stem".into(), spec.stem_channels, spec.input[0], 3, spec.stem_stride)?,
        bn("stem.bn".into(), spec.stem_channels)?,
        act("stem.act".into()),
    ];
    let mut ch = spec.stem_channels;
    for (i, &(out, stride)) in spec.blocks.iter().enumerate() {
        layers.push(depthwise(&mut rng, format!("b{i}.dw"), ch, 3, stride)?);
        layers.push(bn(format!("b{i}.dw.bn"), ch)?);
        layers.push(act(format!("b{i}.dw.act")));
        layers.push(conv(&mut rng, format!("b{i}.pw"), out, ch, 1, 1)?);
        layers.push(bn(format!("b{i}.pw.bn"), out)?);
        layers.push(act(format!("b{i}.pw.act")));
        ch = out;
    }
    head(&mut rng, &mut layers, ch, spec.classes);
    ModelGraph::new(spec.input, layers)
}

/// Kills channels of a batch norm that feeds a ReLU: with γ = 0.05 and
/// β = -5 the activation is zero for any normalized input below 100, and
/// the zero gradient keeps it so. A depthwise layer downstream then sees a
/// constant input on those channels.
pub fn kill_channels(graph: &mut ModelGraph, bn_layer: &str, channels: &[usize]) -> Result<()> {
    let layer = graph
        .layers
        .iter_mut()
        .find(|l| l.name == bn_layer)
        .ok_or_else(|| Error::Graph(format!("no layer `{bn_layer}`")))?;
    let LayerKind::BatchNorm(bn) = &mut layer.kind else {
        return Err(Error::Graph(format!("`{bn_layer}` is not a batch norm")));
    };
    for &c in channels {
        if c >= bn.channels() {
            return Err(Error::InvalidParam(format!("channel {c} out of {}", bn.channels())));
        }
        bn.gamma[c] = 0.05;
        bn.beta[c] = -5.0;
    }
    Ok(())
}
