//! Layer graph: an ordered layer list where each layer consumes the output
//! of the one before it, except add junctions, which name their two inputs.

mod io;
mod report;

pub use io::{load_model, save_model, MODEL_FORMAT, MODEL_VERSION};
pub use report::{dynamic_range_report, mac_report_csv, RangeEntry, RangeReport};

use crate::bn::{fold_bn, fold_bn_affine, fold_bn_depthwise, BNParams};
use crate::error::{Error, Result};
use crate::quant::QuantPoint;
use crate::tensor::{conv_output_extent, ConvParams, DepthwiseConvParams, Tensor};
use std::collections::HashSet;

/// Per-sample activation shape `(channels, height, width)`.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        params: ConvParams,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    DepthwiseConv {
        params: DepthwiseConvParams,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    /// Flattens its input; `weights` is `D x K`.
    Affine {
        weights: Tensor,
        bias: Vec<f64>,
    },
    BatchNorm(BNParams),
    Relu,
    Relu6,
    GlobalAvgPool,
    AddJunction {
        lhs: String,
        rhs: String,
    },
    QuantPoint(QuantPoint),
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::DepthwiseConv { .. } | LayerKind::Affine { .. }
        )
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::DepthwiseConv { .. } => "depthwise_conv",
            LayerKind::Affine { .. } => "affine",
            LayerKind::BatchNorm(_) => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::AddJunction { .. } => "add_junction",
            LayerKind::QuantPoint(_) => "quant_point",
        }
    }

    /// The layer's weight tensor, if it has one.
    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            LayerKind::Conv { params, .. } => Some(&params.weights),
            LayerKind::DepthwiseConv { params, .. } => Some(&params.weights),
            LayerKind::Affine { weights, .. } => Some(weights),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Weight quantizer, only on conv / depthwise / affine layers.
    pub weight_quant: Option<QuantPoint>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            weight_quant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
}

/// Where a layer reads its (first) input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

impl ModelGraph {
    pub fn new(input_shape: Shape3, layers: Vec<LayerSpec>) -> Result<Self> {
        let g = ModelGraph { input_shape, layers };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.name.is_empty() {
                return Err(Error::Graph(format!("layer {i} has an empty name")));
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Graph(format!("duplicate layer name `{}`", layer.name)));
            }
            if let LayerKind::BatchNorm(bn) = &layer.kind {
                bn.validate()?;
                let ok = i > 0 && self.layers[i - 1].kind.has_weights();
                if !ok {
                    return Err(Error::Graph(format!(
                        "batch norm `{}` must directly follow a conv, depthwise or affine layer",
                        layer.name
                    )));
                }
            }
            if layer.weight_quant.is_some() && !layer.kind.has_weights() {
                return Err(Error::Graph(format!(
                    "weight quantizer on weightless layer `{}`",
                    layer.name
                )));
            }
            if let LayerKind::AddJunction { lhs, rhs } = &layer.kind {
                for r in [lhs, rhs] {
                    match self.index_of(r) {
                        Some(j) if j < i => {}
                        _ => {
                            return Err(Error::Graph(format!(
                                "add junction `{}` references `{r}`, which is not an earlier layer",
                                layer.name
                            )))
                        }
                    }
                }
            }
        }
        self.infer_shapes().map(|_| ())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Producer of layer `i`'s input (the lhs for add junctions).
    pub fn source_of(&self, i: usize) -> Source {
        if let LayerKind::AddJunction { lhs, .. } = &self.layers[i].kind {
            if let Some(j) = self.index_of(lhs) {
                return Source::Layer(j);
            }
        }
        if i == 0 {
            Source::Input
        } else {
            Source::Layer(i - 1)
        }
    }

    /// Whether an add junction reads the output of layer `i` by name.
    pub fn feeds_add_junction(&self, i: usize) -> bool {
        let name = &self.layers[i].name;
        self.layers.iter().any(|l| match &l.kind {
            LayerKind::AddJunction { lhs, rhs } => lhs == name || rhs == name,
            _ => false,
        })
    }

    /// Per-layer output shapes, in layer order.
    pub fn infer_shapes(&self) -> Result<Vec<Shape3>> {
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { self.input_shape } else { shapes[i - 1] };
            let [c, h, w] = input;
            let bad = |msg: String| Error::Graph(format!("layer `{}`: {msg}", layer.name));
            let out = match &layer.kind {
                LayerKind::Conv {
                    params,
                    stride,
                    padding,
                } => {
                    params.validate()?;
                    if params.in_channels() != c {
                        return Err(bad(format!(
                            "expects {} input channels, got {c}",
                            params.in_channels()
                        )));
                    }
                    let (kh, kw) = params.kernel();
                    [
                        params.out_channels(),
                        conv_output_extent(h, kh, stride.0, padding.0)
                            .ok_or_else(|| bad(format!("kernel does not fit height {h}")))?,
                        conv_output_extent(w, kw, stride.1, padding.1)
                            .ok_or_else(|| bad(format!("kernel does not fit width {w}")))?,
                    ]
                }
                LayerKind::DepthwiseConv {
                    params,
                    stride,
                    padding,
                } => {
                    params.validate()?;
                    if params.channels() != c {
                        return Err(bad(format!("expects {} channels, got {c}", params.channels())));
                    }
                    let (kh, kw) = params.kernel();
                    [
                        c,
                        conv_output_extent(h, kh, stride.0, padding.0)
                            .ok_or_else(|| bad(format!("kernel does not fit height {h}")))?,
                        conv_output_extent(w, kw, stride.1, padding.1)
                            .ok_or_else(|| bad(format!("kernel does not fit width {w}")))?,
                    ]
                }
                LayerKind::Affine { weights, bias } => {
                    let (d, k) = weights.dims2()?;
                    if d != c * h * w || bias.len() != k {
                        return Err(bad(format!(
                            "affine {d}x{k} (bias {}) cannot consume {c}x{h}x{w}",
                            bias.len()
                        )));
                    }
                    [k, 1, 1]
                }
                LayerKind::BatchNorm(bn) => {
                    if bn.channels() != c {
                        return Err(bad(format!("{} channels vs input {c}", bn.channels())));
                    }
                    input
                }
                LayerKind::Relu | LayerKind::Relu6 | LayerKind::QuantPoint(_) => input,
                LayerKind::GlobalAvgPool => [c, 1, 1],
                LayerKind::AddJunction { lhs, rhs } => {
                    let a = self.index_of(lhs).filter(|&j| j < i);
                    let b = self.index_of(rhs).filter(|&j| j < i);
                    match (a, b) {
                        (Some(a), Some(b)) if shapes[a] == shapes[b] => shapes[a],
                        (Some(a), Some(b)) => {
                            return Err(bad(format!(
                                "mismatched inputs {:?} and {:?}",
                                shapes[a], shapes[b]
                            )))
                        }
                        _ => return Err(bad("unknown add inputs".into())),
                    }
                }
            };
            if out.contains(&0) {
                return Err(bad(format!("empty output {out:?}")));
            }
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        Ok(self.infer_shapes()?.last().copied().unwrap_or(self.input_shape))
    }

    /// Multiply-accumulates per layer, one per multiply-add.
    pub fn layer_macs(&self) -> Result<Vec<(String, u64)>> {
        let shapes = self.infer_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, out)| {
                let spatial = (out[1] * out[2]) as u64;
                let macs = match &layer.kind {
                    LayerKind::Conv { params, .. } => {
                        let (kh, kw) = params.kernel();
                        (params.out_channels() * params.in_channels() * kh * kw) as u64 * spatial
                    }
                    LayerKind::DepthwiseConv { params, .. } => {
                        let (kh, kw) = params.kernel();
                        (params.channels() * kh * kw) as u64 * spatial
                    }
                    LayerKind::Affine { weights, .. } => weights.len() as u64,
                    _ => 0,
                };
                (layer.name.clone(), macs)
            })
            .collect())
    }

    pub fn count_macs(&self) -> Result<u64> {
        Ok(self.layer_macs()?.iter().map(|(_, m)| m).sum())
    }

    /// Number of kernel weights in conv, depthwise and affine layers.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.kind.weights())
            .map(Tensor::len)
            .sum()
    }

    /// All learnable scalars: kernel weights, biases, and BN γ and β.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv { params, .. } => {
                    params.weights.len() + params.bias.as_ref().map_or(0, Vec::len)
                }
                LayerKind::DepthwiseConv { params, .. } => {
                    params.weights.len() + params.bias.as_ref().map_or(0, Vec::len)
                }
                LayerKind::Affine { weights, bias } => weights.len() + bias.len(),
                LayerKind::BatchNorm(bn) => 2 * bn.channels(),
                _ => 0,
            })
            .sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::BatchNorm(_)))
    }

    /// Folds every batch norm into the layer before it and drops it.
    /// Add junctions that named a folded batch norm are pointed at its
    /// producer.
    pub fn fold_batch_norms(&self) -> Result<ModelGraph> {
        self.validate()?;
        let mut layers: Vec<LayerSpec> = Vec::with_capacity(self.layers.len());
        let mut renamed: Vec<(String, String)> = Vec::new();
        for layer in &self.layers {
            let LayerKind::BatchNorm(bn) = &layer.kind else {
                layers.push(layer.clone());
                continue;
            };
            let prev = layers
                .last_mut()
                .ok_or_else(|| Error::Graph(format!("batch norm `{}` has no producer", layer.name)))?;
            prev.kind = match &prev.kind {
                LayerKind::Conv {
                    params,
                    stride,
                    padding,
                } => LayerKind::Conv {
                    params: fold_bn(params, bn)?,
                    stride: *stride,
                    padding: *padding,
                },
                LayerKind::DepthwiseConv {
                    params,
                    stride,
                    padding,
                } => LayerKind::DepthwiseConv {
                    params: fold_bn_depthwise(params, bn)?,
                    stride: *stride,
                    padding: *padding,
                },
                LayerKind::Affine { weights, bias } => {
                    let (weights, bias) = fold_bn_affine(weights, bias, bn)?;
                    LayerKind::Affine { weights, bias }
                }
                _ => {
                    return Err(Error::Graph(format!(
                        "batch norm `{}` does not follow a weighted layer",
                        layer.name
                    )))
                }
            };
            renamed.push((layer.name.clone(), prev.name.clone()));
        }
        for layer in &mut layers {
            if let LayerKind::AddJunction { lhs, rhs } = &mut layer.kind {
                for (from, to) in &renamed {
                    if lhs == from {
                        *lhs = to.clone();
                    }
                    if rhs == from {
                        *rhs = to.clone();
                    }
                }
            }
        }
        ModelGraph::new(self.input_shape, layers)
    }

    pub fn batch_norm_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec, &BNParams)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.kind {
            LayerKind::BatchNorm(bn) => Some((i, l, bn)),
            _ => None,
        })
    }
}
