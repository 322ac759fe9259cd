//! Forward and reverse passes over a [`ModelGraph`].
//!
//! Training-phase forwards normalize with batch statistics and write the
//! updated running statistics (and calibrated activation ranges) back into
//! the graph. Evaluation-phase forwards never mutate the graph.

use crate::bn::{
    bn_backward_infer, bn_backward_train, bn_forward_infer, bn_forward_train, BNParams,
    BatchStats, BnCache,
};
use crate::error::{shape_err, Error, Result};
use crate::graph::{LayerKind, ModelGraph, Source};
use crate::quant::{fake_quantize, quantize_backward, update_activation_range, QuantConfig, QuantPoint, RangePolicy};
use crate::tensor::{
    affine_backward, affine_forward, conv2d_backward, conv2d_forward, depthwise_conv2d_backward,
    depthwise_conv2d_forward, elementwise_add, global_average_pool, global_average_pool_backward,
    relu6_backward, relu6_forward, relu_backward, relu_forward, ConvParams, DepthwiseConvParams,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, running-stat updates, optional range calibration.
    Train,
    /// Running statistics, frozen ranges.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub phase: Phase,
    /// Update EMA activation ranges (training phase only).
    pub calibrate_activations: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            phase: Phase::Train,
            calibrate_activations: true,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            phase: Phase::Eval,
            calibrate_activations: false,
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Plain,
    Conv {
        effective: ConvParams,
        weight_cfg: Option<QuantConfig>,
    },
    Depthwise {
        effective: DepthwiseConvParams,
        weight_cfg: Option<QuantConfig>,
    },
    Affine {
        effective: Tensor,
        flat_input: Tensor,
        weight_cfg: Option<QuantConfig>,
    },
    BnTrain {
        cache: BnCache,
        gamma: Vec<f64>,
    },
    BnEval {
        params: BNParams,
    },
    Quant {
        cfg: Option<QuantConfig>,
    },
}

/// Everything a reverse pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Tensor,
    outputs: Vec<Tensor>,
    caches: Vec<LayerCache>,
    /// Batch statistics of each training-phase batch norm, by layer index.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn layer_output(&self, i: usize) -> &Tensor {
        &self.outputs[i]
    }

    fn source(&self, src: Source) -> &Tensor {
        match src {
            Source::Input => &self.input,
            Source::Layer(j) => &self.outputs[j],
        }
    }
}

/// Gradient of one layer's learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    Weighted {
        weights: Tensor,
        bias: Option<Vec<f64>>,
    },
    Bn {
        gamma: Vec<f64>,
        beta: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Aligned with `graph.layers`; `None` for parameterless layers.
    pub layers: Vec<Option<LayerGrads>>,
    pub input: Tensor,
}

enum Mutation {
    Bn(usize, BNParams),
    Quant(usize, QuantConfig),
}

fn weight_quant_cfg(qp: &Option<QuantPoint>, w: &Tensor) -> Option<QuantConfig> {
    match qp {
        Some(qp) if qp.enabled => Some(qp.config.with_range(w.min(), w.max())),
        _ => None,
    }
}

fn quantized(w: &Tensor, cfg: &Option<QuantConfig>) -> Tensor {
    match cfg {
        Some(c) => fake_quantize(w, c),
        None => w.clone(),
    }
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape(&[n, c * h * w])
}

fn run(graph: &ModelGraph, input: &Tensor, opts: ForwardOptions) -> Result<(Trace, Vec<Mutation>)> {
    let (_, c, h, w) = input.dims4()?;
    if [c, h, w] != graph.input_shape {
        return Err(shape_err(format!(
            "graph expects input {:?}, got {:?}",
            graph.input_shape,
            &input.shape()[1..]
        )));
    }
    input.check_finite("network input")?;
    let mut trace = Trace {
        input: input.clone(),
        outputs: Vec::with_capacity(graph.layers.len()),
        caches: Vec::with_capacity(graph.layers.len()),
        bn_stats: Vec::new(),
    };
    let mut mutations = Vec::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let x = trace.source(graph.source_of(i));
        let (out, cache) = match &layer.kind {
            LayerKind::Conv {
                params,
                stride,
                padding,
            } => {
                let weight_cfg = weight_quant_cfg(&layer.weight_quant, &params.weights);
                let effective = ConvParams {
                    weights: quantized(&params.weights, &weight_cfg),
                    bias: params.bias.clone(),
                };
                let y = conv2d_forward(x, &effective, *stride, *padding)?;
                (y, LayerCache::Conv { effective, weight_cfg })
            }
            LayerKind::DepthwiseConv {
                params,
                stride,
                padding,
            } => {
                let weight_cfg = weight_quant_cfg(&layer.weight_quant, &params.weights);
                let effective = DepthwiseConvParams {
                    weights: quantized(&params.weights, &weight_cfg),
                    bias: params.bias.clone(),
                };
                let y = depthwise_conv2d_forward(x, &effective, *stride, *padding)?;
                (y, LayerCache::Depthwise { effective, weight_cfg })
            }
            LayerKind::Affine { weights, bias } => {
                let weight_cfg = weight_quant_cfg(&layer.weight_quant, weights);
                let effective = quantized(weights, &weight_cfg);
                let flat_input = flatten(x)?;
                let y = affine_forward(&flat_input, &effective, bias)?;
                let (n, k) = y.dims2()?;
                (
                    y.into_reshaped(&[n, k, 1, 1])?,
                    LayerCache::Affine {
                        effective,
                        flat_input,
                        weight_cfg,
                    },
                )
            }
            LayerKind::BatchNorm(bn) => match opts.phase {
                Phase::Train => {
                    let res = bn_forward_train(x, bn)?;
                    trace.bn_stats.push((i, res.stats));
                    mutations.push(Mutation::Bn(i, res.params));
                    (
                        res.output,
                        LayerCache::BnTrain {
                            cache: res.cache,
                            gamma: bn.gamma.clone(),
                        },
                    )
                }
                Phase::Eval => (bn_forward_infer(x, bn)?, LayerCache::BnEval { params: bn.clone() }),
            },
            LayerKind::Relu => (relu_forward(x), LayerCache::Plain),
            LayerKind::Relu6 => (relu6_forward(x), LayerCache::Plain),
            LayerKind::GlobalAvgPool => (global_average_pool(x)?, LayerCache::Plain),
            LayerKind::AddJunction { rhs, .. } => {
                let j = graph
                    .index_of(rhs)
                    .ok_or_else(|| Error::Graph(format!("unknown add input `{rhs}`")))?;
                (elementwise_add(x, &trace.outputs[j])?, LayerCache::Plain)
            }
            LayerKind::QuantPoint(qp) => {
                let cfg = if !qp.enabled {
                    None
                } else {
                    match qp.config.policy {
                        RangePolicy::WeightMinmaxPerTensor => Some(qp.config.with_range(x.min(), x.max())),
                        RangePolicy::ActivationEma => {
                            let calibrate = opts.phase == Phase::Train && opts.calibrate_activations;
                            if calibrate {
                                let next = update_activation_range(x, &qp.config)?;
                                mutations.push(Mutation::Quant(i, next.clone()));
                                Some(next)
                            } else if qp.config.initialized {
                                Some(qp.config.clone())
                            } else {
                                None
                            }
                        }
                    }
                };
                let y = match &cfg {
                    Some(c) => fake_quantize(x, c),
                    None => x.clone(),
                };
                (y, LayerCache::Quant { cfg })
            }
        };
        if !out.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("output of layer `{}`", layer.name)));
        }
        trace.outputs.push(out);
        trace.caches.push(cache);
    }
    Ok((trace, mutations))
}

/// Forward pass. In the training phase the graph's running statistics and
/// calibrated activation ranges are updated in place.
pub fn forward(graph: &mut ModelGraph, input: &Tensor, opts: ForwardOptions) -> Result<Trace> {
    let (trace, mutations) = run(graph, input, opts)?;
    for m in mutations {
        match m {
            Mutation::Bn(i, p) => {
                if let LayerKind::BatchNorm(bn) = &mut graph.layers[i].kind {
                    *bn = p;
                }
            }
            Mutation::Quant(i, cfg) => {
                if let LayerKind::QuantPoint(qp) = &mut graph.layers[i].kind {
                    qp.config = cfg;
                }
            }
        }
    }
    Ok(trace)
}

/// Evaluation-phase forward pass that keeps the caches for a reverse pass.
pub fn forward_eval(graph: &ModelGraph, input: &Tensor) -> Result<Trace> {
    Ok(run(graph, input, ForwardOptions::eval())?.0)
}

/// Evaluation-phase network output.
pub fn infer(graph: &ModelGraph, input: &Tensor) -> Result<Tensor> {
    let (trace, _) = run(graph, input, ForwardOptions::eval())?;
    Ok(trace.output().clone())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => *acc = elementwise_add(acc, &g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

fn ste(grad: Tensor, raw: &Tensor, cfg: &Option<QuantConfig>) -> Result<Tensor> {
    match cfg {
        Some(c) => quantize_backward(&grad, raw, c),
        None => Ok(grad),
    }
}

/// Reverse pass from `grad_output` (same shape as the network output).
pub fn backward(graph: &ModelGraph, trace: &Trace, grad_output: &Tensor) -> Result<Gradients> {
    let n_layers = graph.layers.len();
    if trace.caches.len() != n_layers {
        return Err(Error::Graph("trace does not belong to this graph".into()));
    }
    if grad_output.shape() != trace.output().shape() {
        return Err(shape_err(format!(
            "output grad {:?} vs output {:?}",
            grad_output.shape(),
            trace.output().shape()
        )));
    }
    if n_layers == 0 {
        return Ok(Gradients {
            layers: vec![],
            input: grad_output.clone(),
        });
    }
    let mut pending: Vec<Option<Tensor>> = vec![None; n_layers];
    pending[n_layers - 1] = Some(grad_output.clone());
    let mut grads: Vec<Option<LayerGrads>> = vec![None; n_layers];
    let mut grad_input: Option<Tensor> = None;

    for i in (0..n_layers).rev() {
        let Some(g) = pending[i].take() else { continue };
        let layer = &graph.layers[i];
        let src = graph.source_of(i);
        let x = trace.source(src);
        let gx = match (&layer.kind, &trace.caches[i]) {
            (
                LayerKind::Conv {
                    params,
                    stride,
                    padding,
                },
                LayerCache::Conv { effective, weight_cfg },
            ) => {
                let r = conv2d_backward(&g, x, effective, *stride, *padding)?;
                grads[i] = Some(LayerGrads::Weighted {
                    weights: ste(r.weights, &params.weights, weight_cfg)?,
                    bias: params.bias.as_ref().map(|_| r.bias),
                });
                r.input
            }
            (
                LayerKind::DepthwiseConv {
                    params,
                    stride,
                    padding,
                },
                LayerCache::Depthwise { effective, weight_cfg },
            ) => {
                let r = depthwise_conv2d_backward(&g, x, effective, *stride, *padding)?;
                grads[i] = Some(LayerGrads::Weighted {
                    weights: ste(r.weights, &params.weights, weight_cfg)?,
                    bias: params.bias.as_ref().map(|_| r.bias),
                });
                r.input
            }
            (
                LayerKind::Affine { weights, .. },
                LayerCache::Affine {
                    effective,
                    flat_input,
                    weight_cfg,
                },
            ) => {
                let (n, k, _, _) = g.dims4()?;
                let g2 = g.reshape(&[n, k])?;
                let r = affine_backward(&g2, flat_input, effective)?;
                grads[i] = Some(LayerGrads::Weighted {
                    weights: ste(r.weights, weights, weight_cfg)?,
                    bias: Some(r.bias),
                });
                r.input.into_reshaped(x.shape())?
            }
            (LayerKind::BatchNorm(_), LayerCache::BnTrain { cache, gamma }) => {
                let r = bn_backward_train(&g, cache, gamma)?;
                grads[i] = Some(LayerGrads::Bn {
                    gamma: r.gamma,
                    beta: r.beta,
                });
                r.input
            }
            (LayerKind::BatchNorm(_), LayerCache::BnEval { params }) => {
                let r = bn_backward_infer(&g, x, params)?;
                grads[i] = Some(LayerGrads::Bn {
                    gamma: r.gamma,
                    beta: r.beta,
                });
                r.input
            }
            (LayerKind::Relu, _) => relu_backward(&g, x)?,
            (LayerKind::Relu6, _) => relu6_backward(&g, x)?,
            (LayerKind::GlobalAvgPool, _) => global_average_pool_backward(&g, x.shape())?,
            (LayerKind::AddJunction { rhs, .. }, _) => {
                let j = graph
                    .index_of(rhs)
                    .ok_or_else(|| Error::Graph(format!("unknown add input `{rhs}`")))?;
                accumulate(&mut pending[j], g.clone())?;
                g
            }
            (LayerKind::QuantPoint(_), LayerCache::Quant { cfg }) => ste(g, x, cfg)?,
            _ => return Err(Error::Graph(format!("missing forward cache for `{}`", layer.name))),
        };
        match src {
            Source::Input => accumulate(&mut grad_input, gx)?,
            Source::Layer(j) => accumulate(&mut pending[j], gx)?,
        }
    }
    let input = grad_input.unwrap_or_else(|| Tensor::zeros(trace.input.shape()));
    Ok(Gradients {
        layers: grads,
        input,
    })
}

/// Network output reshaped to `N x K` logits.
pub fn logits(output: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = output.dims4()?;
    output.reshape(&[n, c * h * w])
}

/// Inverse of [`logits`] for a gradient.
pub fn logits_grad_to_output(grad: Tensor, output_shape: &[usize]) -> Result<Tensor> {
    grad.into_reshaped(output_shape)
}
