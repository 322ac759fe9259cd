//! Pruning of batch-norm channels whose running variance fell below ε.
//!
//! Such a channel emits (almost exactly) its shift β whatever the input, so
//! it can be removed once its constant contribution is moved into the
//! consumer: into the consumer's bias when it has one, otherwise into the
//! shift of the batch norm that follows the consumer. Depthwise consumers
//! turn a constant input channel into a constant output channel, so the
//! removal cascades through them into the next consumer.
//!
//! Removing a channel also removes whatever only existed to produce it:
//! the producer's output filter, and when the producer is depthwise, the
//! matching channel of every layer above it up to the nearest full conv.

use crate::bn::BNParams;
use crate::error::{Error, Result};
use crate::exec::forward_eval;
use crate::graph::{LayerKind, ModelGraph};
use crate::quant::fake_quantize;
use crate::tensor::Tensor;
use std::fmt::{self, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct PfqOptions {
    pub epsilon: f64,
    /// Pass the constant through enabled, calibrated activation quantizers.
    pub quantize_act_of_beta: bool,
    /// When false, channels are removed without compensation.
    pub bias_correction: bool,
}

impl PfqOptions {
    pub fn new(epsilon: f64) -> Self {
        PfqOptions {
            epsilon,
            quantize_act_of_beta: false,
            bias_correction: true,
        }
    }
}

impl Default for PfqOptions {
    fn default() -> Self {
        Self::new(crate::bn::DEFAULT_EPSILON)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneCandidate {
    pub bn_layer: String,
    pub channel: usize,
    pub running_var: f64,
    pub beta: f64,
    /// β after the activation (and any active quantizer) that follows.
    pub act_of_beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionKind {
    /// Added to the consumer's bias.
    Bias,
    /// Scaled into the shift of the batch norm after the consumer.
    Beta,
    /// The constant reaching the consumer is zero; nothing to add.
    ReluZero,
    /// Pruned with compensation disabled.
    Uncorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// The channel's path feeds an add junction.
    Residual,
    /// Every channel of the layer is a candidate.
    WouldEmpty,
    /// The constant reaches the network output with no consumer.
    Output,
    /// A depthwise chain reaches the network input.
    Input,
    /// Producing the channel would require removing affine output units.
    AffineProducer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pruned(CorrectionKind),
    Skipped(SkipReason),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Outcome::Pruned(CorrectionKind::Bias) => "bias",
            Outcome::Pruned(CorrectionKind::Beta) => "beta",
            Outcome::Pruned(CorrectionKind::ReluZero) => "none-relu-zero",
            Outcome::Pruned(CorrectionKind::Uncorrected) => "uncorrected",
            Outcome::Skipped(SkipReason::Residual) => "skip:residual",
            Outcome::Skipped(SkipReason::WouldEmpty) => "skip:would-empty",
            Outcome::Skipped(SkipReason::Output) => "skip:output",
            Outcome::Skipped(SkipReason::Input) => "skip:input",
            Outcome::Skipped(SkipReason::AffineProducer) => "skip:affine-producer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneEntry {
    pub layer: String,
    /// Channel index in the layer as it was when the layer was processed.
    pub channel: usize,
    pub running_var: f64,
    pub beta: f64,
    pub outcome: Outcome,
    /// Euclidean norm of the correction applied to the terminal consumer.
    pub u_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPruneSummary {
    pub layer: String,
    pub removed_channels: Vec<usize>,
    pub weights_removed: usize,
    pub macs_before: u64,
    pub macs_after: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneReport {
    pub entries: Vec<PruneEntry>,
    pub layers: Vec<LayerPruneSummary>,
    pub weights_before: usize,
    pub weights_after: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub macs_before: u64,
    pub macs_after: u64,
}

impl PruneReport {
    pub fn pruned(&self) -> impl Iterator<Item = &PruneEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.outcome, Outcome::Pruned(_)))
    }

    pub fn skipped(&self) -> impl Iterator<Item = &PruneEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.outcome, Outcome::Skipped(_)))
    }

    pub fn weights_removed(&self) -> usize {
        self.weights_before - self.weights_after
    }

    pub fn params_removed(&self) -> usize {
        self.params_before - self.params_after
    }

    pub fn percent_weights_removed(&self) -> f64 {
        if self.weights_before == 0 {
            0.0
        } else {
            100.0 * self.weights_removed() as f64 / self.weights_before as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,channel,kind,Vt,beta,U_norm\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{},{}",
                e.layer, e.channel, e.outcome, e.running_var, e.beta, e.u_norm
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "pruned channels: {} (skipped {})",
            self.pruned().count(),
            self.skipped().count()
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "  {}: removed {:?}, {} weights, MACs {} -> {}",
                l.layer, l.removed_channels, l.weights_removed, l.macs_before, l.macs_after
            );
        }
        let _ = writeln!(
            out,
            "weights: {} -> {} ({:.2}% removed)",
            self.weights_before,
            self.weights_after,
            self.percent_weights_removed()
        );
        let _ = writeln!(out, "params: {} -> {}", self.params_before, self.params_after);
        let _ = writeln!(out, "MACs: {} -> {}", self.macs_before, self.macs_after);
        out
    }
}

/// Sum of the kernel slice `w[o, c, :, :]` for every output `o`, times `act`.
pub fn compute_bias_correction(next_weights: &Tensor, channel: usize, act_of_beta: f64) -> Result<Vec<f64>> {
    let (oc, ic, kh, kw) = next_weights.dims4()?;
    if channel >= ic {
        return Err(Error::InvalidParam(format!(
            "channel {channel} out of {ic} input channels"
        )));
    }
    let w = next_weights.data();
    let k = kh * kw;
    Ok((0..oc)
        .map(|o| {
            let base = (o * ic + channel) * k;
            w[base..base + k].iter().sum::<f64>() * act_of_beta
        })
        .collect())
}

/// Affine analogue: the rows `channel * spatial .. (channel + 1) * spatial`
/// of a `D x K` weight matrix each carry the same constant.
pub fn compute_affine_correction(
    weights: &Tensor,
    channel: usize,
    spatial: usize,
    act_of_beta: f64,
) -> Result<Vec<f64>> {
    let (d, k) = weights.dims2()?;
    if (channel + 1) * spatial > d {
        return Err(Error::InvalidParam(format!(
            "channel {channel} x {spatial} rows out of {d}"
        )));
    }
    let w = weights.data();
    Ok((0..k)
        .map(|o| {
            (channel * spatial..(channel + 1) * spatial)
                .map(|r| w[r * k + o])
                .sum::<f64>()
                * act_of_beta
        })
        .collect())
}

/// Channels with running variance strictly below `epsilon`, in layer order
/// and then channel order.
pub fn scan_candidates(graph: &ModelGraph, epsilon: f64) -> Vec<PruneCandidate> {
    let mut out = Vec::new();
    for (i, layer, bn) in graph.batch_norm_layers() {
        for c in 0..bn.channels() {
            if bn.running_var[c] < epsilon {
                out.push(PruneCandidate {
                    bn_layer: layer.name.clone(),
                    channel: c,
                    running_var: bn.running_var[c],
                    beta: bn.beta[c],
                    act_of_beta: act_after(graph, i, bn.beta[c], true),
                });
            }
        }
    }
    out
}

/// Maps a constant through the element-wise layers that follow layer `i`.
fn act_after(graph: &ModelGraph, i: usize, mut v: f64, quantize: bool) -> f64 {
    for layer in &graph.layers[i + 1..] {
        match &layer.kind {
            LayerKind::Relu => v = v.max(0.0),
            LayerKind::Relu6 => v = v.clamp(0.0, 6.0),
            LayerKind::QuantPoint(qp) => {
                if quantize && qp.enabled && qp.config.initialized {
                    v = fake_quantize(&Tensor::full(&[1], v), &qp.config).data()[0];
                }
            }
            LayerKind::GlobalAvgPool => {}
            _ => break,
        }
    }
    v
}

enum Fail {
    Skip(SkipReason),
    Err(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Err(e)
    }
}

type PruneResult<T> = std::result::Result<T, Fail>;

/// Per-channel result of a successful removal.
struct ChannelResult {
    kind: CorrectionKind,
    u_norm: f64,
}

fn remove_from_bias(bias: &mut Option<Vec<f64>>, channels: &[usize]) {
    if let Some(b) = bias {
        *b = b
            .iter()
            .enumerate()
            .filter(|(i, _)| !channels.contains(i))
            .map(|(_, &v)| v)
            .collect();
    }
}

fn check_not_residual(graph: &ModelGraph, i: usize) -> PruneResult<()> {
    if graph.feeds_add_junction(i) {
        Err(Fail::Skip(SkipReason::Residual))
    } else {
        Ok(())
    }
}

/// Removes output channels `channels` from the producer of layer `below`'s
/// input, walking up through depthwise layers.
fn remove_upstream(graph: &mut ModelGraph, below: usize, channels: &[usize]) -> PruneResult<()> {
    let mut j = below;
    loop {
        if j == 0 {
            return Err(Fail::Skip(SkipReason::Input));
        }
        j -= 1;
        check_not_residual(graph, j)?;
        match &mut graph.layers[j].kind {
            LayerKind::Conv { params, .. } => {
                params.weights = params.weights.remove_indices(0, channels)?;
                remove_from_bias(&mut params.bias, channels);
                return Ok(());
            }
            LayerKind::DepthwiseConv { params, .. } => {
                params.weights = params.weights.remove_indices(0, channels)?;
                remove_from_bias(&mut params.bias, channels);
            }
            LayerKind::BatchNorm(bn) => *bn = bn.remove_channels(channels),
            LayerKind::Relu | LayerKind::Relu6 | LayerKind::QuantPoint(_) | LayerKind::GlobalAvgPool => {}
            LayerKind::Affine { .. } => return Err(Fail::Skip(SkipReason::AffineProducer)),
            LayerKind::AddJunction { .. } => return Err(Fail::Skip(SkipReason::Residual)),
        }
    }
}

/// Carries constant channels `(channel, value)` forward from the output of
/// layer `start` until a consumer absorbs them. `width` is the channel count
/// at `start` before removal.
fn propagate(
    graph: &mut ModelGraph,
    start: usize,
    mut values: Vec<(usize, f64)>,
    width: usize,
    opts: &PfqOptions,
) -> PruneResult<Vec<ChannelResult>> {
    let channels: Vec<usize> = values.iter().map(|&(c, _)| c).collect();
    check_not_residual(graph, start)?;
    let mut j = start + 1;
    loop {
        if j >= graph.layers.len() {
            return Err(Fail::Skip(SkipReason::Output));
        }
        let next_bn: Option<BNParams> = match graph.layers.get(j + 1).map(|l| &l.kind) {
            Some(LayerKind::BatchNorm(bn)) => Some(bn.clone()),
            _ => None,
        };
        match &mut graph.layers[j].kind {
            LayerKind::Relu => values.iter_mut().for_each(|(_, v)| *v = v.max(0.0)),
            LayerKind::Relu6 => values.iter_mut().for_each(|(_, v)| *v = v.clamp(0.0, 6.0)),
            LayerKind::GlobalAvgPool => {}
            LayerKind::QuantPoint(qp) => {
                if opts.quantize_act_of_beta && qp.enabled && qp.config.initialized {
                    for (_, v) in values.iter_mut() {
                        *v = fake_quantize(&Tensor::full(&[1], *v), &qp.config).data()[0];
                    }
                }
            }
            LayerKind::BatchNorm(bn) => {
                for (c, v) in values.iter_mut() {
                    *v = bn.infer_scalar(*c, *v);
                }
                *bn = bn.remove_channels(&channels);
            }
            LayerKind::AddJunction { .. } => return Err(Fail::Skip(SkipReason::Residual)),
            LayerKind::DepthwiseConv { params, .. } => {
                let (_, _, kh, kw) = params.weights.dims4()?;
                let k = kh * kw;
                let w = params.weights.data();
                let next: Vec<(usize, f64)> = values
                    .iter()
                    .map(|&(c, v)| {
                        let ksum: f64 = w[c * k..(c + 1) * k].iter().sum();
                        let b = params.bias.as_ref().map_or(0.0, |b| b[c]);
                        (c, ksum * v + b)
                    })
                    .collect();
                params.weights = params.weights.remove_indices(0, &channels)?;
                remove_from_bias(&mut params.bias, &channels);
                return propagate(graph, j, next, width, opts);
            }
            LayerKind::Conv { params, .. } => {
                let oc = params.out_channels();
                let mut total = vec![0.0; oc];
                let mut results = Vec::with_capacity(values.len());
                for &(c, v) in &values {
                    let u = compute_bias_correction(&params.weights, c, v)?;
                    total.iter_mut().zip(&u).for_each(|(t, x)| *t += x);
                    results.push((v, norm(&u)));
                }
                params.weights = params.weights.remove_indices(1, &channels)?;
                let kind = if !opts.bias_correction {
                    CorrectionKind::Uncorrected
                } else if let Some(b) = &mut params.bias {
                    b.iter_mut().zip(&total).for_each(|(b, u)| *b += u);
                    CorrectionKind::Bias
                } else if next_bn.is_some() {
                    let LayerKind::BatchNorm(bn) = &mut graph.layers[j + 1].kind else {
                        unreachable!("checked above")
                    };
                    for (o, u) in total.iter().enumerate() {
                        bn.beta[o] += bn.scale(o) * u;
                    }
                    CorrectionKind::Beta
                } else {
                    params.bias = Some(total);
                    CorrectionKind::Bias
                };
                return Ok(finish(results, kind));
            }
            LayerKind::Affine { weights, bias } => {
                let (d, _) = weights.dims2()?;
                let spatial = d / width;
                let mut results = Vec::with_capacity(values.len());
                let mut rows = Vec::new();
                let mut total = vec![0.0; bias.len()];
                for &(c, v) in &values {
                    let u = compute_affine_correction(weights, c, spatial, v)?;
                    total.iter_mut().zip(&u).for_each(|(t, x)| *t += x);
                    results.push((v, norm(&u)));
                    rows.extend(c * spatial..(c + 1) * spatial);
                }
                *weights = weights.remove_indices(0, &rows)?;
                let kind = if opts.bias_correction {
                    bias.iter_mut().zip(&total).for_each(|(b, u)| *b += u);
                    CorrectionKind::Bias
                } else {
                    CorrectionKind::Uncorrected
                };
                return Ok(finish(results, kind));
            }
        }
        check_not_residual(graph, j)?;
        j += 1;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn finish(results: Vec<(f64, f64)>, kind: CorrectionKind) -> Vec<ChannelResult> {
    results
        .into_iter()
        .map(|(value, u_norm)| ChannelResult {
            kind: if kind != CorrectionKind::Uncorrected && value == 0.0 {
                CorrectionKind::ReluZero
            } else {
                kind
            },
            u_norm,
        })
        .collect()
}

fn prune_bn_channels(
    graph: &mut ModelGraph,
    b: usize,
    channels: &[usize],
    opts: &PfqOptions,
) -> PruneResult<Vec<ChannelResult>> {
    let LayerKind::BatchNorm(bn) = &graph.layers[b].kind else {
        return Err(Fail::Err(Error::Graph(format!(
            "layer `{}` is not a batch norm",
            graph.layers[b].name
        ))));
    };
    let bn = bn.clone();
    let width = bn.channels();
    remove_upstream(graph, b, channels)?;
    if let LayerKind::BatchNorm(p) = &mut graph.layers[b].kind {
        *p = p.remove_channels(channels);
    }
    let values = channels.iter().map(|&c| (c, bn.beta[c])).collect();
    let results = propagate(graph, b, values, width, opts)?;
    graph.validate()?;
    Ok(results)
}

fn process_bn(
    graph: &mut ModelGraph,
    b: usize,
    channels: &[usize],
    opts: &PfqOptions,
    report: &mut PruneReport,
) -> Result<()> {
    let layer = graph.layers[b].name.clone();
    let LayerKind::BatchNorm(bn) = &graph.layers[b].kind else {
        return Err(Error::Graph(format!("layer `{layer}` is not a batch norm")));
    };
    let bn = bn.clone();
    let entry = |c: usize, outcome: Outcome, u_norm: f64| PruneEntry {
        layer: layer.clone(),
        channel: c,
        running_var: bn.running_var[c],
        beta: bn.beta[c],
        outcome,
        u_norm,
    };
    if channels.is_empty() {
        return Ok(());
    }
    if channels.len() >= bn.channels() {
        for &c in channels {
            report.entries.push(entry(c, Outcome::Skipped(SkipReason::WouldEmpty), 0.0));
        }
        return Ok(());
    }
    let mut trial = graph.clone();
    match prune_bn_channels(&mut trial, b, channels, opts) {
        Ok(results) => {
            for (&c, r) in channels.iter().zip(results) {
                report.entries.push(entry(c, Outcome::Pruned(r.kind), r.u_norm));
            }
            report.layers.push(LayerPruneSummary {
                layer: layer.clone(),
                removed_channels: channels.to_vec(),
                weights_removed: graph.weight_count() - trial.weight_count(),
                macs_before: graph.count_macs()?,
                macs_after: trial.count_macs()?,
            });
            *graph = trial;
            Ok(())
        }
        Err(Fail::Skip(reason)) => {
            for &c in channels {
                report.entries.push(entry(c, Outcome::Skipped(reason), 0.0));
            }
            Ok(())
        }
        Err(Fail::Err(e)) => Err(e),
    }
}

fn begin_report(graph: &ModelGraph) -> Result<PruneReport> {
    Ok(PruneReport {
        weights_before: graph.weight_count(),
        params_before: graph.param_count(),
        macs_before: graph.count_macs()?,
        ..PruneReport::default()
    })
}

fn end_report(graph: &ModelGraph, report: &mut PruneReport) -> Result<()> {
    report.weights_after = graph.weight_count();
    report.params_after = graph.param_count();
    report.macs_after = graph.count_macs()?;
    Ok(())
}

/// Removes every batch-norm channel with `Vᵗ < ε` and compensates its
/// consumer. Layers are processed in order; channel indices in the report
/// refer to each layer as it stood when it was processed.
pub fn apply_pfq(graph: &ModelGraph, opts: &PfqOptions) -> Result<(ModelGraph, PruneReport)> {
    graph.validate()?;
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidParam(format!("epsilon must be > 0, got {}", opts.epsilon)));
    }
    let mut g = graph.clone();
    let mut report = begin_report(&g)?;
    for b in 0..g.layers.len() {
        let channels: Vec<usize> = match &g.layers[b].kind {
            LayerKind::BatchNorm(bn) => (0..bn.channels())
                .filter(|&c| bn.running_var[c] < opts.epsilon)
                .collect(),
            _ => continue,
        };
        process_bn(&mut g, b, &channels, opts, &mut report)?;
    }
    end_report(&g, &mut report)?;
    Ok((g, report))
}

/// Removes the given channels of one batch norm regardless of their
/// variance, using the same compensation rules as [`apply_pfq`].
pub fn prune_selected(
    graph: &ModelGraph,
    bn_layer: &str,
    channels: &[usize],
    opts: &PfqOptions,
) -> Result<(ModelGraph, PruneReport)> {
    graph.validate()?;
    let b = graph
        .index_of(bn_layer)
        .ok_or_else(|| Error::Graph(format!("no layer `{bn_layer}`")))?;
    let mut sorted = channels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let LayerKind::BatchNorm(bn) = &graph.layers[b].kind {
        if let Some(&c) = sorted.iter().find(|&&c| c >= bn.channels()) {
            return Err(Error::InvalidParam(format!("channel {c} out of {}", bn.channels())));
        }
    }
    let mut g = graph.clone();
    let mut report = begin_report(&g)?;
    process_bn(&mut g, b, &sorted, opts, &mut report)?;
    end_report(&g, &mut report)?;
    Ok((g, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstancyRow {
    pub layer: String,
    pub channel: usize,
    pub running_var: f64,
    /// max - min of the batch norm's inference output over batch and space.
    pub spread: f64,
}

/// Output spread of every batch-norm channel over a probe batch.
pub fn channel_constancy_report(graph: &ModelGraph, batch: &Tensor) -> Result<Vec<ConstancyRow>> {
    let trace = forward_eval(graph, batch)?;
    let mut rows = Vec::new();
    for (i, layer, bn) in graph.batch_norm_layers() {
        let out = trace.layer_output(i);
        let (n, c, h, w) = out.dims4()?;
        let plane = h * w;
        let y = out.data();
        for ch in 0..c {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in 0..n {
                for &v in &y[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            rows.push(ConstancyRow {
                layer: layer.name.clone(),
                channel: ch,
                running_var: bn.running_var[ch],
                spread: hi - lo,
            });
        }
    }
    Ok(rows)
}

pub fn constancy_csv(rows: &[ConstancyRow]) -> String {
    let mut out = String::from("layer,channel,Vt,spread\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:e},{:e}", r.layer, r.channel, r.running_var, r.spread);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_correction_hand_value() {
        // kernel slice for channel 1 sums to 0.8; ReLU(0.5) = 0.5
        let w = Tensor::new(vec![1, 2, 1, 2], vec![9.0, 9.0, 0.3, 0.5]).unwrap();
        let u = compute_bias_correction(&w, 1, 0.5f64.max(0.0)).unwrap();
        assert!((u[0] - 0.4).abs() < 1e-15);
        let u = compute_bias_correction(&w, 1, (-1.0f64).max(0.0)).unwrap();
        assert_eq!(u, vec![0.0]);
        let z = Tensor::zeros(&[3, 2, 3, 3]);
        assert_eq!(compute_bias_correction(&z, 0, 7.0).unwrap(), vec![0.0; 3]);
        assert!(compute_bias_correction(&z, 2, 1.0).is_err());
    }

    #[test]
    fn outcome_labels() {
        assert_eq!(Outcome::Pruned(CorrectionKind::ReluZero).to_string(), "none-relu-zero");
        assert_eq!(Outcome::Skipped(SkipReason::Residual).to_string(), "skip:residual");
    }
}
