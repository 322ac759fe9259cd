//! Uniform min/max fake quantization with straight-through gradients.
//!
//! The step is `(upper - lower) / 2^n`, so a range carries `2^n + 1` grid
//! points including both endpoints. Rounding is half away from zero.

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ACT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    /// Range read from the live tensor on every forward pass.
    WeightMinmaxPerTensor,
    /// Exponential moving average of observed batch min/max.
    ActivationEma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteMode {
    /// Identity inside `[lower, upper]`, zero outside.
    Clipped,
    /// Identity everywhere.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub lower: f64,
    pub upper: f64,
    pub policy: RangePolicy,
    pub ema_momentum: f64,
    pub ste: SteMode,
    /// False until the range has been observed at least once.
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum QuantTarget {
    Weights(String),
    Activations(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPoint {
    pub target: QuantTarget,
    pub config: QuantConfig,
    pub enabled: bool,
}

impl QuantConfig {
    pub fn new(bits: u32, lower: f64, upper: f64) -> Result<Self> {
        let cfg = QuantConfig {
            bits,
            lower,
            upper,
            policy: RangePolicy::WeightMinmaxPerTensor,
            ema_momentum: DEFAULT_ACT_MOMENTUM,
            ste: SteMode::Clipped,
            initialized: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Weight quantizer; its range is refreshed from the tensor on use.
    pub fn weights(bits: u32) -> Self {
        QuantConfig {
            bits,
            lower: 0.0,
            upper: 0.0,
            policy: RangePolicy::WeightMinmaxPerTensor,
            ema_momentum: DEFAULT_ACT_MOMENTUM,
            ste: SteMode::Clipped,
            initialized: false,
        }
    }

    /// Activation quantizer awaiting its first observation.
    pub fn activations(bits: u32, momentum: f64) -> Self {
        QuantConfig {
            bits,
            lower: 0.0,
            upper: 0.0,
            policy: RangePolicy::ActivationEma,
            ema_momentum: momentum,
            ste: SteMode::Clipped,
            initialized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=30).contains(&self.bits) {
            return Err(Error::InvalidParam(format!("bit width {} outside 1..=30", self.bits)));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::InvalidParam(format!(
                "EMA momentum {} outside (0,1)",
                self.ema_momentum
            )));
        }
        if self.initialized && !(self.upper > self.lower) {
            return Err(Error::DegenerateRange {
                lower: self.lower,
                upper: self.upper,
            });
        }
        if !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::NonFinite("quantization range".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn scale(&self) -> f64 {
        (self.upper - self.lower) / self.levels() as f64
    }

    pub fn with_range(&self, lower: f64, upper: f64) -> QuantConfig {
        QuantConfig {
            lower,
            upper,
            initialized: true,
            ..self.clone()
        }
    }

    /// Quantizes one value. Assumes a validated, non-degenerate range.
    #[inline]
    pub fn quantize_scalar(&self, x: f64) -> f64 {
        let scale = self.scale();
        let clamped = x.clamp(self.lower, self.upper);
        let q = ((clamped - self.lower) / scale).round() * scale + self.lower;
        // k * scale + lower can land one ulp past the upper limit
        q.min(self.upper)
    }

    #[inline]
    fn passes(&self, x: f64) -> bool {
        match self.ste {
            SteMode::Plain => true,
            SteMode::Clipped => x >= self.lower && x <= self.upper,
        }
    }
}

fn check_range(cfg: &QuantConfig) -> Result<()> {
    if !(cfg.upper > cfg.lower) {
        return Err(Error::DegenerateRange {
            lower: cfg.lower,
            upper: cfg.upper,
        });
    }
    cfg.validate()
}

pub fn quantize(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    check_range(cfg)?;
    Ok(x.map(|v| cfg.quantize_scalar(v)))
}

/// Straight-through gradient of [`quantize`].
pub fn quantize_backward(grad_out: &Tensor, x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    grad_out.zip_map(x, |g, v| if cfg.passes(v) { g } else { 0.0 })
}

/// Folds one observed tensor into an EMA activation range. The first
/// observation sets the range outright.
pub fn update_activation_range(observed: &Tensor, cfg: &QuantConfig) -> Result<QuantConfig> {
    if cfg.policy != RangePolicy::ActivationEma {
        return Err(Error::InvalidParam(
            "range updates apply to activation_ema quantizers only".into(),
        ));
    }
    if observed.is_empty() {
        return Ok(cfg.clone());
    }
    let (lo, hi) = (observed.min(), observed.max());
    let mut next = cfg.clone();
    if cfg.initialized {
        let mu = cfg.ema_momentum;
        next.lower = cfg.lower * mu + lo * (1.0 - mu);
        next.upper = cfg.upper * mu + hi * (1.0 - mu);
    } else {
        next.lower = lo;
        next.upper = hi;
        next.initialized = true;
    }
    Ok(next)
}

/// Applies a quantizer the way the executor does: a degenerate range can
/// only hold one value, so it collapses to a clamp.
pub fn fake_quantize(x: &Tensor, cfg: &QuantConfig) -> Tensor {
    if cfg.upper > cfg.lower {
        x.map(|v| cfg.quantize_scalar(v))
    } else {
        x.map(|v| v.clamp(cfg.lower, cfg.upper))
    }
}

/// Where quantizers go and how they are configured.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlacement {
    pub act_bits: u32,
    pub weight_bits: u32,
    pub act_momentum: f64,
    pub enable_activations: bool,
    pub enable_weights: bool,
}

impl QuantPlacement {
    pub fn new(act_bits: u32, weight_bits: u32) -> Self {
        QuantPlacement {
            act_bits,
            weight_bits,
            act_momentum: DEFAULT_ACT_MOMENTUM,
            enable_activations: true,
            enable_weights: true,
        }
    }
}

/// Inserts activation quantizers after every activation and pooling output
/// except the network output and add-junction outputs, and attaches a
/// weight quantizer to every conv, depthwise conv and affine layer.
///
/// Existing quantizers are kept and only have their bit widths and enable
/// flags refreshed, so the call is idempotent.
pub fn insert_quant_points(graph: &ModelGraph, placement: &QuantPlacement) -> Result<ModelGraph> {
    let probe = QuantConfig::activations(placement.act_bits, placement.act_momentum);
    probe.validate()?;
    QuantConfig::weights(placement.weight_bits).validate()?;

    let src = &graph.layers;
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(src.len() * 2);
    for (i, layer) in src.iter().enumerate() {
        let mut layer = layer.clone();
        match &mut layer.kind {
            LayerKind::QuantPoint(qp) => {
                if let QuantTarget::Activations(_) = qp.target {
                    if qp.config.bits != placement.act_bits {
                        qp.config = QuantConfig::activations(placement.act_bits, placement.act_momentum);
                    }
                    qp.enabled = placement.enable_activations;
                }
                layers.push(layer);
                continue;
            }
            kind if kind.has_weights() => {
                let bits = placement.weight_bits;
                let point = match layer.weight_quant.take() {
                    Some(mut qp) => {
                        qp.config.bits = bits;
                        qp.enabled = placement.enable_weights;
                        qp
                    }
                    None => QuantPoint {
                        target: QuantTarget::Weights(layer.name.clone()),
                        config: QuantConfig::weights(bits),
                        enabled: placement.enable_weights,
                    },
                };
                layer.weight_quant = Some(point);
            }
            _ => {}
        }
        let wants_act_point = matches!(
            layer.kind,
            LayerKind::Relu | LayerKind::Relu6 | LayerKind::GlobalAvgPool
        );
        let is_last = i + 1 == src.len();
        let already = matches!(src.get(i + 1), Some(LayerSpec { kind: LayerKind::QuantPoint(_), .. }));
        let name = layer.name.clone();
        layers.push(layer);
        if wants_act_point && !is_last && !already {
            layers.push(LayerSpec::new(
                format!("{name}.aq"),
                LayerKind::QuantPoint(QuantPoint {
                    target: QuantTarget::Activations(name),
                    config: probe.clone(),
                    enabled: placement.enable_activations,
                }),
            ));
        }
    }
    ModelGraph::new(graph.input_shape, layers)
}

/// Turns every weight quantizer on or off.
pub fn set_weight_quant_enabled(graph: &mut ModelGraph, enabled: bool) {
    for layer in &mut graph.layers {
        if let Some(qp) = &mut layer.weight_quant {
            qp.enabled = enabled;
        }
    }
}

pub fn set_activation_quant_enabled(graph: &mut ModelGraph, enabled: bool) {
    for layer in &mut graph.layers {
        if let LayerKind::QuantPoint(qp) = &mut layer.kind {
            qp.enabled = enabled;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bits: u32, lo: f64, hi: f64) -> QuantConfig {
        QuantConfig::new(bits, lo, hi).unwrap()
    }

    #[test]
    fn two_bit_unit_range() {
        let c = cfg(2, 0.0, 1.0);
        assert_eq!(c.scale(), 0.25);
        assert_eq!(c.quantize_scalar(0.3), 0.25);
        assert_eq!(c.quantize_scalar(0.0), 0.0);
        assert_eq!(c.quantize_scalar(1.0), 1.0);
        assert_eq!(c.quantize_scalar(1.7), 1.0);
        assert_eq!(c.quantize_scalar(-3.0), 0.0);
        // half away from zero
        assert_eq!(c.quantize_scalar(0.125), 0.25);
    }

    #[test]
    fn endpoints_are_grid_points() {
        let c = cfg(3, 0.1, 0.7);
        assert_eq!(c.quantize_scalar(0.1), 0.1);
        assert_eq!(c.quantize_scalar(0.7), 0.7);
    }

    #[test]
    fn degenerate_range_rejected() {
        assert!(QuantConfig::new(4, 1.0, 1.0).is_err());
        let mut c = QuantConfig::weights(4);
        c.lower = 2.0;
        c.upper = 2.0;
        assert!(matches!(
            quantize(&Tensor::zeros(&[1]), &c),
            Err(Error::DegenerateRange { .. })
        ));
        assert!(QuantConfig::new(0, 0.0, 1.0).is_err());
    }

    #[test]
    fn ste_masks() {
        let c = cfg(4, -1.0, 1.0);
        let x = Tensor::new(vec![4], vec![-2.0, -1.0, 0.3, 1.5]).unwrap();
        let g = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gi = quantize_backward(&g, &x, &c).unwrap();
        assert_eq!(gi.data(), &[0.0, 2.0, 3.0, 0.0]);
        let plain = QuantConfig { ste: SteMode::Plain, ..c };
        assert_eq!(quantize_backward(&g, &x, &plain).unwrap(), g);
    }

    #[test]
    fn ema_two_batches() {
        let c = QuantConfig::activations(4, 0.9);
        let a = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, 1.0, 4.0]).unwrap();
        let c1 = update_activation_range(&a, &c).unwrap();
        assert!(c1.initialized);
        assert_eq!((c1.lower, c1.upper), (-1.0, 2.0));
        let c2 = update_activation_range(&b, &c1).unwrap();
        assert!((c2.lower - (-0.9 + 0.5 * 0.1)).abs() < 1e-15);
        assert!((c2.upper - (2.0 * 0.9 + 4.0 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn ema_constant_stream_converges() {
        let mut c = QuantConfig::activations(4, 0.5);
        let x = Tensor::new(vec![2], vec![0.25, 3.0]).unwrap();
        for _ in 0..60 {
            c = update_activation_range(&x, &c).unwrap();
        }
        assert!((c.lower - 0.25).abs() < 1e-12 && (c.upper - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_weight_policy() {
        let c = QuantConfig::weights(4);
        assert!(update_activation_range(&Tensor::zeros(&[1]), &c).is_err());
    }
}
