use super::Tensor;
use crate::error::{shape_err, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Full convolution parameters: weights `(out_ch, in_ch, kh, kw)` and an
/// optional per-output-channel bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
}

/// Depthwise convolution with channel multiplier 1: weights `(ch, 1, kh, kw)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthwiseConvParams {
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        let p = ConvParams { weights, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (oc, _, _, _) = self.weights.dims4()?;
        check_bias(&self.bias, oc)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }
}

impl DepthwiseConvParams {
    pub fn new(weights: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        let p = DepthwiseConvParams { weights, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (ch, mult, _, _) = self.weights.dims4()?;
        if mult != 1 {
            return Err(shape_err(format!("depthwise multiplier must be 1, got {mult}")));
        }
        check_bias(&self.bias, ch)
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// Equivalent full convolution with a block-diagonal kernel.
    pub fn to_full(&self) -> ConvParams {
        let (ch, _, kh, kw) = self.weights.dims4().expect("validated");
        let mut w = Tensor::zeros(&[ch, ch, kh, kw]);
        let src = self.weights.data();
        let dst = w.data_mut();
        for c in 0..ch {
            let k = kh * kw;
            dst[(c * ch + c) * k..(c * ch + c + 1) * k].copy_from_slice(&src[c * k..(c + 1) * k]);
        }
        ConvParams {
            weights: w,
            bias: self.bias.clone(),
        }
    }
}

fn check_bias(bias: &Option<Vec<f64>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(shape_err(format!(
            "bias length {} != channel count {channels}",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Output extent along one axis; `None` when the kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

/// Output indices `j` in `lo..hi` for which `j * stride + offset - pad`
/// lands inside `0..extent`.
fn valid_span(out: usize, stride: usize, pad: usize, offset: usize, extent: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = (extent + pad).saturating_sub(offset).div_ceil(stride).min(out);
    (lo, hi.max(lo))
}

impl Geometry {
    fn new(
        input: &Tensor,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let (_, _, h, w) = input.dims4()?;
        let oh = conv_output_extent(h, kh, stride.0, pad.0);
        let ow = conv_output_extent(w, kw, stride.1, pad.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Geometry {
                h,
                w,
                oh,
                ow,
                stride,
                pad,
            }),
            _ => Err(shape_err(format!(
                "kernel {kh}x{kw} stride {stride:?} pad {pad:?} does not fit input {h}x{w}"
            ))),
        }
    }

    fn rows(&self, u: usize) -> (usize, usize) {
        valid_span(self.oh, self.stride.0, self.pad.0, u, self.h)
    }

    fn cols(&self, v: usize) -> (usize, usize) {
        valid_span(self.ow, self.stride.1, self.pad.1, v, self.w)
    }

    /// Input index for output `j` at kernel offset `u`; `j` must be valid.
    #[inline]
    fn row(&self, j: usize, u: usize) -> usize {
        j * self.stride.0 + u - self.pad.0
    }

    #[inline]
    fn col(&self, k: usize, v: usize) -> usize {
        k * self.stride.1 + v - self.pad.1
    }

    /// `dst[j, k] += wv * x[row(j, u), col(k, v)]` over the valid outputs.
    #[inline]
    fn scatter_forward(&self, dst: &mut [f64], x: &[f64], wv: f64, u: usize, v: usize) {
        let (j0, j1) = self.rows(u);
        let (k0, k1) = self.cols(v);
        let sc = self.stride.1;
        for j in j0..j1 {
            let xr = &x[self.row(j, u) * self.w..];
            let out = &mut dst[j * self.ow..(j + 1) * self.ow];
            for k in k0..k1 {
                out[k] += wv * xr[k * sc + v - self.pad.1];
            }
        }
    }

    /// `Σ g[j, k] * x[row(j, u), col(k, v)]` over the valid outputs.
    #[inline]
    fn correlate(&self, g: &[f64], x: &[f64], u: usize, v: usize) -> f64 {
        let (j0, j1) = self.rows(u);
        let (k0, k1) = self.cols(v);
        let mut acc = 0.0;
        for j in j0..j1 {
            let xr = &x[self.row(j, u) * self.w..];
            let gr = &g[j * self.ow..(j + 1) * self.ow];
            for k in k0..k1 {
                acc += gr[k] * xr[self.col(k, v)];
            }
        }
        acc
    }

    /// `dx[row(j, u), col(k, v)] += wv * g[j, k]` over the valid outputs.
    #[inline]
    fn scatter_backward(&self, dx: &mut [f64], g: &[f64], wv: f64, u: usize, v: usize) {
        let (j0, j1) = self.rows(u);
        let (k0, k1) = self.cols(v);
        for j in j0..j1 {
            let r = self.row(j, u);
            let gr = &g[j * self.ow..(j + 1) * self.ow];
            let dr = &mut dx[r * self.w..(r + 1) * self.w];
            for k in k0..k1 {
                dr[self.col(k, v)] += wv * gr[k];
            }
        }
    }
}

/// Zero-padded 2-D convolution over an NCHW batch.
///
/// Each output element accumulates input channel by input channel, and
/// within a channel over the kernel in row-major order, then adds the bias.
pub fn conv2d_forward(
    input: &Tensor,
    params: &ConvParams,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    params.validate()?;
    input.check_finite("conv2d input")?;
    let (n, ci, _, _) = input.dims4()?;
    let (oc, wci, kh, kw) = params.weights.dims4()?;
    if ci != wci {
        return Err(shape_err(format!("conv2d expects {wci} input channels, got {ci}")));
    }
    let g = Geometry::new(input, kh, kw, stride, padding)?;
    let plane = g.oh * g.ow;
    let x = input.data();
    let w = params.weights.data();
    let mut out = Tensor::zeros(&[n, oc, g.oh, g.ow]);
    out.data_mut()
        .par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, o) = (idx / oc, idx % oc);
            for i in 0..ci {
                let xs = &x[(b * ci + i) * g.h * g.w..(b * ci + i + 1) * g.h * g.w];
                let wbase = (o * ci + i) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        g.scatter_forward(dst, xs, w[wbase + u * kw + v], u, v);
                    }
                }
            }
            if let Some(bv) = &params.bias {
                dst.iter_mut().for_each(|d| *d += bv[o]);
            }
        });
    Ok(out)
}

/// Reverse pass of [`conv2d_forward`] given the forward input.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    params: &ConvParams,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<ConvGrads> {
    let (n, ci, h, wd) = input.dims4()?;
    let (oc, wci, kh, kw) = params.weights.dims4()?;
    if ci != wci {
        return Err(shape_err(format!("conv2d expects {wci} input channels, got {ci}")));
    }
    let g = Geometry::new(input, kh, kw, stride, padding)?;
    if grad_out.shape() != [n, oc, g.oh, g.ow] {
        return Err(shape_err(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            [n, oc, g.oh, g.ow]
        )));
    }
    let x = input.data();
    let w = params.weights.data();
    let go = grad_out.data();
    let plane = g.oh * g.ow;
    let in_plane = h * wd;

    let bias: Vec<f64> = (0..oc)
        .map(|o| {
            (0..n)
                .map(|b| go[(b * oc + o) * plane..(b * oc + o + 1) * plane].iter().sum::<f64>())
                .sum()
        })
        .collect();

    let mut gw = Tensor::zeros(params.weights.shape());
    gw.data_mut()
        .par_chunks_mut((ci * kh * kw).max(1))
        .enumerate()
        .for_each(|(o, dst)| {
            for b in 0..n {
                let gs = &go[(b * oc + o) * plane..(b * oc + o + 1) * plane];
                for i in 0..ci {
                    let xs = &x[(b * ci + i) * in_plane..(b * ci + i + 1) * in_plane];
                    for u in 0..kh {
                        for v in 0..kw {
                            dst[(i * kh + u) * kw + v] += g.correlate(gs, xs, u, v);
                        }
                    }
                }
            }
        });

    let mut gi = Tensor::zeros(input.shape());
    gi.data_mut()
        .par_chunks_mut((ci * in_plane).max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            for o in 0..oc {
                let gs = &go[(b * oc + o) * plane..(b * oc + o + 1) * plane];
                for i in 0..ci {
                    let wbase = (o * ci + i) * kh * kw;
                    let dx = &mut dst[i * in_plane..(i + 1) * in_plane];
                    for u in 0..kh {
                        for v in 0..kw {
                            g.scatter_backward(dx, gs, w[wbase + u * kw + v], u, v);
                        }
                    }
                }
            }
        });

    Ok(ConvGrads {
        input: gi,
        weights: gw,
        bias,
    })
}

pub fn depthwise_conv2d_forward(
    input: &Tensor,
    params: &DepthwiseConvParams,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    params.validate()?;
    input.check_finite("depthwise input")?;
    let (n, ch, _, _) = input.dims4()?;
    let (wch, _, kh, kw) = params.weights.dims4()?;
    if ch != wch {
        return Err(shape_err(format!("depthwise expects {wch} channels, got {ch}")));
    }
    let g = Geometry::new(input, kh, kw, stride, padding)?;
    let plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let x = input.data();
    let w = params.weights.data();
    let mut out = Tensor::zeros(&[n, ch, g.oh, g.ow]);
    out.data_mut()
        .par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(idx, dst)| {
            let c = idx % ch;
            let xs = &x[idx * in_plane..(idx + 1) * in_plane];
            let wbase = c * kh * kw;
            for u in 0..kh {
                for v in 0..kw {
                    g.scatter_forward(dst, xs, w[wbase + u * kw + v], u, v);
                }
            }
            if let Some(bv) = &params.bias {
                dst.iter_mut().for_each(|d| *d += bv[c]);
            }
        });
    Ok(out)
}

pub fn depthwise_conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    params: &DepthwiseConvParams,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<ConvGrads> {
    let (n, ch, h, wd) = input.dims4()?;
    let (wch, _, kh, kw) = params.weights.dims4()?;
    if ch != wch {
        return Err(shape_err(format!("depthwise expects {wch} channels, got {ch}")));
    }
    let g = Geometry::new(input, kh, kw, stride, padding)?;
    if grad_out.shape() != [n, ch, g.oh, g.ow] {
        return Err(shape_err(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            [n, ch, g.oh, g.ow]
        )));
    }
    let x = input.data();
    let w = params.weights.data();
    let go = grad_out.data();
    let plane = g.oh * g.ow;
    let in_plane = h * wd;

    let bias: Vec<f64> = (0..ch)
        .map(|c| {
            (0..n)
                .map(|b| go[(b * ch + c) * plane..(b * ch + c + 1) * plane].iter().sum::<f64>())
                .sum()
        })
        .collect();

    let mut gw = Tensor::zeros(params.weights.shape());
    gw.data_mut()
        .par_chunks_mut((kh * kw).max(1))
        .enumerate()
        .for_each(|(c, dst)| {
            for b in 0..n {
                let idx = b * ch + c;
                let gs = &go[idx * plane..(idx + 1) * plane];
                let xs = &x[idx * in_plane..(idx + 1) * in_plane];
                for u in 0..kh {
                    for v in 0..kw {
                        dst[u * kw + v] += g.correlate(gs, xs, u, v);
                    }
                }
            }
        });

    let mut gi = Tensor::zeros(input.shape());
    gi.data_mut()
        .par_chunks_mut(in_plane.max(1))
        .enumerate()
        .for_each(|(idx, dst)| {
            let c = idx % ch;
            let gs = &go[idx * plane..(idx + 1) * plane];
            for u in 0..kh {
                for v in 0..kw {
                    g.scatter_backward(dst, gs, w[c * kh * kw + u * kw + v], u, v);
                }
            }
        });

    Ok(ConvGrads {
        input: gi,
        weights: gw,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn all_ones_3x3() {
        let p = ConvParams::new(ones(&[1, 1, 3, 3]), Some(vec![0.0])).unwrap();
        let y = conv2d_forward(&ones(&[1, 1, 3, 3]), &p, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn ramp_diagonal_stride_two() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = ConvParams::new(w, None).unwrap();
        let y = conv2d_forward(&x, &p, (2, 2), (0, 0)).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0, 21.0, 25.0]);
    }

    #[test]
    fn zero_kernel_gives_bias_map() {
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64).sin());
        let p = ConvParams::new(Tensor::zeros(&[2, 3, 3, 3]), Some(vec![0.7, -1.5])).unwrap();
        let y = conv2d_forward(&x, &p, (1, 1), (1, 1)).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let o = (i / 25) % 2;
            assert_eq!(*v, [0.7, -1.5][o]);
        }
    }

    #[test]
    fn one_by_one_ones_is_input_plus_bias() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| (i as f64 * 0.37).cos());
        let p = ConvParams::new(ones(&[1, 1, 1, 1]), Some(vec![0.25])).unwrap();
        let y = conv2d_forward(&x, &p, (1, 1), (0, 0)).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b + 0.25);
        }
    }

    #[test]
    fn scalar_backward_chain_rule() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap();
        let p = ConvParams::new(Tensor::new(vec![1, 1, 1, 1], vec![-2.0]).unwrap(), None).unwrap();
        let g = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let grads = conv2d_backward(&g, &x, &p, (1, 1), (0, 0)).unwrap();
        assert_eq!(grads.weights.data(), &[0.5 * 1.5]);
        assert_eq!(grads.input.data(), &[0.5 * -2.0]);
        assert_eq!(grads.bias, vec![0.5]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 * 0.1);
        let p = ConvParams::new(Tensor::from_fn(&[3, 2, 3, 3], |i| i as f64), None).unwrap();
        let g = Tensor::zeros(&[1, 3, 2, 2]);
        let grads = conv2d_backward(&g, &x, &p, (1, 1), (0, 0)).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = ConvParams::new(ones(&[1, 2, 3, 3]), None).unwrap();
        assert!(conv2d_forward(&ones(&[1, 1, 3, 3]), &p, (1, 1), (0, 0)).is_err());
        let p1 = ConvParams::new(ones(&[1, 1, 3, 3]), None).unwrap();
        assert!(conv2d_forward(&ones(&[1, 1, 2, 2]), &p1, (1, 1), (0, 0)).is_err());
        assert!(ConvParams::new(ones(&[2, 1, 3, 3]), Some(vec![0.0])).is_err());
        let bad = Tensor::new(vec![1, 1, 3, 3], vec![f64::INFINITY; 9]).unwrap();
        assert!(matches!(
            conv2d_forward(&bad, &p1, (1, 1), (0, 0)),
            Err(Error::NonFinite(_))
        ));
        let g = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_backward(&g, &ones(&[1, 1, 3, 3]), &p1, (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn depthwise_identity_and_zero_channel() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 - 7.0);
        let mut w = Tensor::zeros(&[2, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let p = DepthwiseConvParams::new(w, Some(vec![0.0, 2.5])).unwrap();
        let y = depthwise_conv2d_forward(&x, &p, (1, 1), (1, 1)).unwrap();
        assert_eq!(&y.data()[..16], &x.data()[..16]);
        assert!(y.data()[16..].iter().all(|&v| v == 2.5));
    }

    #[test]
    fn depthwise_rejects_multiplier() {
        assert!(DepthwiseConvParams::new(ones(&[2, 2, 3, 3]), None).is_err());
    }
}
