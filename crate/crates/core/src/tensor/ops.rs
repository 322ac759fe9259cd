use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// `y = x W + b` for `x: N x D`, `W: D x K`, `b: K`.
pub fn affine_forward(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    input.check_finite("affine input")?;
    let (n, d) = input.dims2()?;
    let (wd, k) = weights.dims2()?;
    if d != wd || bias.len() != k {
        return Err(shape_err(format!(
            "affine: input {:?}, weights {:?}, bias {}",
            input.shape(),
            weights.shape(),
            bias.len()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let mut out = Tensor::zeros(&[n, k]);
    let y = out.data_mut();
    for r in 0..n {
        for c in 0..k {
            let mut acc = 0.0;
            for i in 0..d {
                acc += x[r * d + i] * w[i * k + c];
            }
            y[r * k + c] = acc + bias[c];
        }
    }
    Ok(out)
}

pub fn affine_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor) -> Result<AffineGrads> {
    let (n, d) = input.dims2()?;
    let (wd, k) = weights.dims2()?;
    if d != wd || grad_out.shape() != [n, k] {
        return Err(shape_err(format!(
            "affine backward: grad {:?}, input {:?}, weights {:?}",
            grad_out.shape(),
            input.shape(),
            weights.shape()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();
    let mut gi = Tensor::zeros(&[n, d]);
    let mut gw = Tensor::zeros(&[d, k]);
    let mut gb = vec![0.0; k];
    for r in 0..n {
        for c in 0..k {
            let gv = g[r * k + c];
            gb[c] += gv;
            for i in 0..d {
                gi.data_mut()[r * d + i] += gv * w[i * k + c];
                gw.data_mut()[i * k + c] += gv * x[r * d + i];
            }
        }
    }
    Ok(AffineGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(input, |g, x| if x > 0.0 { g } else { 0.0 })
}

pub fn relu6_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.clamp(0.0, 6.0))
}

pub fn relu6_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(input, |g, x| if x > 0.0 && x < 6.0 { g } else { 0.0 })
}

/// NCHW -> N x C x 1 x 1 spatial mean.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let x = input.data();
    let data = (0..n * c)
        .map(|i| {
            let s = &x[i * plane..(i + 1) * plane];
            // a constant plane must come back bit-exact
            if s.iter().all(|&v| v == s[0]) {
                s[0]
            } else {
                s.iter().sum::<f64>() / plane as f64
            }
        })
        .collect();
    Tensor::new(vec![n, c, 1, 1], data)
}

pub fn global_average_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(shape_err(format!("expected rank-4 input shape, got {input_shape:?}")));
    };
    if grad_out.shape() != [n, c, 1, 1] {
        return Err(shape_err(format!("pool grad {:?}", grad_out.shape())));
    }
    let plane = h * w;
    let g = grad_out.data();
    Ok(Tensor::from_fn(input_shape, |i| g[i / plane] / plane as f64))
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

/// Mean softmax cross-entropy over a batch of logits `N x K`.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidParam(format!("label {bad} >= class count {k}")));
    }
    let z = logits.data();
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for r in 0..n {
        let row = &z[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[labels[r]];
        let g = &mut grad.data_mut()[r * k..(r + 1) * k];
        for c in 0..k {
            g[c] = (row[c] - log_denom).exp() / n as f64;
        }
        g[labels[r]] -= 1.0 / n as f64;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_and_zero() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(affine_forward(&x, &eye, &[0.0; 3]).unwrap(), x);
        let y = affine_forward(&x, &Tensor::zeros(&[3, 2]), &[1.0, -1.0]).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn relu_family() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.5, 7.0, 0.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.5, 7.0, 0.0]);
        assert_eq!(relu6_forward(&x).data(), &[0.0, 0.5, 6.0, 0.0]);
        let g = Tensor::full(&[4], 1.0);
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(relu6_backward(&g, &x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_of_constant_is_exact() {
        let x = Tensor::full(&[2, 3, 5, 7], 0.1);
        let p = global_average_pool(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::full(&[3, 5], 2.0);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        for r in 0..3 {
            let s: f64 = grad.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn add_commutes() {
        let a = Tensor::from_fn(&[2, 2], |i| i as f64 * 0.3);
        let b = Tensor::from_fn(&[2, 2], |i| 1.0 / (i as f64 + 1.0));
        assert_eq!(elementwise_add(&a, &b).unwrap(), elementwise_add(&b, &a).unwrap());
    }
}
