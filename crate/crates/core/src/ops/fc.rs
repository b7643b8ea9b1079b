use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_fc_args(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<(usize, usize, usize)> {
    let (batch, c, h, w) = input.dims();
    let features = c * h * w;
    let (out_f, in_f, wh, ww) = weights.dims();
    if wh != 1 || ww != 1 {
        return Err(Error::ShapeMismatch(format!(
            "fc weights must be (out, in, 1, 1), got {:?}",
            weights.shape()
        )));
    }
    if in_f != features {
        return Err(Error::ShapeMismatch(format!(
            "fc weights expect {} input features but input {:?} flattens to {}",
            in_f,
            input.shape(),
            features
        )));
    }
    if bias.len() != out_f {
        return Err(Error::ShapeMismatch(format!(
            "fc bias length {} does not match {} output features",
            bias.len(),
            out_f
        )));
    }
    Ok((batch, features, out_f))
}

/// Fully connected layer: flattens `(n, c, h, w)` row-major to `(n, c*h*w)`
/// and applies `y = W x + b`, producing `(n, out, 1, 1)`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (batch, features, out_f) = check_fc_args(input, weights, bias)?;
    let mut out = Tensor::zeros([batch, out_f, 1, 1]);
    let wdata = weights.data();
    for n in 0..batch {
        let x = &input.data()[n * features..(n + 1) * features];
        let y = &mut out.data_mut()[n * out_f..(n + 1) * out_f];
        for (o, yo) in y.iter_mut().enumerate() {
            let wrow = &wdata[o * features..(o + 1) * features];
            let mut acc = bias[o];
            for (wv, xv) in wrow.iter().zip(x.iter()) {
                acc += wv * xv;
            }
            *yo = acc;
        }
    }
    Ok(out)
}

/// Adjoints of `fc_forward`; `grad_input` comes back in the input's
/// original 4-D shape.
pub fn fc_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let (out_f, features, _, _) = weights.dims();
    let bias_probe = vec![0.0f32; out_f];
    let (batch, checked_features, checked_out) = check_fc_args(input, weights, &bias_probe)?;
    debug_assert_eq!(features, checked_features);
    if grad_out.shape() != [batch, checked_out, 1, 1] {
        return Err(Error::ShapeMismatch(format!(
            "fc grad_out shape {:?} does not match output ({batch}, {checked_out}, 1, 1)",
            grad_out.shape()
        )));
    }
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![0.0f32; out_f];
    let wdata = weights.data();
    for n in 0..batch {
        let x = &input.data()[n * features..(n + 1) * features];
        let gy = &grad_out.data()[n * out_f..(n + 1) * out_f];
        let gx = &mut grad_input.data_mut()[n * features..(n + 1) * features];
        for (o, &g) in gy.iter().enumerate() {
            grad_bias[o] += g;
            let wrow = &wdata[o * features..(o + 1) * features];
            let gwrow = &mut grad_weights.data_mut()[o * features..(o + 1) * features];
            for k in 0..features {
                gwrow[k] += g * x[k];
                gx[k] += g * wrow[k];
            }
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}
