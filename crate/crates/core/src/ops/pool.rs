use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Winner positions recorded by `maxpool_forward`; one flat input offset per
/// output element, consumed by `maxpool_backward`.
#[derive(Clone, Debug)]
pub struct ArgmaxMap {
    input_shape: [usize; 4],
    output_shape: [usize; 4],
    winners: Vec<usize>,
}

impl ArgmaxMap {
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

/// Max pooling over `window` with `stride`. Ties resolve to the first
/// occurrence in row-major window scan order.
pub fn maxpool_forward(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, ArgmaxMap)> {
    let (batch, channels, in_h, in_w) = input.dims();
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidSpec(format!(
            "pool window {window:?} and stride {stride:?} must be >= 1"
        )));
    }
    if window.0 > in_h || window.1 > in_w {
        return Err(Error::InvalidSpec(format!(
            "pool window {:?} larger than input {}x{}",
            window, in_h, in_w
        )));
    }
    let out_h = (in_h - window.0) / stride.0 + 1;
    let out_w = (in_w - window.1) / stride.1 + 1;
    let mut out = Tensor::zeros([batch, channels, out_h, out_w]);
    let mut winners = Vec::with_capacity(out.len());
    for n in 0..batch {
        for c in 0..channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let y0 = oy * stride.0;
                    let x0 = ox * stride.1;
                    let mut best = input.at(n, c, y0, x0);
                    let mut best_at = input.offset(n, c, y0, x0);
                    for ky in 0..window.0 {
                        for kx in 0..window.1 {
                            let v = input.at(n, c, y0 + ky, x0 + kx);
                            if v > best {
                                best = v;
                                best_at = input.offset(n, c, y0 + ky, x0 + kx);
                            }
                        }
                    }
                    out.set(n, c, oy, ox, best);
                    winners.push(best_at);
                }
            }
        }
    }
    let map = ArgmaxMap {
        input_shape: input.shape(),
        output_shape: out.shape(),
        winners,
    };
    Ok((out, map))
}

/// Routes each output gradient to its recorded winner position; overlapping
/// windows accumulate.
pub fn maxpool_backward(map: &ArgmaxMap, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != map.output_shape {
        return Err(Error::ShapeMismatch(format!(
            "grad_out shape {:?} does not match pooled output {:?}",
            grad_out.shape(),
            map.output_shape
        )));
    }
    let mut grad_input = Tensor::zeros(map.input_shape);
    let gi = grad_input.data_mut();
    for (&winner, &g) in map.winners.iter().zip(grad_out.data().iter()) {
        gi[winner] += g;
    }
    Ok(grad_input)
}
