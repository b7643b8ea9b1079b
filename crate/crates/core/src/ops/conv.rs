use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

struct ConvDims {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    patch: usize,   // in_c * kh * kw
    out_len: usize, // out_h * out_w
}

fn check_conv_args(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    spec: &ConvSpec,
) -> Result<ConvDims> {
    spec.validate()?;
    let (batch, in_c, in_h, in_w) = input.dims();
    let (w_out, w_in, w_kh, w_kw) = weights.dims();
    if w_out != spec.out_channels || (w_kh, w_kw) != spec.kernel {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} do not match spec (out_channels {}, kernel {:?})",
            weights.shape(),
            spec.out_channels,
            spec.kernel
        )));
    }
    if w_in != in_c {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels but weights {:?} expect {}",
            in_c,
            weights.shape(),
            w_in
        )));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::ShapeMismatch(format!(
            "bias length {} does not match {} output channels",
            bias.len(),
            spec.out_channels
        )));
    }
    let (out_h, out_w) = spec.output_extent(in_h, in_w)?;
    Ok(ConvDims {
        batch,
        in_c,
        in_h,
        in_w,
        out_c: spec.out_channels,
        out_h,
        out_w,
        patch: in_c * spec.kernel.0 * spec.kernel.1,
        out_len: out_h * out_w,
    })
}

/// Writes the im2col patch matrix for one batch element: row `k` holds the
/// input tap `(ic, ki, kj)` at every output position, zero where the
/// (dilated, padded) tap falls outside the input.
fn fill_patch_matrix(
    image: &[f32],
    dims: &ConvDims,
    spec: &ConvSpec,
    cols: &mut [f32],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let rate = spec.rate;
    let mut k = 0;
    for ic in 0..dims.in_c {
        let plane = &image[ic * dims.in_h * dims.in_w..(ic + 1) * dims.in_h * dims.in_w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[k * dims.out_len..(k + 1) * dims.out_len];
                let mut l = 0;
                for oy in 0..dims.out_h {
                    let iy = (oy * sh + ki * rate) as isize - ph as isize;
                    if iy < 0 || iy >= dims.in_h as isize {
                        row[l..l + dims.out_w].fill(0.0);
                        l += dims.out_w;
                        continue;
                    }
                    let line = &plane[iy as usize * dims.in_w..(iy as usize + 1) * dims.in_w];
                    for ox in 0..dims.out_w {
                        let ix = (ox * sw + kj * rate) as isize - pw as isize;
                        row[l] = if ix < 0 || ix >= dims.in_w as isize {
                            0.0
                        } else {
                            line[ix as usize]
                        };
                        l += 1;
                    }
                }
                k += 1;
            }
        }
    }
}

/// Adjoint of `fill_patch_matrix`: scatter-adds patch-matrix gradients back
/// onto the input image.
fn scatter_patch_matrix(
    cols: &[f32],
    dims: &ConvDims,
    spec: &ConvSpec,
    image_grad: &mut [f32],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let rate = spec.rate;
    let mut k = 0;
    for ic in 0..dims.in_c {
        let plane = &mut image_grad[ic * dims.in_h * dims.in_w..(ic + 1) * dims.in_h * dims.in_w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[k * dims.out_len..(k + 1) * dims.out_len];
                let mut l = 0;
                for oy in 0..dims.out_h {
                    let iy = (oy * sh + ki * rate) as isize - ph as isize;
                    if iy < 0 || iy >= dims.in_h as isize {
                        l += dims.out_w;
                        continue;
                    }
                    let line =
                        &mut plane[iy as usize * dims.in_w..(iy as usize + 1) * dims.in_w];
                    for ox in 0..dims.out_w {
                        let ix = (ox * sw + kj * rate) as isize - pw as isize;
                        if ix >= 0 && ix < dims.in_w as isize {
                            line[ix as usize] += row[l];
                        }
                        l += 1;
                    }
                }
                k += 1;
            }
        }
    }
}

/// 2-D cross-correlation with dilation, stride and zero padding, lowered to
/// a patch-matrix product. Matches `conv2d_reference` term for term: both
/// accumulate taps in ascending `(ic, ki, kj)` order.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    spec: &ConvSpec,
) -> Result<Tensor> {
    let dims = check_conv_args(input, weights, bias, spec)?;
    let mut out = Tensor::zeros([dims.batch, dims.out_c, dims.out_h, dims.out_w]);
    let mut cols = vec![0.0f32; dims.patch * dims.out_len];
    let in_plane = dims.in_c * dims.in_h * dims.in_w;
    let out_plane = dims.out_c * dims.out_len;
    let wdata = weights.data();
    for n in 0..dims.batch {
        fill_patch_matrix(
            &input.data()[n * in_plane..(n + 1) * in_plane],
            &dims,
            spec,
            &mut cols,
        );
        let out_block = &mut out.data_mut()[n * out_plane..(n + 1) * out_plane];
        for oc in 0..dims.out_c {
            let orow = &mut out_block[oc * dims.out_len..(oc + 1) * dims.out_len];
            orow.fill(bias[oc]);
            let wrow = &wdata[oc * dims.patch..(oc + 1) * dims.patch];
            for (k, &wk) in wrow.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let crow = &cols[k * dims.out_len..(k + 1) * dims.out_len];
                for (o, c) in orow.iter_mut().zip(crow.iter()) {
                    *o += wk * c;
                }
            }
        }
    }
    Ok(out)
}

/// Naive quadruple-loop convolution used as the test oracle. No lowering,
/// no shortcuts; deterministic bit for bit given its inputs.
pub fn conv2d_reference(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    spec: &ConvSpec,
) -> Result<Tensor> {
    let dims = check_conv_args(input, weights, bias, spec)?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let rate = spec.rate;
    let mut out = Tensor::zeros([dims.batch, dims.out_c, dims.out_h, dims.out_w]);
    for n in 0..dims.batch {
        for (oc, &channel_bias) in bias.iter().enumerate() {
            for oy in 0..dims.out_h {
                for ox in 0..dims.out_w {
                    let mut acc = channel_bias;
                    for ic in 0..dims.in_c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * sh + ki * rate) as isize - ph as isize;
                                let ix = (ox * sw + kj * rate) as isize - pw as isize;
                                if iy >= 0
                                    && iy < dims.in_h as isize
                                    && ix >= 0
                                    && ix < dims.in_w as isize
                                {
                                    acc += input.at(n, ic, iy as usize, ix as usize)
                                        * weights.at(oc, ic, ki, kj);
                                }
                            }
                        }
                    }
                    out.set(n, oc, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoints of `conv2d_forward`'s linear map: gradients with respect
/// to the input, the weights and the bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let bias_probe = vec![0.0f32; spec.out_channels];
    let dims = check_conv_args(input, weights, &bias_probe, spec)?;
    let expected = [dims.batch, dims.out_c, dims.out_h, dims.out_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            expected
        )));
    }

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![0.0f32; dims.out_c];
    let mut cols = vec![0.0f32; dims.patch * dims.out_len];
    let mut grad_cols = vec![0.0f32; dims.patch * dims.out_len];
    let in_plane = dims.in_c * dims.in_h * dims.in_w;
    let out_plane = dims.out_c * dims.out_len;
    let wdata = weights.data();

    for n in 0..dims.batch {
        let gout = &grad_out.data()[n * out_plane..(n + 1) * out_plane];
        fill_patch_matrix(
            &input.data()[n * in_plane..(n + 1) * in_plane],
            &dims,
            spec,
            &mut cols,
        );
        grad_cols.fill(0.0);
        for oc in 0..dims.out_c {
            let grow = &gout[oc * dims.out_len..(oc + 1) * dims.out_len];
            grad_bias[oc] += grow.iter().sum::<f32>();
            let gw = &mut grad_weights.data_mut()[oc * dims.patch..(oc + 1) * dims.patch];
            let wrow = &wdata[oc * dims.patch..(oc + 1) * dims.patch];
            for k in 0..dims.patch {
                let crow = &cols[k * dims.out_len..(k + 1) * dims.out_len];
                gw[k] += grow.iter().zip(crow.iter()).map(|(g, c)| g * c).sum::<f32>();
                let wk = wrow[k];
                if wk != 0.0 {
                    let gcrow = &mut grad_cols[k * dims.out_len..(k + 1) * dims.out_len];
                    for (gc, g) in gcrow.iter_mut().zip(grow.iter()) {
                        *gc += wk * g;
                    }
                }
            }
        }
        scatter_patch_matrix(
            &grad_cols,
            &dims,
            spec,
            &mut grad_input.data_mut()[n * in_plane..(n + 1) * in_plane],
        );
    }
    Ok((grad_input, grad_weights, grad_bias))
}

/// Inflates a kernel by inserting `rate - 1` zeros between consecutive taps
/// along each spatial axis; convolving with the result at rate 1 equals the
/// atrous convolution with the original kernel at `rate`.
pub fn dilate_kernel(weights: &Tensor, rate: usize) -> Result<Tensor> {
    if rate == 0 {
        return Err(Error::InvalidSpec(format!("dilation rate must be >= 1, got {rate}")));
    }
    let (out_c, in_c, kh, kw) = weights.dims();
    if rate == 1 {
        return Ok(weights.clone());
    }
    let eh = kh + (kh - 1) * (rate - 1);
    let ew = kw + (kw - 1) * (rate - 1);
    let mut out = Tensor::zeros([out_c, in_c, eh, ew]);
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ki in 0..kh {
                for kj in 0..kw {
                    out.set(oc, ic, ki * rate, kj * rate, weights.at(oc, ic, ki, kj));
                }
            }
        }
    }
    Ok(out)
}
