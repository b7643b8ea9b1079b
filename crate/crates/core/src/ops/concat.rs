use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stacks `a`'s channels before `b`'s; batch and spatial extents must match.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (an, ac, ah, aw) = a.dims();
    let (bn, bc, bh, bw) = b.dims();
    if (an, ah, aw) != (bn, bh, bw) {
        return Err(Error::ShapeMismatch(format!(
            "concat requires equal batch and spatial extents, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([an, ac + bc, ah, aw]);
    let plane = ah * aw;
    for n in 0..an {
        let dst = &mut out.data_mut()[n * (ac + bc) * plane..(n + 1) * (ac + bc) * plane];
        dst[..ac * plane].copy_from_slice(&a.data()[n * ac * plane..(n + 1) * ac * plane]);
        dst[ac * plane..].copy_from_slice(&b.data()[n * bc * plane..(n + 1) * bc * plane]);
    }
    Ok(out)
}

/// Splits a concatenated gradient back into the two operands' shapes.
pub fn concat_channels_backward(grad: &Tensor, a_channels: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = grad.dims();
    if a_channels > c {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {a_channels} channels from a {c}-channel gradient"
        )));
    }
    let b_channels = c - a_channels;
    let mut ga = Tensor::zeros([n, a_channels, h, w]);
    let mut gb = Tensor::zeros([n, b_channels, h, w]);
    let plane = h * w;
    for i in 0..n {
        let src = &grad.data()[i * c * plane..(i + 1) * c * plane];
        ga.data_mut()[i * a_channels * plane..(i + 1) * a_channels * plane]
            .copy_from_slice(&src[..a_channels * plane]);
        gb.data_mut()[i * b_channels * plane..(i + 1) * b_channels * plane]
            .copy_from_slice(&src[a_channels * plane..]);
    }
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::from_fn([2, 2, 2, 2], |n, c, h, w| (n * 100 + c * 10 + h * 2 + w) as f32);
        let b = Tensor::full([2, 3, 2, 2], -1.0);
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), [2, 5, 2, 2]);
        for n in 0..2 {
            for c in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        assert_eq!(out.at(n, c, h, w), a.at(n, c, h, w));
                    }
                }
            }
            assert_eq!(out.at(n, 2, 0, 0), -1.0);
        }
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = Tensor::zeros([1, 2, 3, 3]);
        let b = Tensor::zeros([1, 2, 4, 3]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn split_inverts_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Tensor::uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([2, 2, 4, 5], -1.0, 1.0, &mut rng);
        let joined = concat_channels(&a, &b).unwrap();
        let (ra, rb) = concat_channels_backward(&joined, 3).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }
}
