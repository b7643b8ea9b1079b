use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense 4-D array of `f32` in row-major `(batch, channels, height, width)`
/// order. Every value in the engine — images, feature maps, kernels,
/// gradients — is one of these.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from a shape and backing data; the data length must
    /// equal the product of the extents.
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Fills a tensor from a function of the `(n, c, h, w)` index.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Seeded uniform draw over `[lo, hi)`.
    pub fn uniform(shape: [usize; 4], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    /// Extents as `(batch, channels, height, width)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of element `(n, c, h, w)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f32) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(crate::mathf::abs(*v)))
    }

    /// Largest absolute element-wise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot compare tensors with shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max(crate::mathf::abs(a - b))))
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Concatenates tensors along the batch axis; channel and spatial
    /// extents must agree.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptyBatch)?;
        let (_, c, h, w) = first.dims();
        let batch: usize = items.iter().map(|t| t.dims().0).sum();
        let mut out = Tensor::zeros([batch, c, h, w]);
        let mut offset = 0;
        for item in items {
            let (n, ic, ih, iw) = item.dims();
            if (ic, ih, iw) != (c, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    item.shape(),
                    first.shape()
                )));
            }
            out.data[offset..offset + item.len()].copy_from_slice(&item.data);
            offset += n * c * h * w;
        }
        Ok(out)
    }
}

/// Parameters of a 2-D (possibly atrous) convolution.
///
/// The dilation `rate` spaces kernel taps `rate` pixels apart, widening the
/// field of view of a `k`-tap axis to `k + (k - 1) * (rate - 1)` without
/// adding parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub rate: usize,
}

impl ConvSpec {
    /// Plain unit-stride, unpadded convolution at dilation rate 1.
    pub fn basic(out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            rate: 1,
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_rate(mut self, rate: usize) -> Self {
        self.rate = rate;
        self
    }

    /// "Same" padding for odd kernels: output grid equals input grid at
    /// stride 1 for any dilation rate.
    pub fn same_padding(&self) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if !((kh - 1) * self.rate).is_multiple_of(2) || !((kw - 1) * self.rate).is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "same padding undefined for kernel {:?} at rate {}",
                self.kernel, self.rate
            )));
        }
        Ok(((kh - 1) * self.rate / 2, (kw - 1) * self.rate / 2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride.0 == 0
            || self.stride.1 == 0
            || self.rate == 0
        {
            return Err(Error::InvalidSpec(format!(
                "conv spec extents must be >= 1: out_channels {}, kernel {:?}, stride {:?}, rate {}",
                self.out_channels, self.kernel, self.stride, self.rate
            )));
        }
        Ok(())
    }

    /// Kernel extent after dilation: `k + (k - 1) * (rate - 1)` per axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        (
            kh + (kh - 1) * (self.rate - 1),
            kw + (kw - 1) * (self.rate - 1),
        )
    }

    /// Output spatial extent for an `(in_h, in_w)` input, rejecting
    /// geometries with no valid output position.
    pub fn output_extent(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (keh, kew) = self.effective_kernel();
        let padded_h = in_h + 2 * self.padding.0;
        let padded_w = in_w + 2 * self.padding.1;
        if padded_h < keh || padded_w < kew {
            return Err(Error::InvalidSpec(format!(
                "effective kernel {:?} does not fit padded input {}x{}",
                (keh, kew),
                padded_h,
                padded_w
            )));
        }
        Ok((
            (padded_h - keh) / self.stride.0 + 1,
            (padded_w - kew) / self.stride.1 + 1,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new([1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::from_fn([2, 3, 4, 5], |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f32);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.offset(0, 0, 0, 1), 1);
        assert_eq!(t.offset(0, 0, 1, 0), 5);
        assert_eq!(t.offset(0, 1, 0, 0), 20);
        assert_eq!(t.offset(1, 0, 0, 0), 60);
    }

    #[test]
    fn effective_kernel_for_rates_1_2_3() {
        for (rate, expect) in [(1usize, 3usize), (2, 5), (3, 7)] {
            let spec = ConvSpec::basic(1, (3, 3)).with_rate(rate);
            assert_eq!(spec.effective_kernel(), (expect, expect));
        }
    }

    #[test]
    fn output_extent_matches_formula() {
        let spec = ConvSpec::basic(4, (3, 3)).with_stride((2, 2)).with_padding((1, 1));
        assert_eq!(spec.output_extent(160, 80).unwrap(), (80, 40));
        let atrous = ConvSpec::basic(4, (3, 3)).with_rate(2);
        assert_eq!(atrous.output_extent(5, 5).unwrap(), (1, 1));
    }

    #[test]
    fn zero_sized_output_rejected() {
        let spec = ConvSpec::basic(1, (3, 3)).with_rate(3);
        assert!(spec.output_extent(6, 6).is_err());
    }

    #[test]
    fn same_padding_preserves_grid() {
        for rate in 1..=3usize {
            let mut spec = ConvSpec::basic(2, (3, 3)).with_rate(rate);
            spec.padding = spec.same_padding().unwrap();
            assert_eq!(spec.padding, (rate, rate));
            assert_eq!(spec.output_extent(10, 5).unwrap(), (10, 5));
        }
    }
}
