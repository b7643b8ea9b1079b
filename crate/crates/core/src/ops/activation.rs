use alloc::format;

use crate::error::{Error, Result};
use crate::mathf;
use crate::tensor::Tensor;

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Masks the gradient by the sign of the pre-activation; the subgradient at
/// exactly zero is taken as zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu grad shape {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(input.shape());
    for ((g, &x), &gy) in grad_in
        .data_mut()
        .iter_mut()
        .zip(input.data().iter())
        .zip(grad_out.data().iter())
    {
        *g = if x > 0.0 { gy } else { 0.0 };
    }
    Ok(grad_in)
}

fn check_pair_logits(t: &Tensor) -> Result<()> {
    let (_, c, h, w) = t.dims();
    if c != 2 || h != 1 || w != 1 {
        return Err(Error::ShapeMismatch(format!(
            "pair softmax expects shape (n, 2, 1, 1), got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Two-unit softmax over the channel axis, computed with max-logit
/// subtraction so large logits cannot overflow.
pub fn softmax_pair_forward(logits: &Tensor) -> Result<Tensor> {
    check_pair_logits(logits)?;
    let n = logits.dims().0;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..n {
        let s0 = logits.at(i, 0, 0, 0);
        let s1 = logits.at(i, 1, 0, 0);
        let m = s0.max(s1);
        let e0 = mathf::exp(s0 - m);
        let e1 = mathf::exp(s1 - m);
        let z = e0 + e1;
        out.set(i, 0, 0, 0, e0 / z);
        out.set(i, 1, 0, 0, e1 / z);
    }
    Ok(out)
}

/// Softmax Jacobian-vector product: `g_i = p_i * (gy_i - sum_j gy_j * p_j)`.
pub fn softmax_pair_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_pair_logits(probs)?;
    if probs.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "softmax grad shape {:?} does not match output {:?}",
            grad_out.shape(),
            probs.shape()
        )));
    }
    let n = probs.dims().0;
    let mut grad_in = Tensor::zeros(probs.shape());
    for i in 0..n {
        let p0 = probs.at(i, 0, 0, 0);
        let p1 = probs.at(i, 1, 0, 0);
        let g0 = grad_out.at(i, 0, 0, 0);
        let g1 = grad_out.at(i, 1, 0, 0);
        let inner = g0 * p0 + g1 * p1;
        grad_in.set(i, 0, 0, 0, p0 * (g0 - inner));
        grad_in.set(i, 1, 0, 0, p1 * (g1 - inner));
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::new([1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
        let out = relu_forward(&input);
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_masks_by_preactivation() {
        let input = Tensor::new([1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
        let gout = Tensor::new([1, 3, 1, 1], vec![5.0, 5.0, 5.0]).unwrap();
        let gin = relu_backward(&input, &gout).unwrap();
        assert_eq!(gin.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn equal_logits_give_half() {
        let logits = Tensor::new([1, 2, 1, 1], vec![0.3, 0.3]).unwrap();
        let p = softmax_pair_forward(&logits).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn large_margin_saturates_without_overflow() {
        let logits = Tensor::new([1, 2, 1, 1], vec![100.0, 120.0]).unwrap();
        let p = softmax_pair_forward(&logits).unwrap();
        assert!(p.data()[1] > 0.999999 && p.data()[1] <= 1.0);
        assert!(p.all_finite());
    }

    #[test]
    fn activations_sum_to_one() {
        let logits = Tensor::new([2, 2, 1, 1], vec![0.1, -2.0, 3.5, 3.0]).unwrap();
        let p = softmax_pair_forward(&logits).unwrap();
        for i in 0..2 {
            let s = p.at(i, 0, 0, 0) + p.at(i, 1, 0, 0);
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_pair_shape() {
        let logits = Tensor::zeros([1, 3, 1, 1]);
        assert!(softmax_pair_forward(&logits).is_err());
    }

    #[test]
    fn softmax_backward_matches_the_analytic_jacobian() {
        // For a two-unit softmax, d p1 / d s1 = p1 (1 - p1) and
        // d p1 / d s0 = -p0 p1; probe with unit cotangents.
        let logits = Tensor::new([1, 2, 1, 1], vec![0.4, -1.1]).unwrap();
        let probs = softmax_pair_forward(&logits).unwrap();
        let (p0, p1) = (probs.data()[0], probs.data()[1]);

        let pick_p1 = Tensor::new([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let grad = softmax_pair_backward(&probs, &pick_p1).unwrap();
        assert!((grad.data()[1] - p1 * (1.0 - p1)).abs() <= 1e-7);
        assert!((grad.data()[0] - (-p0 * p1)).abs() <= 1e-7);

        // Finite-difference cross-check through the forward pass.
        let eps = 1e-3f32;
        for coord in 0..2 {
            let mut plus = logits.clone();
            plus.data_mut()[coord] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[coord] -= eps;
            let numeric = (softmax_pair_forward(&plus).unwrap().data()[1] as f64
                - softmax_pair_forward(&minus).unwrap().data()[1] as f64)
                / (2.0 * eps as f64);
            assert!(
                (numeric - grad.data()[coord] as f64).abs() <= 1e-4,
                "coord {coord}: numeric {numeric} analytic {}",
                grad.data()[coord]
            );
        }
    }
}
