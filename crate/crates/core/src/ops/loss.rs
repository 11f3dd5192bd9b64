use crate::error::{reject, Result};
use crate::tensor::{Real, TensorT};

/// Mean per-pixel softmax cross-entropy of `(N, C, H, W)` logits against
/// class ids laid out `(N, H, W)`. Returns the loss and its gradient.
pub fn softmax_cross_entropy<T: Real>(logits: &TensorT<T>, labels: &[u8]) -> Result<(T, TensorT<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        reject!("{} labels for {} pixels", labels.len(), n * plane);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        reject!("label {bad} out of range for {c} classes");
    }
    let inv = T::one() / T::from_f64((n * plane) as f64);
    let ld = logits.data();
    let mut grad = TensorT::zeros(logits.shape());
    let mut total = T::zero();
    let mut probs = vec![T::zero(); c];
    for s in 0..n {
        for p in 0..plane {
            let at = |k: usize| (s * c + k) * plane + p;
            let max = (0..c).map(|k| ld[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (ld[at(k)] - max).exp();
                z += *pr;
            }
            let y = labels[s * plane + p] as usize;
            total += z.ln() - (ld[at(y)] - max);
            for (k, pr) in probs.iter().enumerate() {
                let target = if k == y { T::one() } else { T::zero() };
                grad.data_mut()[at(k)] = (*pr / z - target) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// Mean squared error over all elements and its gradient.
pub fn mse<T: Real>(pred: &TensorT<T>, target: &TensorT<T>) -> Result<(T, TensorT<T>)> {
    if pred.shape() != target.shape() {
        reject!("mse: shapes {:?} and {:?} differ", pred.shape(), target.shape());
    }
    let inv = T::one() / T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let grad = TensorT::from_fn(pred.shape(), |i| {
        let d = pred.data()[i] - target.data()[i];
        loss += d * d;
        two * d * inv
    });
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros(&[1, 4, 2, 2]);
        let (l, g) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
        // each pixel's gradient sums to zero over classes
        for p in 0..4 {
            let s: f32 = (0..4).map(|k| g.data()[k * 4 + p]).sum();
            assert!(s.abs() < 1e-7);
        }
    }

    #[test]
    fn label_range_checked() {
        let logits = Tensor::zeros(&[1, 4, 1, 1]);
        assert!(softmax_cross_entropy(&logits, &[4]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 0]).is_err());
    }

    #[test]
    fn mse_value() {
        let a = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let (l, g) = mse(&a, &b).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g.data(), &[1.0, 3.0]);
    }
}
