use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One momentum-SGD step: `v <- momentum v + grad; p <- p - lr v`.
///
/// Frozen parameters and their velocities are left untouched. Gradients are
/// cleared on every parameter afterwards. All missing gradients are reported
/// before anything is modified.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    lr: f32,
    momentum: f32,
    velocity: &mut [Tensor],
    freeze: &[bool],
) -> Result<()> {
    if velocity.len() != params.len() || freeze.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "sgd_step: {} params, {} velocities, {} freeze flags",
            params.len(),
            velocity.len(),
            freeze.len()
        )));
    }
    for (i, (p, v)) in params.iter().zip(velocity.iter()).enumerate() {
        if v.shape() != p.shape() {
            return Err(Error::InvalidInput(format!("velocity {i} has shape {:?}, param {:?}", v.shape(), p.shape())));
        }
        if !freeze[i] && p.grad().is_none() {
            return Err(Error::InvalidState(format!("parameter {i} has no gradient")));
        }
    }
    for ((p, v), &frozen) in params.iter_mut().zip(velocity.iter_mut()).zip(freeze) {
        if !frozen {
            let (grad, data) = p.grad_and_data_mut();
            let grad = grad.expect("checked above");
            for ((w, vel), g) in data.iter_mut().zip(v.data_mut()).zip(grad) {
                *vel = momentum * *vel + g;
                *w -= lr * *vel;
            }
        }
        p.clear_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Tensor {
        let mut t = Tensor::full(&[1], v);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = param(1.5, 3.0);
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut [&mut p], 0.0, 0.9, &mut v, &[false]).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 1.0);
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut [&mut p], 0.1, 0.0, &mut v, &[false]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = param(0.0, 1.0);
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut [&mut p], 1.0, 0.5, &mut v, &[false]).unwrap();
        p.set_grad(vec![1.0]).unwrap();
        sgd_step(&mut [&mut p], 1.0, 0.5, &mut v, &[false]).unwrap();
        assert_eq!(v[0].data(), &[1.5]);
        assert_eq!(p.data(), &[-2.5]);
    }

    #[test]
    fn frozen_param_is_bit_identical() {
        let mut p = param(0.123_456_7, 5.0);
        let before = p.data()[0].to_bits();
        let mut v = vec![Tensor::full(&[1], 0.3)];
        sgd_step(&mut [&mut p], 0.1, 0.9, &mut v, &[true]).unwrap();
        assert_eq!(p.data()[0].to_bits(), before);
        assert_eq!(v[0].data(), &[0.3]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::full(&[1], 1.0);
        let mut q = param(1.0, 1.0);
        let mut v = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let r = sgd_step(&mut [&mut q, &mut p], 0.1, 0.0, &mut v, &[false, false]);
        assert!(r.is_err());
        assert_eq!(q.data(), &[1.0]);
        // frozen params may lack a gradient
        sgd_step(&mut [&mut q, &mut p], 0.1, 0.0, &mut v, &[false, true]).unwrap();
    }
}
