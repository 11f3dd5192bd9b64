//! 2-D batch normalization with per-channel statistics over `N*H*W`.
//!
//! Training normalizes with the biased batch variance and folds the
//! unbiased variance into the running estimate; evaluation uses the running
//! statistics only.

use serde::{Deserialize, Serialize};

use crate::error::{reject, Error, Result};
use crate::tensor::{Real, Tensor, TensorT};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Parameters and running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            run_mean: Tensor::zeros(&[channels]),
            run_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Checks that all four vectors agree on the channel count and that the
    /// running variance is nonnegative.
    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [&self.beta, &self.run_mean, &self.run_var].iter().any(|t| t.len() != c) {
            return Err(Error::InvalidState("batch-norm vectors disagree on channel count".into()));
        }
        if let Some(j) = self.run_var.data().iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidState(format!("running variance of channel {j} is {}", self.run_var.data()[j])));
        }
        Ok(())
    }
}

/// Which running statistics a training pass may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatUpdate {
    pub mean: bool,
    pub var: bool,
}

impl StatUpdate {
    pub const ALL: StatUpdate = StatUpdate { mean: true, var: true };
}

/// Saved forward quantities for [`bn_train_backward`].
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: TensorT<T>,
    pub inv_std: Vec<T>,
}

fn check_channels<T: Real>(x: &TensorT<T>, c: usize) -> Result<(usize, usize, usize)> {
    let (n, xc, h, w) = x.dims4()?;
    if xc != c {
        reject!("input has {xc} channels, batch-norm layer has {c}");
    }
    Ok((n, h * w, xc))
}

/// Batch-statistics normalization; returns output, cache and the per-channel
/// `(mean, biased variance)` of the batch.
pub fn bn_train_kernel<T: Real>(
    x: &TensorT<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(TensorT<T>, BnCache<T>, Vec<(f64, f64)>)> {
    let (n, plane, c) = check_channels(x, gamma.len())?;
    if beta.len() != c {
        reject!("beta has {} entries, expected {c}", beta.len());
    }
    let count = (n * plane) as f64;
    if count == 0.0 {
        reject!("empty batch");
    }
    let xd = x.data();
    let mut xhat = TensorT::zeros(x.shape());
    let mut y = TensorT::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(c);
    let mut stats = Vec::with_capacity(c);
    for j in 0..c {
        let chunks = (0..n).map(|s| (s * c + j) * plane);
        let mut sum = 0.0f64;
        for off in chunks.clone() {
            sum += xd[off..off + plane].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for off in chunks.clone() {
            sq += xd[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / count;
        let istd = T::one() / (T::from_f64(var) + eps).sqrt();
        let m = T::from_f64(mean);
        for off in chunks {
            for i in off..off + plane {
                let xh = (xd[i] - m) * istd;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = gamma[j] * xh + beta[j];
            }
        }
        inv_std.push(istd);
        stats.push((mean, var));
    }
    Ok((y, BnCache { xhat, inv_std }, stats))
}

/// Training-mode forward that also updates the running statistics.
pub fn bn_forward_train(x: &Tensor, s: &mut BnState) -> Result<Tensor> {
    bn_forward_train_cached(x, s, StatUpdate::ALL).map(|(y, _)| y)
}

pub fn bn_forward_train_cached(x: &Tensor, s: &mut BnState, update: StatUpdate) -> Result<(Tensor, BnCache<f32>)> {
    s.validate()?;
    let (y, cache, stats) = bn_train_kernel(x, s.gamma.data(), s.beta.data(), s.eps)?;
    let (n, _, h, w) = x.dims4()?;
    let count = (n * h * w) as f64;
    let mom = s.momentum;
    for (j, (mean, var)) in stats.into_iter().enumerate() {
        if update.mean {
            let rm = &mut s.run_mean.data_mut()[j];
            *rm = (1.0 - mom) * *rm + mom * mean as f32;
        }
        if update.var {
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let rv = &mut s.run_var.data_mut()[j];
            *rv = (1.0 - mom) * *rv + mom * unbiased as f32;
        }
    }
    Ok((y.ensure_finite("bn_forward_train")?, cache))
}

/// Gradients of the training-mode transform with respect to input, gamma, beta.
pub fn bn_train_backward<T: Real>(
    grad_out: &TensorT<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> Result<(TensorT<T>, Vec<T>, Vec<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        reject!("grad_out shape {:?} does not match forward {:?}", grad_out.shape(), cache.xhat.shape());
    }
    let (n, plane, c) = check_channels(grad_out, gamma.len())?;
    let count = T::from_f64((n * plane) as f64);
    let gd = grad_out.data();
    let xh = cache.xhat.data();
    let mut gx = TensorT::zeros(grad_out.shape());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for j in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for s in 0..n {
            let off = (s * c + j) * plane;
            for i in off..off + plane {
                sg += gd[i];
                sgx += gd[i] * xh[i];
            }
        }
        ggamma[j] = sgx;
        gbeta[j] = sg;
        let k = gamma[j] * cache.inv_std[j] / count;
        for s in 0..n {
            let off = (s * c + j) * plane;
            for i in off..off + plane {
                gx.data_mut()[i] = k * (count * gd[i] - sg - xh[i] * sgx);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// `y = gamma (x - mean) / sqrt(var + eps) + beta` per channel.
pub fn bn_eval_kernel<T: Real>(
    x: &TensorT<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<TensorT<T>> {
    let (n, plane, c) = check_channels(x, gamma.len())?;
    if [beta.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
        reject!("batch-norm vectors disagree on channel count");
    }
    if let Some(j) = var.iter().position(|v| !(*v >= T::zero())) {
        return Err(Error::InvalidState(format!("running variance of channel {j} is negative")));
    }
    let scale: Vec<T> = (0..c).map(|j| gamma[j] / (var[j] + eps).sqrt()).collect();
    let mut y = TensorT::zeros(x.shape());
    let xd = x.data();
    for s in 0..n {
        for j in 0..c {
            let off = (s * c + j) * plane;
            for i in off..off + plane {
                y.data_mut()[i] = scale[j] * (xd[i] - mean[j]) + beta[j];
            }
        }
    }
    Ok(y)
}

pub fn bn_forward_eval(x: &Tensor, s: &BnState) -> Result<Tensor> {
    s.validate()?;
    bn_eval_kernel(x, s.gamma.data(), s.beta.data(), s.run_mean.data(), s.run_var.data(), s.eps)?
        .ensure_finite("bn_forward_eval")
}

/// Gradients of the evaluation-mode transform with respect to input, gamma, beta.
pub fn bn_eval_backward<T: Real>(
    x: &TensorT<T>,
    grad_out: &TensorT<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(TensorT<T>, Vec<T>, Vec<T>)> {
    if x.shape() != grad_out.shape() {
        reject!("grad_out shape {:?} does not match input {:?}", grad_out.shape(), x.shape());
    }
    let (n, plane, c) = check_channels(x, gamma.len())?;
    let mut gx = TensorT::zeros(x.shape());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for j in 0..c {
        let istd = T::one() / (var[j] + eps).sqrt();
        for s in 0..n {
            let off = (s * c + j) * plane;
            for i in off..off + plane {
                let g = grad_out.data()[i];
                gx.data_mut()[i] = g * gamma[j] * istd;
                ggamma[j] += g * (x.data()[i] - mean[j]) * istd;
                gbeta[j] += g;
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}
