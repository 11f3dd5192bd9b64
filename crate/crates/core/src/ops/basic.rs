//! Pointwise, pooling, resampling and channel-joining ops.

use crate::error::{reject, Result};
use crate::tensor::{Real, TensorT};

pub fn relu<T: Real>(x: &TensorT<T>) -> TensorT<T> {
    let mut y = x.clone();
    y.clear_grad();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &TensorT<T>, grad_out: &TensorT<T>) -> Result<TensorT<T>> {
    same_shape(x, grad_out, "relu_backward")?;
    Ok(TensorT::from_fn(x.shape(), |i| if x.data()[i] > T::zero() { grad_out.data()[i] } else { T::zero() }))
}

fn same_shape<T: Real>(a: &TensorT<T>, b: &TensorT<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        reject!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

/// 2x2 max pooling with stride 2. Returns the output and, per output cell,
/// the flat input index that won (first maximum in row-major window order).
pub fn maxpool2<T: Real>(x: &TensorT<T>) -> Result<(TensorT<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        reject!("maxpool2 needs even spatial extents, got {h}x{w}");
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = TensorT::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = p * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                y.data_mut()[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &TensorT<T>,
) -> Result<TensorT<T>> {
    if argmax.len() != grad_out.len() {
        reject!("maxpool2_backward: {} indices for {} gradients", argmax.len(), grad_out.len());
    }
    let mut gx = TensorT::zeros(input_shape);
    for (o, &i) in argmax.iter().enumerate() {
        gx.data_mut()[i] += grad_out.data()[o];
    }
    Ok(gx)
}

/// Nearest-neighbour upsampling by an integer factor in both spatial axes.
pub fn upsample_nearest<T: Real>(x: &TensorT<T>, factor: usize) -> Result<TensorT<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        reject!("upsample factor must be positive");
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut y = TensorT::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    for p in 0..n * c {
        for oy in 0..ho {
            let src = &xd[p * h * w + (oy / factor) * w..][..w];
            let dst = &mut y.data_mut()[p * ho * wo + oy * wo..][..wo];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / factor];
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest2<T: Real>(x: &TensorT<T>) -> Result<TensorT<T>> {
    upsample_nearest(x, 2)
}

pub fn upsample_nearest_backward<T: Real>(grad_out: &TensorT<T>, factor: usize) -> Result<TensorT<T>> {
    let (n, c, ho, wo) = grad_out.dims4()?;
    if factor == 0 || ho % factor != 0 || wo % factor != 0 {
        reject!("gradient extent {ho}x{wo} is not a multiple of {factor}");
    }
    let (h, w) = (ho / factor, wo / factor);
    let mut gx = TensorT::zeros(&[n, c, h, w]);
    let gd = grad_out.data();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                gx.data_mut()[p * h * w + (oy / factor) * w + ox / factor] += gd[p * ho * wo + oy * wo + ox];
            }
        }
    }
    Ok(gx)
}

pub fn global_avg_pool<T: Real>(x: &TensorT<T>) -> Result<TensorT<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    Ok(TensorT::from_fn(&[n, c, 1, 1], |p| x.data()[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv))
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &TensorT<T>) -> Result<TensorT<T>> {
    let [n, c, h, w] = input_shape[..] else { reject!("expected rank-4 input shape") };
    if grad_out.shape() != [n, c, 1, 1] {
        reject!("global_avg_pool_backward: gradient shape {:?}", grad_out.shape());
    }
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    Ok(TensorT::from_fn(input_shape, |i| grad_out.data()[i / plane] * inv))
}

pub fn concat_channels<T: Real>(a: &TensorT<T>, b: &TensorT<T>) -> Result<TensorT<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        reject!("concat_channels: {:?} and {:?} disagree outside the channel axis", a.shape(), b.shape());
    }
    let plane = h * w;
    let mut y = TensorT::zeros(&[n, ca + cb, h, w]);
    for s in 0..n {
        let dst = &mut y.data_mut()[s * (ca + cb) * plane..(s + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Ok(y)
}

/// Splits a channel-concatenated gradient back into its two operands.
pub fn concat_channels_backward<T: Real>(grad_out: &TensorT<T>, ca: usize) -> Result<(TensorT<T>, TensorT<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if ca > c {
        reject!("split point {ca} beyond {c} channels");
    }
    let cb = c - ca;
    let plane = h * w;
    let mut ga = TensorT::zeros(&[n, ca, h, w]);
    let mut gb = TensorT::zeros(&[n, cb, h, w]);
    for s in 0..n {
        let src = &grad_out.data()[s * c * plane..(s + 1) * c * plane];
        ga.data_mut()[s * ca * plane..(s + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
        gb.data_mut()[s * cb * plane..(s + 1) * cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    Ok((ga, gb))
}

pub fn add<T: Real>(a: &TensorT<T>, b: &TensorT<T>) -> Result<TensorT<T>> {
    same_shape(a, b, "add")?;
    Ok(TensorT::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]))
}
