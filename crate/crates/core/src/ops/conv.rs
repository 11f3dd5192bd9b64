//! 2-D cross-correlation (no kernel flip) lowered to GEMM via im2col.

use crate::error::{reject, Result};
use crate::par::Exec;
use crate::tensor::{MatRef, Real, TensorT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent `floor((size + 2 pad - k) / stride) + 1`.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        reject!("stride must be positive");
    }
    let padded = size + 2 * pad;
    if padded < k {
        reject!("kernel extent {k} exceeds padded input extent {padded}");
    }
    Ok((padded - k) / stride + 1)
}

fn geometry<T: Real>(x: &TensorT<T>, w: &TensorT<T>, stride: usize, pad: usize) -> Result<Geometry> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin {
        reject!("kernel expects {wcin} input channels, input has {cin}");
    }
    let ho = conv_out_extent(h, kh, stride, pad)?;
    let wo = conv_out_extent(wd, kw, stride, pad)?;
    Ok(Geometry { n, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo })
}

fn im2col<T: Real>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let plane = g.out_plane();
    x.fill(T::zero());
    for c in 0..g.cin {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &TensorT<T>,
    w: &TensorT<T>,
    b: Option<&TensorT<T>>,
    stride: usize,
    pad: usize,
) -> Result<TensorT<T>> {
    conv2d_forward_with(Exec::default(), x, w, b, stride, pad)
}

pub fn conv2d_forward_with<T: Real>(
    exec: Exec,
    x: &TensorT<T>,
    w: &TensorT<T>,
    b: Option<&TensorT<T>>,
    stride: usize,
    pad: usize,
) -> Result<TensorT<T>> {
    let g = geometry(x, w, stride, pad)?;
    if let Some(b) = b {
        if b.len() != g.cout {
            reject!("bias has {} entries, kernel has {} output channels", b.len(), g.cout);
        }
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let in_sample = g.cin * g.h * g.w;
    let mut out = TensorT::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let xd = x.data();
    let wd = w.data();
    exec.chunks_mut(out.data_mut(), g.cout * plane, |s, dst| {
        let mut cols = vec![T::zero(); patch * plane];
        im2col(&g, &xd[s * in_sample..(s + 1) * in_sample], &mut cols);
        if let Some(b) = b {
            for (co, bv) in b.data().iter().enumerate() {
                dst[co * plane..(co + 1) * plane].fill(*bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            patch,
            plane,
            T::one(),
            MatRef::row_major(wd, patch),
            MatRef::row_major(&cols, plane),
            beta,
            dst,
        );
    });
    out.ensure_finite("conv2d_forward")
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &TensorT<T>,
    w: &TensorT<T>,
    grad_out: &TensorT<T>,
    stride: usize,
    pad: usize,
) -> Result<(TensorT<T>, TensorT<T>, TensorT<T>)> {
    conv2d_backward_with(Exec::default(), x, w, grad_out, stride, pad, true)
}

/// As [`conv2d_backward`]; `need_input_grad = false` skips the input
/// gradient (returned as zeros) for the first layer of a network.
pub fn conv2d_backward_with<T: Real>(
    exec: Exec,
    x: &TensorT<T>,
    w: &TensorT<T>,
    grad_out: &TensorT<T>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(TensorT<T>, TensorT<T>, TensorT<T>)> {
    let g = geometry(x, w, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        reject!("grad_out shape {:?} does not match conv output {:?}", grad_out.shape(), [g.n, g.cout, g.ho, g.wo]);
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * plane;
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();

    // Per-sample partial kernel/bias gradients, reduced afterwards in sample
    // order so the result does not depend on the execution policy.
    let partials = exec.map(g.n, |s| {
        let gs = &gd[s * out_sample..(s + 1) * out_sample];
        let mut cols = vec![T::zero(); patch * plane];
        im2col(&g, &xd[s * in_sample..(s + 1) * in_sample], &mut cols);
        let mut gw = vec![T::zero(); g.cout * patch];
        T::gemm(
            g.cout,
            plane,
            patch,
            T::one(),
            MatRef::row_major(gs, plane),
            MatRef::transposed(&cols, plane),
            T::zero(),
            &mut gw,
        );
        let gb: Vec<T> = (0..g.cout).map(|co| gs[co * plane..(co + 1) * plane].iter().copied().sum()).collect();
        let gx = if need_input_grad {
            T::gemm(
                patch,
                g.cout,
                plane,
                T::one(),
                MatRef::transposed(wd, patch),
                MatRef::row_major(gs, plane),
                T::zero(),
                &mut cols,
            );
            let mut gx = vec![T::zero(); in_sample];
            col2im(&g, &cols, &mut gx);
            gx
        } else {
            Vec::new()
        };
        (gx, gw, gb)
    });

    let mut grad_x = TensorT::zeros(&[g.n, g.cin, g.h, g.w]);
    let mut grad_w = TensorT::zeros(&[g.cout, g.cin, g.kh, g.kw]);
    let mut grad_b = TensorT::zeros(&[g.cout]);
    for (s, (gx, gw, gb)) in partials.into_iter().enumerate() {
        if need_input_grad {
            grad_x.data_mut()[s * in_sample..(s + 1) * in_sample].copy_from_slice(&gx);
        }
        grad_w.data_mut().iter_mut().zip(&gw).for_each(|(a, b)| *a += *b);
        grad_b.data_mut().iter_mut().zip(&gb).for_each(|(a, b)| *a += *b);
    }
    Ok((grad_x, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    #[test]
    fn identity_kernel() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn diagonal_kernel_single_dot() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[2, 1, 1, 1]);
        let b = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, None, 1, 1), Err(Error::InvalidInput(_))));
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(conv2d_forward(&x, &w, None, 1, 0), Err(Error::InvalidInput(_))));
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(conv2d_forward(&x, &w, Some(&b), 1, 1).is_err());
        let go = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_backward(&x, &w, &go, 1, 1).is_err());
    }

    #[test]
    fn stride_two_floors_extent() {
        assert_eq!(conv_out_extent(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(conv_out_extent(32, 1, 2, 0).unwrap(), 16);
        assert_eq!(conv_out_extent(8, 3, 1, 1).unwrap(), 8);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| i as f32 * 0.1);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f32).sin());
        let go = Tensor::zeros(&[2, 3, 5, 5]);
        let (gx, gw, gb) = conv2d_backward(&x, &w, &go, 1, 1).unwrap();
        assert!(gx.data().iter().chain(gw.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_gradient_closed_form() {
        // For a 1x1 kernel with stride 1, dL/dw[co, ci] = sum over n, y, x of
        // x[n, ci, y, x] * g[n, co, y, x].
        let x = Tensor64::from_fn(&[2, 2, 3, 3], |i| ((i * 7) % 5) as f64 - 2.0);
        let w = Tensor64::from_fn(&[3, 2, 1, 1], |i| i as f64 * 0.3);
        let go = Tensor64::from_fn(&[2, 3, 3, 3], |i| ((i * 3) % 4) as f64 * 0.25);
        let (_, gw, _) = conv2d_backward(&x, &w, &go, 1, 0).unwrap();
        for co in 0..3 {
            for ci in 0..2 {
                let mut want = 0.0;
                for n in 0..2 {
                    for p in 0..9 {
                        want += x.data()[(n * 2 + ci) * 9 + p] * go.data()[(n * 3 + co) * 9 + p];
                    }
                }
                assert!((gw.data()[co * 2 + ci] - want).abs() < 1e-12);
            }
        }
    }

    use crate::tensor::Tensor64;

    #[test]
    fn sequential_and_parallel_are_bit_identical() {
        let x = Tensor::from_fn(&[4, 3, 8, 8], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5);
        let w = Tensor::from_fn(&[5, 3, 3, 3], |i| ((i * 13) % 11) as f32 / 11.0 - 0.5);
        let b = Tensor::from_fn(&[5], |i| i as f32 * 0.1);
        let ys = conv2d_forward_with(Exec::Sequential, &x, &w, Some(&b), 2, 1).unwrap();
        let yp = conv2d_forward_with(Exec::Parallel, &x, &w, Some(&b), 2, 1).unwrap();
        assert!(ys.bit_eq(&yp));
        let go = Tensor::from_fn(ys.shape(), |i| (i as f32 * 0.37).cos());
        let s = conv2d_backward_with(Exec::Sequential, &x, &w, &go, 2, 1, true).unwrap();
        let p = conv2d_backward_with(Exec::Parallel, &x, &w, &go, 2, 1, true).unwrap();
        assert!(s.0.bit_eq(&p.0) && s.1.bit_eq(&p.1) && s.2.bit_eq(&p.2));
    }
}
