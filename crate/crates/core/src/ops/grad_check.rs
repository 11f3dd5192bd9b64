use crate::tensor::Tensor64;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` of a
/// scalar function, one element at a time.
pub fn finite_diff_grad<F>(f: F, x: &Tensor64, h: f64) -> Tensor64
where
    F: Fn(&Tensor64) -> f64,
{
    let mut probe = x.clone();
    let mut out = Tensor64::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `max |a - b| / max(|a|, |b|, floor)` over all elements.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum() {
        let x = Tensor64::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor64::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 7.0, &x, 1e-4);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let x = Tensor64::new(&[2], vec![-1.0, 1.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v.max(0.0)).sum(), &x, 1e-4);
        assert!(g.data()[0].abs() < 1e-10);
        assert!((g.data()[1] - 1.0).abs() < 1e-10);
    }
}
