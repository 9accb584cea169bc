//! Central-difference gradient oracle, independent of the tape.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(f(x + step e_i) - f(x - step e_i)) / 2 step` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max_i |a_i - b_i| / max_i max(|a_i|, |b_i|)`, floored at `1e-8`. Scaled
/// by the largest entry so near-zero entries do not dominate.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().chain(a).fold(1e-8_f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_square_norm_gives_identity() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| 0.5 * t.dot(t), &x, 1e-5).unwrap();
        assert!(relative_error(g.data(), x.data()) < 1e-6);
    }

    #[test]
    fn sum_of_sines_gives_cosines() {
        let x = Tensor::new(vec![3], vec![0.1, 1.0, -2.3]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v.sin()).sum(), &x, 1e-5).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| v.cos()).collect();
        assert!(relative_error(g.data(), &expect) < 1e-8);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::new(vec![2], vec![5.0, 6.0]).unwrap();
        let g = finite_diff_grad(|_| 7.0, &x, 1e-3).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }
}
