//! SGD with classical momentum: `v <- mu v + g`, `p <- p - lr v`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    /// Applies one update from a flat gradient laid out like the
    /// concatenation of `params`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grad: &[T]) -> Result<()> {
        let total: usize = params.iter().map(Tensor::len).sum();
        if grad.len() != total {
            return Err(Error::invalid(format!("gradient has {} entries, parameters {total}", grad.len())));
        }
        if self.velocity.len() != total {
            self.velocity = vec![T::zero(); total];
        }
        let mut offset = 0;
        for p in params {
            let n = p.len();
            let v = &mut self.velocity[offset..offset + n];
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v).zip(&grad[offset..offset + n]) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![Tensor::new([2], vec![1.0f64, 2.0]).unwrap()];
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut p, &[1.0, -1.0]).unwrap();
        assert_eq!(p[0].data(), &[0.9, 2.1]);
        opt.step(&mut p, &[1.0, -1.0]).unwrap();
        // v = 1.9
        assert!((p[0].data()[0] - 0.71).abs() < 1e-12);
        assert!(opt.step(&mut p, &[1.0]).is_err());
    }
}
