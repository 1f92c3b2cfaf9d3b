//! Reverse-mode differentiation and the gradient entry points used by the
//! attacks, the trainers and the finite-difference checks.

pub mod conv;
mod graph;

pub use conv::ConvGeom;
pub use graph::{Grads, Graph, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A differentiable function of an input batch producing one loss per
/// example.
pub trait Objective<T: Scalar> {
    /// Labels, a reconstruction target, or `()`.
    type Target: ?Sized;

    /// Records per-example losses (shape `[N]`) for the batch held by `x`.
    fn record_losses(&self, g: &mut Graph<T>, x: Var, target: &Self::Target) -> Result<Var>;

    fn check_input(&self, _shape: &[usize]) -> Result<()> {
        Ok(())
    }
}

/// Adapter turning a closure into an [`Objective`] with a unit target.
pub struct FnObjective<F>(pub F);

impl<T: Scalar, F> Objective<T> for FnObjective<F>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    type Target = ();

    fn record_losses(&self, g: &mut Graph<T>, x: Var, _target: &()) -> Result<Var> {
        (self.0)(g, x)
    }
}

/// Batch-mean loss `J` with its gradient w.r.t. the input and, optionally,
/// the model parameters (flattened in registration order).
#[derive(Clone, Debug)]
pub struct LossGradient<T> {
    pub loss: T,
    pub grad_input: Tensor<T>,
    pub grad_params: Option<Vec<T>>,
}

/// `J` and `dJ/dx`, with `J` the mean of the per-example losses.
pub fn loss_and_input_grad<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
) -> Result<LossGradient<T>> {
    loss_and_grads(model, x, target, false)
}

/// Like [`loss_and_input_grad`] but can also return parameter gradients.
pub fn loss_and_grads<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    with_params: bool,
) -> Result<LossGradient<T>> {
    model.check_input(x.shape())?;
    let mut g = if with_params { Graph::with_param_grads() } else { Graph::new() };
    let xv = g.input(x.clone());
    let losses = model.record_losses(&mut g, xv, target)?;
    let root = g.mean(losses);
    let loss = g.value(root).item()?;
    let mut grads = g.backward(root)?;
    let grad_input = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let grad_params = with_params.then(|| {
        g.params()
            .iter()
            .flat_map(|&p| match grads.take(p) {
                Some(t) => t.into_data(),
                None => vec![T::zero(); g.value(p).len()],
            })
            .collect()
    });
    Ok(LossGradient { loss, grad_input, grad_params })
}

/// Mean loss and its flattened parameter gradient, treating the input as a
/// constant. This is the training path.
pub fn loss_and_param_grads<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
) -> Result<(T, Vec<T>)> {
    model.check_input(x.shape())?;
    let mut g = Graph::with_param_grads();
    let xv = g.constant(x.clone());
    let losses = model.record_losses(&mut g, xv, target)?;
    let root = g.mean(losses);
    let loss = g.value(root).item()?;
    let mut grads = g.backward(root)?;
    let flat = g
        .params()
        .iter()
        .flat_map(|&p| match grads.take(p) {
            Some(t) => t.into_data(),
            None => vec![T::zero(); g.value(p).len()],
        })
        .collect();
    Ok((loss, flat))
}

/// Per-example losses and the gradient of their sum w.r.t. the input.
///
/// Each example's gradient is independent of the batch size, which keeps
/// sign-based attacks insensitive to how a dataset is batched.
pub fn per_example_loss_and_grad<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
) -> Result<(Vec<T>, Tensor<T>)> {
    model.check_input(x.shape())?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let losses = model.record_losses(&mut g, xv, target)?;
    let per = g.value(losses).data().to_vec();
    let root = g.sum(losses);
    let mut grads = g.backward(root)?;
    let grad = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    Ok((per, grad))
}

/// Per-example losses (forward pass only).
pub fn per_example_loss<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
) -> Result<Vec<T>> {
    model.check_input(x.shape())?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let losses = model.record_losses(&mut g, xv, target)?;
    Ok(g.value(losses).data().to_vec())
}

/// Batch-mean loss `J` (forward pass only).
pub fn mean_loss<T: Scalar, M: Objective<T> + ?Sized>(model: &M, x: &Tensor<T>, target: &M::Target) -> Result<T> {
    let per = per_example_loss(model, x, target)?;
    if per.is_empty() {
        return Ok(T::zero());
    }
    let n = T::lit(per.len() as f64);
    Ok(per.into_iter().sum::<T>() / n)
}

/// Central-difference estimate of `dJ/dx` with `J` the batch-mean loss.
///
/// Only the coordinates in `coords` are estimated (all of them when `None`);
/// the rest of the returned tensor is zero.
pub fn finite_difference_grad<T: Scalar, M: Objective<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target: &M::Target,
    h: T,
    coords: Option<&[usize]>,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.len() {
            return Err(Error::invalid(format!("coordinate {i} outside tensor of {} elements", x.len())));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = mean_loss(model, &probe, target)?;
        probe.data_mut()[i] = orig - h;
        let minus = mean_loss(model, &probe, target)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (h + h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn linear_model_gradient_is_weight() {
        let w = t(&[1, 4], &[0.5, -2.0, 0.0, 3.25]);
        let wc = w.clone();
        let model = FnObjective(move |g: &mut Graph<f64>, x: Var| {
            let wv = g.constant(wc.clone());
            let p = g.mul(x, wv)?;
            Ok(g.sum_per_example(p))
        });
        let x = t(&[1, 4], &[0.1, 0.2, 0.3, 0.4]);
        let lg = loss_and_input_grad(&model, &x, &()).unwrap();
        assert_eq!(lg.grad_input, w);
        assert!((lg.loss - (0.05 - 0.4 + 1.3)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_finite_difference() {
        let model = FnObjective(|g: &mut Graph<f64>, x: Var| {
            let sq = g.mul(x, x)?;
            Ok(g.sum_per_example(sq))
        });
        let x = t(&[1, 2], &[1.0, 2.0]);
        let fd = finite_difference_grad(&model, &x, &(), 1e-5, None).unwrap();
        assert!((fd.data()[0] - 2.0).abs() < 1e-8);
        assert!((fd.data()[1] - 4.0).abs() < 1e-8);
        let an = loss_and_input_grad(&model, &x, &()).unwrap();
        assert_eq!(an.grad_input.data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_model_has_zero_gradient() {
        let model = FnObjective(|g: &mut Graph<f64>, x: Var| {
            let n = g.value(x).batch_size();
            Ok(g.constant(Tensor::full([n], 3.0)))
        });
        let x = t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let lg = loss_and_input_grad(&model, &x, &()).unwrap();
        assert_eq!(lg.loss, 3.0);
        assert!(lg.grad_input.data().iter().all(|&v| v == 0.0));
        let fd = finite_difference_grad(&model, &x, &(), 1e-4, None).unwrap();
        assert!(fd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_positive_step_rejected() {
        let model = FnObjective(|g: &mut Graph<f64>, x: Var| Ok(g.sum_per_example(x)));
        let x = t(&[1, 1], &[1.0]);
        assert!(finite_difference_grad(&model, &x, &(), 0.0, None).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }
}
