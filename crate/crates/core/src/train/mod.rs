//! Gradients, optimizer, learning-rate schedule and the training loop.

mod backward;
mod fit;
mod gradcheck;
mod optim;

use ndarray::{Array2, ArrayView2};

pub use backward::{loss_and_gradient, GradientSession};
pub use fit::{evaluate_sample, fit, EpochRecord, FitOutcome, PreparedSample, SampleError, TrainConfig, LOG_HEADER};
pub use gradcheck::{finite_difference_gradcheck, GradCheckReport};
pub use optim::{adam_step, steplr, AdamConfig, OptimizerState};

use crate::error::{Result, RetoError};
use crate::model::{Dense, ParameterStore};

/// Anything whose scalars can be enumerated by name, for optimizers and gradient checks.
pub trait Parameters: Clone {
    fn named_slices(&self) -> Vec<(String, &[f64])>;
    fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for (_, s) in z.named_slices_mut() {
            s.fill(0.0);
        }
        z
    }
}

impl Parameters for ParameterStore {
    fn named_slices(&self) -> Vec<(String, &[f64])> {
        self.tensors().into_iter().map(|(n, _, d)| (n, d)).collect()
    }

    fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.tensors_mut()
    }
}

impl Parameters for Dense {
    fn named_slices(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".into(), self.weight.as_slice().expect("standard layout")),
            ("bias".into(), self.bias.as_slice().expect("standard layout")),
        ]
    }

    fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weight".into(), self.weight.as_slice_mut().expect("standard layout")),
            ("bias".into(), self.bias.as_slice_mut().expect("standard layout")),
        ]
    }
}

fn check_same_shape(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(RetoError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(RetoError::EmptyInput("loss over zero entries".into()));
    }
    Ok(())
}

/// Mean of squared differences over all `N·C` entries.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(&pred, &target)?;
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// `∂ mse / ∂ pred = 2 (pred - target) / (N·C)`.
pub fn mse_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_same_shape(&pred, &target)?;
    let k = 2.0 / pred.len() as f64;
    Ok((&pred - &target).mapv(|d| k * d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_examples() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse_loss(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(mse_loss((&a + 1.0).view(), a.view()).unwrap(), 1.0);
        assert_eq!(mse_loss(array![[1.0, 2.0]].view(), array![[0.0, 0.0]].view()).unwrap(), 2.5);
        assert!(matches!(
            mse_loss(a.view(), array![[1.0, 2.0]].view()),
            Err(RetoError::Shape(_))
        ));
    }

    #[test]
    fn single_linear_layer_closed_form() {
        // N = 1: d(mse)/dW = 2 (pred - target) xᵀ / C
        let layer = Dense {
            weight: array![[0.5, -1.0, 0.25], [2.0, 0.0, 1.0]],
            bias: array![0.1, 0.2, 0.3],
        };
        let x = array![[0.7, -0.4]];
        let target = array![[1.0, 0.0, -1.0]];
        let pred = crate::model::layers::dense_forward(x.view(), &layer);
        let dy = mse_grad(pred.view(), target.view()).unwrap();
        let mut g = layer.zeroed();
        crate::model::layers::dense_backward(x.view(), &layer, dy.view(), &mut g);
        for i in 0..2 {
            for j in 0..3 {
                let want = 2.0 * (pred[[0, j]] - target[[0, j]]) * x[[0, i]] / 3.0;
                assert!((g.weight[[i, j]] - want).abs() < 1e-15);
            }
        }
    }
}
