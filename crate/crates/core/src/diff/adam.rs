use crate::scalar::Real;

use super::tensor::Tensor;
use super::DiffError;

/// Adam optimizer state for a fixed set of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Standard defaults (beta1 0.9, beta2 0.999, eps 1e-8); only the
    /// learning rate varies between training and fitting.
    pub fn new(learning_rate: T, param_shapes: &[&[usize]]) -> Self {
        AdamState {
            step_count: 0,
            learning_rate,
            beta1: T::cst(0.9),
            beta2: T::cst(0.999),
            epsilon: T::cst(1e-8),
            first_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn with_betas(mut self, beta1: T, beta2: T, epsilon: T) -> Self {
        assert!(beta1 >= T::zero() && beta1 < T::one(), "beta1 in [0,1)");
        assert!(beta2 >= T::zero() && beta2 < T::one(), "beta2 in [0,1)");
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    pub fn n_params(&self) -> usize {
        self.first_moment.len()
    }
}

/// One Adam update with bias correction. A non-finite gradient rejects the
/// whole step: parameters and state are left untouched and the offending
/// parameter is named in the error.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    names: &[&str],
    state: &mut AdamState<T>,
) -> Result<(), DiffError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first_moment.len(), "state built for a different parameter set");
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(DiffError::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(DiffError::NonFiniteGradient(name.to_string()));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .map(|p| &mut **p)
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let pm = p.values_mut();
        let mm = m.values_mut();
        let vm = v.values_mut();
        for i in 0..pm.len() {
            let gi = g.values()[i];
            mm[i] = b1 * mm[i] + (T::one() - b1) * gi;
            vm[i] = b2 * vm[i] + (T::one() - b2) * gi * gi;
            let m_hat = mm[i] / bc1;
            let v_hat = vm[i] / bc2;
            pm[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
