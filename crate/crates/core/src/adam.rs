//! Bias-corrected Adam updates over a flat list of parameter tensors.

use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_LEARNING_RATE: f32 = 5e-4;
pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPSILON: f32 = 1e-8;

/// Optimizer state: hyperparameters plus per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f32) -> Self {
        AdamState {
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.first_moment.get(index)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.second_moment.get(index)
    }
}

/// One Adam step over `params`, using `grads` aligned by index. `names` is
/// used only for error reporting.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[&str],
    state: &mut AdamState,
) -> Result<(), TensorError> {
    assert_eq!(params.len(), grads.len());
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.second_moment = state.first_moment.clone();
    }
    for (i, (param, grad)) in params.iter().zip(grads).enumerate() {
        grad.expect_shape(param.shape(), "adam gradient")?;
        state.first_moment[i].expect_shape(param.shape(), "adam first moment")?;
        if !grad.data().iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                context: format!("gradient of parameter '{}'", names.get(i).unwrap_or(&"?")),
            });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for (((p, &g), mv), vv) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * g;
            *vv = b2 * *vv + (1.0 - b2) * g * g;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_and_moments_untouched() {
        let mut params = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(DEFAULT_LEARNING_RATE);
        adam_step(&mut params, &grads, &["w"], &mut state).unwrap();
        assert_eq!(params[0].data(), before.data());
        assert!(state.first_moment(0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(state.second_moment(0).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn quadratic_objective_shrinks_toward_zero() {
        // Oracle: run the identical scalar recurrence alongside the optimizer.
        let mut params = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let mut state = AdamState::new(DEFAULT_LEARNING_RATE);
        let (mut m, mut v) = (0.0f32, 0.0f32);
        let mut w_ref = 1.0f32;
        for t in 1..=500 {
            let g = 2.0 * params[0].data()[0];
            let grads = vec![Tensor::from_vec(&[1], vec![g]).unwrap()];
            adam_step(&mut params, &grads, &["w"], &mut state).unwrap();

            let g_ref = 2.0 * w_ref;
            m = DEFAULT_BETA1 * m + (1.0 - DEFAULT_BETA1) * g_ref;
            v = DEFAULT_BETA2 * v + (1.0 - DEFAULT_BETA2) * g_ref * g_ref;
            let m_hat = m / (1.0 - DEFAULT_BETA1.powi(t));
            let v_hat = v / (1.0 - DEFAULT_BETA2.powi(t));
            w_ref -= DEFAULT_LEARNING_RATE * m_hat / (v_hat.sqrt() + DEFAULT_EPSILON);
        }
        let w = params[0].data()[0];
        assert!((w - w_ref).abs() < 1e-6, "impl {w} vs oracle {w_ref}");
        assert!(w.abs() < 1.0, "|w| must strictly decrease, got {w}");
        assert_eq!(state.step_count, 500);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut params = vec![Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap()];
        let grads = vec![Tensor::from_vec(&[2], vec![3.0, -0.25]).unwrap()];
        let mut state = AdamState::new(DEFAULT_LEARNING_RATE);
        adam_step(&mut params, &grads, &["w"], &mut state).unwrap();
        for (&p, &g) in params[0].data().iter().zip(grads[0].data()) {
            let expected = -g.signum() * DEFAULT_LEARNING_RATE;
            assert!((p - expected).abs() < 1e-6 * DEFAULT_LEARNING_RATE.max(1.0), "{p} vs {expected}");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let grads = vec![
            Tensor::zeros(&[1]),
            Tensor::from_vec(&[1], vec![f32::NAN]).unwrap(),
        ];
        let mut state = AdamState::new(DEFAULT_LEARNING_RATE);
        let err = adam_step(&mut params, &grads, &["a", "b"], &mut state).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
    }
}
