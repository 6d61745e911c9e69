use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

/// One bias-corrected Adam update of `params` against `grads` (descent).
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Contract(format!(
                "adam_step: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - BETA1.powi(t);
    let correct2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((x, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *x -= lr * (*m / correct1) / ((*v / correct2).sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::vector(vec![0.0, 0.0])], &mut state, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        state.first[0] = Tensor::vector(vec![1.0, 1.0]);
        state.second[0] = Tensor::vector(vec![1.0, 1.0]);
        let mut q = p.clone();
        adam_step(&mut [&mut q], &[Tensor::vector(vec![0.0, 0.0])], &mut state, 0.0).unwrap();
        assert_eq!(state.first[0].data(), &[BETA1, BETA1]);
        assert_eq!(state.second[0].data(), &[BETA2, BETA2]);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut state = AdamState::new([&p]);
        let lr = 0.01;
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.data()[0];
            adam_step(&mut [&mut p], &[Tensor::vector(vec![3.7])], &mut state, lr).unwrap();
            last = before - p.data()[0];
        }
        assert!((last - lr).abs() < 1e-6);
    }

    #[test]
    fn descends_on_a_parabola() {
        let mut theta = Tensor::vector(vec![1.0]);
        let mut state = AdamState::new([&theta]);
        let grad = Tensor::vector(vec![2.0 * theta.data()[0]]);
        adam_step(&mut [&mut theta], &[grad], &mut state, 0.1).unwrap();
        assert!(theta.data()[0] < 1.0);
        assert!(theta.data()[0] * theta.data()[0] < 1.0);
    }

    #[test]
    fn mismatches_rejected() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut state = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::vector(vec![0.0])], &mut state, 0.1).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut state, 0.1).is_err());
        assert_eq!(state.step, 0);
    }
}
