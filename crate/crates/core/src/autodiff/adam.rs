use super::{AdError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_step_size(step_size: f64) -> Self {
        AdamConfig {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair of tensors per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update at step index `state.step + 1`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), AdError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(AdError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(AdError::Shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= cfg.step_size * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state = AdamState::zeros_like(&params);
        state.m[0] = Tensor::vector(vec![0.5, 0.5]);
        state.v[0] = Tensor::vector(vec![0.25, 0.25]);
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[2])];
        let cfg = AdamConfig::with_step_size(1e-2);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!(state.m[0].data().iter().all(|&m| (m - 0.45).abs() < 1e-15));
        assert!(state.v[0].data().iter().all(|&v| v < 0.25));
        // moments decay but a nonzero m still moves params; start from zero moments
        let mut fresh = AdamState::zeros_like(&before);
        let mut p = before.clone();
        adam_step(&mut p, &grads, &mut fresh, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::zeros_like(&params);
        let cfg = AdamConfig::with_step_size(1e-2);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state, &cfg).unwrap();
        let expected = -1e-2 * (1.0 / (1.0 + 1e-8));
        assert!((params[0].item() - expected).abs() < 1e-18);
    }

    #[test]
    fn two_steps_match_scripted_recurrence() {
        // Recurrence written out by hand for g = 0.5 at steps 1 and 2.
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 1e-2, 0.5);
        let mut x = 3.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut params = vec![Tensor::scalar(3.0)];
        let mut state = AdamState::zeros_like(&params);
        let cfg = AdamConfig::with_step_size(lr);
        for _ in 0..2 {
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
        }
        assert_eq!(state.step, 2);
        assert!((params[0].item() - x).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::zeros_like(&params);
        let err = adam_step(
            &mut params,
            &[Tensor::zeros(&[3])],
            &mut state,
            &AdamConfig::with_step_size(0.1),
        );
        assert!(matches!(err, Err(AdError::Shape(_))));
    }
}
