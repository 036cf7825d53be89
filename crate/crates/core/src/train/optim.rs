use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient; `0` disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// First and second moment buffers for each trainable parameter plus the
/// global step counter. Frozen parameters have no buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    /// Indexed like the parameter store.
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                p.tensor.requires_grad.then(|| Moments {
                    m: vec![T::zero(); p.tensor.numel()],
                    v: vec![T::zero(); p.tensor.numel()],
                })
            })
            .collect();
        Self { step: 0, moments }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.moments.get(id.index()).and_then(|m| m.as_ref())
    }
}

/// One bias-corrected Adam update over every trainable parameter, using the
/// gradients stored on the parameters. Frozen parameters are not touched.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters but the model has {}",
            state.moments.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        let has = state.moments[id.index()].is_some();
        if p.tensor.requires_grad && !has {
            return Err(Error::State(format!("{} is trainable but has no moment buffers", p.name)));
        }
        if p.tensor.requires_grad && p.tensor.grad.is_none() {
            return Err(Error::State(format!("{} is trainable but has no gradient", p.name)));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    let (lr_t, eps, wd) = (T::of(lr), T::of(cfg.eps), T::of(cfg.weight_decay));

    for (id, p) in store.iter_mut() {
        if !p.tensor.requires_grad {
            continue;
        }
        let moments = state.moments[id.index()].as_mut().expect("checked above");
        let grad = p.tensor.grad.take().expect("checked above");
        let mut update = Vec::with_capacity(grad.len());
        for (i, &g) in grad.iter().enumerate() {
            let g = if cfg.weight_decay != 0.0 { g + wd * p.tensor.data()[i] } else { g };
            let m = b1 * moments.m[i] + one_b1 * g;
            let v = b2 * moments.v[i] + one_b2 * g * g;
            moments.m[i] = m;
            moments.v[i] = v;
            update.push(lr_t * (m / bc1) / ((v / bc2).sqrt() + eps));
        }
        // A zero rate must leave parameters bit-identical, including -0.0.
        if lr != 0.0 {
            for (w, u) in p.tensor.data_mut().iter_mut().zip(update) {
                *w = *w - u;
            }
        }
        p.tensor.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64], trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_f64(&[values.len()], values).unwrap().with_requires_grad(trainable));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = store(&[0.7, -0.2], true);
        let mut st = OptimizerState::new(&s);
        s.iter_mut().next().unwrap().1.tensor.grad = Some(vec![0.0, 0.0]);
        adam_step(&mut s, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(s.by_name("w").unwrap().data(), &[0.7, -0.2]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let cfg = AdamConfig::default();
        let (w0, g, lr) = (0.5f64, 0.3f64, 1e-3);
        let mut s = store(&[w0], true);
        let mut st = OptimizerState::new(&s);
        s.iter_mut().next().unwrap().1.tensor.grad = Some(vec![g]);
        adam_step(&mut s, &mut st, lr, &cfg).unwrap();
        // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g²
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expected = w0 - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        let got = s.by_name("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15);
        // ≈ −lr·sign(g)
        assert!(((got - w0) + lr).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut s = store(&[1.0], true);
        let mut st = OptimizerState::new(&s);
        let err = adam_step(&mut s, &mut st, 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::State(ref m) if m.contains('w')));
    }

    #[test]
    fn frozen_parameters_have_no_buffers_and_never_move() {
        let mut s = store(&[1.0, 2.0], false);
        s.register("b", Tensor::from_f64(&[1], &[3.0]).unwrap().with_requires_grad(true));
        let mut st = OptimizerState::new(&s);
        assert!(st.moments[0].is_none() && st.moments[1].is_some());
        for _ in 0..3 {
            s.iter_mut().nth(1).unwrap().1.tensor.grad = Some(vec![0.5]);
            adam_step(&mut s, &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.by_name("w").unwrap().data(), &[1.0, 2.0]);
        assert!(s.by_name("b").unwrap().data()[0] < 3.0);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn zero_rate_is_bit_exact() {
        let mut s = store(&[-0.0, 1.5], true);
        let mut st = OptimizerState::new(&s);
        s.iter_mut().next().unwrap().1.tensor.grad = Some(vec![-2.0, 4.0]);
        adam_step(&mut s, &mut st, 0.0, &AdamConfig::default()).unwrap();
        let d = s.by_name("w").unwrap().data();
        assert_eq!(d[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(d[1], 1.5);
    }
}
