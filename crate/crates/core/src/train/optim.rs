//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

/// First and second moments, one pair per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Pre-clip global gradient norm, reported for logging.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub grad_norm: f64,
}

/// One AdamW update. Gradients are clipped to `cfg.grad_clip` global norm
/// first; the update is `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn optimizer_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<StepStats> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("gradient/optimizer state does not match parameters"));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.tensor(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: params.tensor(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of `{}`", params.name(id)),
                    index: i,
                });
            }
        }
    }
    let norm = grads.global_norm().as_f64();
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    let (lr_t, wd, eps, clip) = (T::of(lr), T::of(cfg.weight_decay), T::of(ADAM_EPS), T::of(clip));
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.0;
        let p = params.tensor_mut(id).data_mut();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        match grads.get(id) {
            Some(g) => {
                for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                    let g = g * clip;
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                }
            }
            None => {
                // moments still decay as if the gradient were zero
                for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m;
                    *v = b2 * *v;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                }
            }
        }
    }
    Ok(StepStats { grad_norm: norm })
}

/// Linear warmup over the first `warmup` steps, then constant.
pub fn learning_rate(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::forward_backward;

    fn scalar_store(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::full(&[1], p)).unwrap();
        s
    }

    fn square_grads(store: &ParamStore<f64>) -> Grads<f64> {
        forward_backward(store, |g| {
            let p = g.param_named("p")?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        })
        .unwrap()
        .1
    }

    fn no_clip() -> AdamConfig {
        AdamConfig {
            grad_clip: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut store = scalar_store(0.7);
        let grads = Grads::zeros_like(&store);
        let mut st = AdamState::new(&store);
        optimizer_step(&mut store, &grads, &mut st, &no_clip(), 0.1).unwrap();
        assert_eq!(store.get("p").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0);
        let grads = square_grads(&store);
        let mut st = AdamState::new(&store);
        optimizer_step(&mut store, &grads, &mut st, &no_clip(), 0.1).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + ADAM_EPS);
        let p = store.get("p").unwrap().data()[0];
        assert!((p - expected).abs() < 1e-15, "{p}");
        assert!(((1.0 - p) - 0.1).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively() {
        let mut store = scalar_store(2.0);
        let grads = Grads::zeros_like(&store);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..no_clip()
        };
        optimizer_step(&mut store, &grads, &mut st, &cfg, 0.1).unwrap();
        assert!((store.get("p").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_betas_give_rms_normalised_steps() {
        let cfg = AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            ..no_clip()
        };
        for p0 in [3.0, -0.25, 10.0] {
            let mut store = scalar_store(p0);
            let mut st = AdamState::new(&store);
            for _ in 0..3 {
                let before = store.get("p").unwrap().data()[0];
                let grads = square_grads(&store);
                let g = grads.get(store.id("p").unwrap()).unwrap().data()[0];
                optimizer_step(&mut store, &grads, &mut st, &cfg, 0.01).unwrap();
                let after = store.get("p").unwrap().data()[0];
                let want = before - 0.01 * g / (g.abs() + ADAM_EPS);
                assert!((after - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn clipping_bounds_the_first_moment() {
        let mut store = scalar_store(100.0);
        let grads = square_grads(&store);
        let mut st = AdamState::new(&store);
        let stats = optimizer_step(&mut store, &grads, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(stats.grad_norm, 200.0);
        assert!((st.m[0].data()[0] - 0.1 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = scalar_store(1.0);
        let mut grads = square_grads(&store);
        grads.scale(f64::NAN);
        let mut st = AdamState::new(&store);
        let err = optimizer_step(&mut store, &grads, &mut st, &no_clip(), 0.1).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }

    #[test]
    fn warmup_is_linear() {
        assert_eq!(learning_rate(1.0, 0, 4), 0.25);
        assert_eq!(learning_rate(1.0, 3, 4), 1.0);
        assert_eq!(learning_rate(1.0, 100, 4), 1.0);
        assert_eq!(learning_rate(1.0, 0, 0), 1.0);
    }
}
