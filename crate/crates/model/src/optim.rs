//! Per-tensor gradient clipping and NAdam.

use serde::{Deserialize, Serialize};

use crate::gemm::Real;
use crate::net::Gradients;
use crate::params::{ModelParams, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clipnorm: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            clipnorm: 1.0,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NadamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Steps taken so far.
    pub t: u64,
}

impl<T: Real> NadamState<T> {
    pub fn new(p: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = p.params.iter().map(|q| vec![T::zero(); q.data.len()]).collect();
        NadamState {
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }
}

pub fn l2_norm<T: Real>(g: &[T]) -> T {
    g.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Rescales `g` to L2 norm `clipnorm` if it is longer.
pub fn clip<T: Real>(g: &mut [T], clipnorm: T) {
    let n = l2_norm(g);
    if n > clipnorm {
        let s = clipnorm / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// One NAdam update of every tensor `mask` allows. Each tensor's gradient is
/// clipped first, then
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// m^ = b1 m / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t)
/// v^ = v / (1 - b2^t)            theta -= lr m^ / (sqrt(v^) + eps)
/// ```
///
/// with `t` the 1-based step index. Returns the clipped gradients.
pub fn nadam_step<T: Real>(
    p: &mut ModelParams<T>,
    mut grads: Gradients<T>,
    state: &mut NadamState<T>,
    cfg: &NadamConfig,
    mask: Trainable,
) -> Gradients<T> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t + 1);
    let c1_prev = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps, clipnorm) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.clipnorm));
    for (i, q) in p.params.iter_mut().enumerate() {
        if !mask.allows(q.kind) {
            continue;
        }
        let g = &mut grads[i];
        clip(g, clipnorm);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = b1 * m[j] / c1 + (one - b1) * g[j] / c1_prev;
            let v_hat = v[j] / c2;
            q.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_params, ModelConfig};
    use proptest::prelude::*;

    fn tiny() -> ModelParams<f64> {
        let mut c = ModelConfig::single_column(crate::ColumnRole::Low, &[1, 1], (4, 3));
        c.in_channels = 1;
        c.bottleneck = 1;
        c.head = vec![1];
        init_params(&c, 0).unwrap()
    }

    #[test]
    fn hand_computed_scalar_step() {
        // m = 0.1, v = 0.001, m^ = 0.09/0.19 + 1, v^ = 1
        let mut p = tiny();
        let last = p.params.len() - 1;
        let before = p.params[last].data[0];
        let mut grads: Gradients<f64> = p.params.iter().map(|q| vec![0.0; q.data.len()]).collect();
        grads[last][0] = 1.0;
        let mut st = NadamState::new(&p);
        nadam_step(&mut p, grads, &mut st, &NadamConfig::default(), Trainable::All);
        let delta = p.params[last].data[0] - before;
        let expected = -1e-3 * (0.09 / 0.19 + 1.0) / (1.0 + 1e-7);
        assert!((delta - expected).abs() < 1e-15);
        assert!((delta + 1.47368e-3).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny();
        let before = p.clone();
        let grads = p.params.iter().map(|q| vec![0.0; q.data.len()]).collect();
        let mut st = NadamState::new(&p);
        nadam_step(&mut p, grads, &mut st, &NadamConfig::default(), Trainable::All);
        assert_eq!(p, before);
    }

    #[test]
    fn masked_tensors_untouched() {
        let mut p = tiny();
        let before = p.clone();
        let grads = p.params.iter().map(|q| vec![0.5; q.data.len()]).collect();
        let mut st = NadamState::new(&p);
        nadam_step(&mut p, grads, &mut st, &NadamConfig::default(), Trainable::Stage1);
        for (a, b) in p.params.iter().zip(&before.params) {
            assert_eq!(a.kind.is_column(), a.data == b.data);
        }
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(g in prop::collection::vec(-1e6f64..1e6, 1..64), c in 0.01f64..10.0) {
            let mut g = g;
            let before = g.clone();
            clip(&mut g, c);
            prop_assert!(l2_norm(&g) <= c * (1.0 + 1e-12) + 1e-12);
            if l2_norm(&before) <= c {
                prop_assert_eq!(g, before);
            }
        }
    }
}
