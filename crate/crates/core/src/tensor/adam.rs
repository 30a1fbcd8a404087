use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Learning-rate schedule evaluated at 1-based update numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then decay with `1/sqrt(step)`.
    InverseSqrt {
        warmup: u64,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::InverseSqrt { warmup } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                (s / w).min((w / s).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Adam with bias correction. One [`AdamState`] per parameter, in store order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<T>>,
    /// Parameter updates skipped because the gradient was not finite.
    pub skipped_non_finite: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let states = store
            .iter()
            .map(|(_, p)| AdamState {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                step: 0,
            })
            .collect();
        Self {
            config,
            states,
            skipped_non_finite: 0,
        }
    }

    /// Applies one update at learning rate `lr` and zeroes every gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
        for (p, st) in store.iter_mut().zip(&mut self.states) {
            if !p.grad.is_finite() {
                self.skipped_non_finite += 1;
                log::warn!("skipping update of {}: non-finite gradient", p.name);
                p.grad.fill_zero();
                continue;
            }
            st.step += 1;
            let c1 = 1.0 - beta1.powi(st.step as i32);
            let c2 = 1.0 - beta2.powi(st.step as i32);
            let step_size = T::lit(lr / c1);
            let c2_sqrt = T::lit(c2.sqrt());
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let denom = v[i].sqrt() / c2_sqrt + eps;
                w[i] = w[i] - step_size * m[i] / denom;
            }
            p.grad.fill_zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn quad_grad(store: &mut ParamStore<f64>, target: f64) {
        let id = store.id("w").unwrap();
        let w = store.get(id).value.item();
        store.get_mut(id).grad.data_mut()[0] = 2.0 * (w - target);
    }

    fn one_param(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = one_param(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, 0.1);
        assert_eq!(s.get(s.id("w").unwrap()).value.item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the first step is lr·g/(|g|+eps)
        let mut s = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        quad_grad(&mut s, 0.0);
        adam.step(&mut s, 0.1);
        let w = s.get(s.id("w").unwrap()).value.item();
        assert!((w - 0.9).abs() < 1e-9, "{w}");
        assert_eq!(adam.states[0].step, 1);
        assert_eq!(s.get(s.id("w").unwrap()).grad.item(), 0.0);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut s = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..500 {
            let id = s.id("w").unwrap();
            let mut g = Graph::new();
            let w = g.param(&s, id);
            let c = g.constant(Tensor::scalar(-3.0));
            let d = g.add(w, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l, &mut s).unwrap();
            adam.step(&mut s, 0.1);
        }
        let w = s.get(s.id("w").unwrap()).value.item();
        assert!((w - 3.0).abs() < 1e-2, "{w}");
    }

    #[test]
    fn nan_gradient_skips_update() {
        let mut s = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let id = s.id("w").unwrap();
        s.get_mut(id).grad.data_mut()[0] = f64::NAN;
        adam.step(&mut s, 0.1);
        assert_eq!(s.get(id).value.item(), 1.0);
        assert_eq!(adam.skipped_non_finite, 1);
        assert_eq!(adam.states[0].step, 0);
        assert_eq!(s.get(id).grad.item(), 0.0);
    }

    #[test]
    fn inverse_sqrt_schedule_peaks_at_warmup() {
        let s = LrSchedule::InverseSqrt { warmup: 100 };
        assert!((s.factor(50) - 0.5).abs() < 1e-12);
        assert!((s.factor(100) - 1.0).abs() < 1e-12);
        assert!((s.factor(400) - 0.5).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.factor(7), 1.0);
    }
}
