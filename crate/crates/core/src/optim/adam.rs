use crate::error::{Error, Result};
use crate::model::{GradientSet, ParameterSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one per parameter scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParameterSet<T>) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// Resume from stored moments.
    pub fn restore(config: AdamConfig, step: u64, m: ParameterSet<T>, v: ParameterSet<T>) -> Self {
        Self { config, step, m, v }
    }

    /// One bias-corrected update. Leaves `params` untouched and returns an
    /// error naming the tensor if the update would produce a non-finite value.
    pub fn update(&mut self, params: &mut ParameterSet<T>, grad: &GradientSet<T>) -> Result<()> {
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NonFinite { tensor: format!("gradient of {name}") });
        }
        let c = self.config;
        let t = self.step + 1;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));

        let mut next = params.clone();
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let names: Vec<&'static str> = grad.slices().iter().map(|(n, _)| *n).collect();
        for ((((p, mm), vv), (_, g)), name) in next
            .slices_mut()
            .into_iter()
            .zip(m.slices_mut())
            .zip(v.slices_mut())
            .zip(grad.slices())
            .zip(names)
        {
            for i in 0..p.len() {
                mm[i] = b1 * mm[i] + (T::one() - b1) * g[i];
                vv[i] = b2 * vv[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = mm[i] / bc1;
                let v_hat = vv[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                if !p[i].is_finite() {
                    return Err(Error::NonFinite { tensor: name.to_string() });
                }
            }
        }
        *params = next;
        self.m = m;
        self.v = v;
        self.step = t;
        Ok(())
    }
}

/// Rescales `grad` so its global L2 norm is at most `max_norm` (no-op when
/// `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grad: &mut GradientSet<T>, max_norm: f64) -> f64 {
    let norm = grad.sum_sq().to_f64_lossy().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(T::of(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;

    fn one_scalar(x: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::zeros(ModelShape { users: 1, items: 1, dim: 1, layers: 0, per_layer_wbeh: false });
        p.user[(0, 0)] = x;
        p
    }

    #[test]
    fn three_steps_match_hand_trace() {
        // gradients 1, -2, 0.5 on one coordinate, lr 0.1
        let mut p = one_scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &p);
        let mut expected = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            let mut grad = p.zeros_like();
            grad.user[(0, 0)] = g;
            adam.update(&mut p, &grad).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let n = (t + 1) as i32;
            expected -= 0.1 * (m / (1.0 - 0.9f64.powi(n))) / ((v / (1.0 - 0.999f64.powi(n))).sqrt() + 1e-8);
            assert!((p.user[(0, 0)] - expected).abs() < 1e-15, "step {n}");
        }
        assert_eq!(adam.step, 3);
        // untouched coordinates stay put
        assert_eq!(p.item[(0, 0)], 0.0);
    }

    #[test]
    fn unit_gradient_trace() {
        // with g = 1 every step both bias-corrected moments are exactly 1
        let mut p = one_scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &p);
        let mut grad = p.zeros_like();
        grad.user[(0, 0)] = 1.0;
        for x in [0.9, 0.8, 0.7] {
            adam.update(&mut p, &grad).unwrap();
            assert!((p.user[(0, 0)] - x).abs() < 1e-8);
        }
        assert!((adam.m.user[(0, 0)] - 0.271).abs() < 1e-15);
        assert!((adam.v.user[(0, 0)] - (1.0 - 0.999f64.powi(3))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_and_decays_moments() {
        let mut p = one_scalar(0.5);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &p);
        let zero = p.zeros_like();
        adam.update(&mut p, &zero).unwrap();
        assert_eq!(p.user[(0, 0)], 0.5);
        let mut grad = p.zeros_like();
        grad.user[(0, 0)] = 2.0;
        adam.update(&mut p, &grad).unwrap();
        let (m, v) = (adam.m.user[(0, 0)], adam.v.user[(0, 0)]);
        adam.update(&mut p, &zero).unwrap();
        assert_eq!(adam.m.user[(0, 0)], 0.9 * m);
        assert_eq!(adam.v.user[(0, 0)], 0.999 * v);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = one_scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &p);
        let mut grad = p.zeros_like();
        grad.user[(0, 0)] = -123.0;
        adam.update(&mut p, &grad).unwrap();
        assert!((p.user[(0, 0)] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_keeps_params() {
        let mut p = one_scalar(2.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &p);
        let mut grad = p.zeros_like();
        grad.w_fus[(0, 0)] = f64::NAN;
        let err = adam.update(&mut p, &grad).unwrap_err();
        assert!(err.to_string().contains("W_fus"), "{err}");
        assert_eq!(p.user[(0, 0)], 2.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let p = one_scalar(0.0);
        let mut g = p.zeros_like();
        g.user[(0, 0)] = 3.0;
        g.item[(0, 0)] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.sum_sq().sqrt() - 1.0).abs() < 1e-15);
        assert!((g.user[(0, 0)] - 0.6).abs() < 1e-15);
        let mut g2 = p.zeros_like();
        g2.user[(0, 0)] = 0.5;
        assert_eq!(clip_global_norm(&mut g2, 1.0), 0.5);
        assert_eq!(g2.user[(0, 0)], 0.5);
    }
}
