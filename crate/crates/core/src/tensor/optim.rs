use std::f64::consts::PI;

use super::store::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One update of every trainable parameter with the accumulated gradients.
    pub fn step(&self, store: &mut ParamStore, lr: f64) {
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.params.iter_mut().filter(|p| !p.buffer && !p.frozen) {
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                let m = self.beta1 * p.first_moment[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.second_moment[i] + (1.0 - self.beta2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                values[i] -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `base` at step 0 to `floor` at `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[3], 0.7)).unwrap();
        Adam::default().step(&mut s, 0.01);
        assert_eq!(s.value(id).data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[2], 1.0)).unwrap();
        s.accumulate_grad(id, &[0.3, -5.0]);
        Adam::default().step(&mut s, 0.01);
        let v = s.value(id).data();
        assert!(((1.0 - v[0]) - 0.01).abs() < 1e-6);
        assert!(((v[1] - 1.0) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = ParamStore::new();
        let id = s.add("psc.w", Tensor::full(&[1], 1.0)).unwrap();
        s.accumulate_grad(id, &[1.0]);
        s.set_frozen("psc.", true);
        Adam::default().step(&mut s, 0.1);
        assert_eq!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.01, 0.0, 0, 100), 0.01);
        assert!(cosine_lr(0.01, 0.0, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(0.01, 0.0, 50, 100) - 0.005).abs() < 1e-12);
    }
}
