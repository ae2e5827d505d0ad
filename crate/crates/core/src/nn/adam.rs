use serde::{Deserialize, Serialize};

use super::ParamSet;

/// Adaptive-moment optimizer with bias correction and a constant step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One descent step on the gradients currently held by `set`.
    pub fn update<P: ParamSet + ?Sized>(&mut self, set: &mut P) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut off = 0;
        for p in set.params_mut() {
            for (j, (w, g)) in p.value.iter_mut().zip(&p.grad).enumerate() {
                let m = &mut self.m[off + j];
                let v = &mut self.v[off + j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            off += p.len();
        }
        debug_assert_eq!(off, self.m.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct One(Param);
    impl ParamSet for One {
        fn params(&self) -> Vec<&Param> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = One(Param::new("w", vec![2], vec![1.0, -1.0]));
        p.0.grad = vec![3.0, -0.01];
        let mut adam = Adam::new(0.1, 2);
        adam.update(&mut p);
        assert!((p.0.value[0] - 0.9).abs() < 1e-6);
        assert!((p.0.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = One(Param::new("w", vec![1], vec![5.0]));
        let mut adam = Adam::new(0.05, 1);
        for _ in 0..2000 {
            p.0.grad = vec![2.0 * (p.0.value[0] - 2.0)];
            adam.update(&mut p);
        }
        assert!((p.0.value[0] - 2.0).abs() < 1e-2);
    }
}
